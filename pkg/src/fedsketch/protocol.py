"""Federated LoRA rounds with independent client sampling.

Each round the server draws one sketch per client, every client flips its own
Bernoulli(q_n) coin, participants run ``H`` sketched SGD steps from the
broadcast factors, and the server applies ``sum_n a_n / q_n * delta_n`` over the
participants. Dividing by ``q_n`` keeps the expected global step equal to the
full-participation step.

Randomness is derived from a master seed plus ``(stream, round, client)``, so a
client's sketch and batches do not depend on who else participated or on the
order in which local updates run.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import (
    EmptyDatasetError,
    InvalidPlanError,
    ProtocolViolationError,
)
from .lora import LoraState, SketchMatrix, sample_sketch, sketched_loss_and_grads
from .timing import ClientProfile, RoundRecord, SystemConfig, realized_round_time, scaled_times

SKETCH_STREAM = 1
PARTICIPATION_STREAM = 2
BATCH_STREAM = 3


def stream(seed: int, kind: int, *path: int) -> np.random.Generator:
    """Independent generator for ``(seed, kind, *path)``."""
    return np.random.default_rng([int(seed), int(kind), *(int(p) for p in path)])


@dataclass(frozen=True)
class Plan:
    """Per-client sampling probabilities ``q`` and sketching ratios ``k``."""

    q: np.ndarray
    k: np.ndarray
    gamma: int

    def __post_init__(self):
        q = np.array(self.q, dtype=float)
        k_raw = np.asarray(self.k)
        k = np.rint(k_raw).astype(np.int64)
        if q.ndim != 1 or k.shape != q.shape:
            raise InvalidPlanError(f"q{q.shape} and k{k.shape} must be equal-length vectors")
        if np.any(k != k_raw):
            raise InvalidPlanError("sketching ratios must be integers")
        if not np.all((q > 0) & (q <= 1)):
            raise InvalidPlanError(f"sampling probabilities must lie in (0, 1]: {q}")
        if np.any(k < 1) or np.any(k > self.gamma):
            raise InvalidPlanError(f"sketching ratios must lie in [1, {self.gamma}]: {k}")
        q.setflags(write=False)
        k.setflags(write=False)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "gamma", int(self.gamma))

    @property
    def N(self) -> int:
        return int(self.q.size)

    @classmethod
    def uniform(cls, N: int, q: float, k: int, gamma: int) -> "Plan":
        return cls(np.full(N, float(q)), np.full(N, int(k)), gamma)

    def to_dict(self) -> dict:
        return {"q": self.q.tolist(), "k": self.k.tolist(), "gamma": self.gamma}

    @classmethod
    def from_dict(cls, d: dict) -> "Plan":
        return cls(np.asarray(d["q"], dtype=float), np.asarray(d["k"]), int(d["gamma"]))


@dataclass(frozen=True)
class ParticipationDraw:
    indicators: np.ndarray
    round: int

    @property
    def participants(self) -> tuple[int, ...]:
        return tuple(int(i) for i in np.flatnonzero(self.indicators))


@dataclass(frozen=True)
class ClientDelta:
    """Start-minus-end factors of one client's round (learning rate included)."""

    client: int
    delta_B: np.ndarray
    delta_A: np.ndarray


@dataclass(frozen=True)
class ClientData:
    inputs: np.ndarray
    targets: np.ndarray

    @property
    def size(self) -> int:
        return int(self.targets.shape[0])

    def sample_batch(self, batch_size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        if self.size == 0:
            raise EmptyDatasetError("client has no data")
        idx = rng.integers(0, self.size, size=batch_size)
        return self.inputs[idx], self.targets[idx]


def draw_participants(plan: Plan, rng: np.random.Generator, round_index: int = 0) -> ParticipationDraw:
    return ParticipationDraw(rng.random(plan.N) < plan.q, round_index)


def round_sketches(plan: Plan, seed: int, round_index: int) -> list[SketchMatrix]:
    """Server-side sketches for every client in a round."""
    return [
        sample_sketch(plan.gamma, int(plan.k[n]), stream(seed, SKETCH_STREAM, round_index, n))
        for n in range(plan.N)
    ]


def local_update(global_state: LoraState, S: SketchMatrix, data: ClientData, H: int,
                 lr: float, rng: np.random.Generator, *, client: int = 0,
                 batch_size: int = 16) -> ClientDelta:
    """Run ``H`` sketched SGD steps from the broadcast factors.

    ``S`` stays fixed for all ``H`` steps. Batches are drawn with replacement
    from ``data`` using ``rng``.
    """
    if H < 1:
        raise ValueError("H must be >= 1")
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    if data.size == 0:
        raise EmptyDatasetError(f"client {client} has no data")
    W0 = global_state.W0
    B = global_state.B.copy()
    A = global_state.A.copy()
    for _ in range(H):
        inputs, targets = data.sample_batch(batch_size, rng)
        _, grad_B, grad_A = sketched_loss_and_grads(W0, B, A, S, inputs, targets)
        B -= lr * grad_B
        A -= lr * grad_A
    return ClientDelta(client, global_state.B - B, global_state.A - A)


def aggregate(global_state: LoraState, deltas: Sequence[ClientDelta], draw: ParticipationDraw,
              plan: Plan, weights: np.ndarray) -> LoraState:
    """Inverse-probability weighted update over the participants of ``draw``."""
    expected = set(draw.participants)
    got = [d.client for d in deltas]
    if len(got) != len(set(got)):
        raise ProtocolViolationError("duplicate client deltas")
    if set(got) != expected:
        extra = sorted(set(got) - expected)
        missing = sorted(expected - set(got))
        raise ProtocolViolationError(
            f"deltas do not match participants (unexpected {extra}, missing {missing})"
        )
    if not deltas:
        return global_state
    B = global_state.B.copy()
    A = global_state.A.copy()
    # Fixed client order keeps the floating-point sum independent of arrival order.
    for d in sorted(deltas, key=lambda d: d.client):
        w = weights[d.client] / plan.q[d.client]
        B -= w * d.delta_B
        A -= w * d.delta_A
    return global_state.with_factors(B, A)


def upload_size(k: int, state: LoraState) -> int:
    """Scalars a client uploads: the active ``k`` columns of B and rows of A."""
    m, n = state.shape
    return int(k) * (m + n)


@dataclass(frozen=True)
class Federation:
    """Everything a round needs besides the model state and the plan."""

    clients: Sequence[ClientData]
    profiles: Sequence[ClientProfile]
    system: SystemConfig
    seed: int
    batch_size: int = 16

    @property
    def weights(self) -> np.ndarray:
        return np.array([p.a for p in self.profiles])


def run_round(state: LoraState, plan: Plan, fed: Federation, round_index: int,
              cumulative_time: float = 0.0,
              evaluate: Callable[[LoraState], tuple[float, dict]] | None = None,
              ) -> tuple[LoraState, RoundRecord]:
    """One full communication round: sketch, sample, train, aggregate, time."""
    system = fed.system
    if plan.N != len(fed.clients) or plan.gamma != state.gamma:
        raise InvalidPlanError("plan does not match the federation")
    sketches = round_sketches(plan, fed.seed, round_index)
    draw = draw_participants(plan, stream(fed.seed, PARTICIPATION_STREAM, round_index), round_index)
    participants = draw.participants
    deltas = [
        local_update(state, sketches[n], fed.clients[n], system.H, system.lr,
                     stream(fed.seed, BATCH_STREAM, round_index, n),
                     client=n, batch_size=fed.batch_size)
        for n in participants
    ]
    new_state = aggregate(state, deltas, draw, plan, fed.weights)
    if participants:
        taus, ts = scaled_times(fed.profiles, plan.k, plan.gamma)
        round_time, _ = realized_round_time(participants, taus, ts, system.f_tot)
    else:
        round_time = 0.0
    loss, metrics = evaluate(new_state) if evaluate is not None else (float("nan"), {})
    record = RoundRecord(
        round=round_index,
        participants=participants,
        round_time=round_time,
        cumulative_time=cumulative_time + round_time,
        global_loss=loss,
        eval_metrics=dict(metrics),
    )
    return new_state, record
