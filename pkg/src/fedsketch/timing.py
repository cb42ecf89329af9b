"""Round-time model for synchronous rounds over a shared wireless band.

Participants split the total bandwidth ``f_tot`` so that every one of them
finishes at the same instant ``T``: client ``n`` gets ``f_n = t_n / (T - tau_n)``
and ``T`` is the root of ``sum_n t_n / (T - tau_n) = f_tot``. Computation and
communication times shrink by ``k**2 / gamma**2`` under sketching.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimensionError, InvalidSketchRatioError

RESIDUAL_RTOL = 1e-9
_MAX_BISECTIONS = 200


@dataclass(frozen=True)
class ClientProfile:
    a: float
    tau_full: float
    t_full: float

    def __post_init__(self):
        if not 0 < self.a <= 1:
            raise ValueError(f"data weight must lie in (0, 1], got {self.a}")
        if self.tau_full <= 0 or self.t_full <= 0:
            raise ValueError("full-rank times must be positive")


@dataclass(frozen=True)
class SystemConfig:
    f_tot: float
    N: int
    gamma: int
    H: int
    lr: float

    def __post_init__(self):
        if self.f_tot <= 0:
            raise ValueError("f_tot must be positive")
        if self.N < 1 or self.gamma < 1 or self.H < 1:
            raise ValueError("N, gamma and H must be >= 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")


@dataclass
class RoundRecord:
    round: int
    participants: tuple[int, ...]
    round_time: float
    cumulative_time: float
    global_loss: float
    eval_metrics: dict[str, float] = field(default_factory=dict)


def profile_arrays(profiles: Sequence[ClientProfile]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack profiles into ``(a, tau_full, t_full)`` vectors."""
    a = np.array([p.a for p in profiles], dtype=float)
    tau = np.array([p.tau_full for p in profiles], dtype=float)
    t = np.array([p.t_full for p in profiles], dtype=float)
    return a, tau, t


def _check_k(k, gamma: int) -> None:
    k = np.asarray(k)
    if np.any(k < 1) or np.any(k > gamma):
        raise InvalidSketchRatioError(f"sketching ratio outside [1, {gamma}]: {k}")


def scale_times(profile: ClientProfile, k: int, gamma: int) -> tuple[float, float]:
    """Computation and unit-bandwidth communication time at sketching ratio ``k``."""
    _check_k(k, gamma)
    factor = (k * k) / (gamma * gamma)
    return profile.tau_full * factor, profile.t_full * factor


def scaled_times(profiles: Sequence[ClientProfile], k, gamma: int) -> tuple[np.ndarray, np.ndarray]:
    """Vector form of :func:`scale_times` for a whole fleet."""
    _check_k(k, gamma)
    _, tau, t = profile_arrays(profiles)
    factor = np.asarray(k, dtype=float) ** 2 / float(gamma) ** 2
    return tau * factor, t * factor


def realized_round_time(participants: Sequence[int], taus: np.ndarray, ts: np.ndarray,
                        f_tot: float) -> tuple[float, np.ndarray]:
    """Water-filling round time for one set of participants.

    ``taus`` and ``ts`` are fleet-wide vectors (already scaled for sketching);
    the returned bandwidths are aligned with ``participants``.
    """
    idx = np.asarray(participants, dtype=np.intp)
    if idx.size == 0:
        raise ValueError("no participants: the caller must charge a zero-length round")
    if f_tot <= 0:
        raise ValueError("f_tot must be positive")
    tau = np.asarray(taus, dtype=float)[idx]
    t = np.asarray(ts, dtype=float)[idx]
    tau_max = tau.max()
    gap = tau_max - tau
    # Solve for the slack s = T - max(tau) > 0; LHS(s) is strictly decreasing.
    lo, hi = 0.0, t.sum() / f_tot
    s = hi
    for _ in range(_MAX_BISECTIONS):
        s = 0.5 * (lo + hi)
        if s <= lo or s >= hi:
            break
        lhs = np.sum(t / (s + gap))
        if abs(lhs - f_tot) <= 1e-3 * RESIDUAL_RTOL * f_tot:
            break
        if lhs > f_tot:
            lo = s
        else:
            hi = s
    T = tau_max + s
    return float(T), t / (s + gap)


def sample_round_times(q: np.ndarray, taus: np.ndarray, ts: np.ndarray, f_tot: float,
                       n_draws: int, rng: np.random.Generator) -> np.ndarray:
    """Realized round times for ``n_draws`` independent participation draws.

    Draws with no participant take zero time.
    """
    q = np.asarray(q, dtype=float)
    mask = rng.random((n_draws, q.size)) < q
    return round_times_for_masks(mask, taus, ts, f_tot)


def round_times_for_masks(mask: np.ndarray, taus: np.ndarray, ts: np.ndarray,
                          f_tot: float) -> np.ndarray:
    """Batched water-filling: one bisection per row of the boolean ``mask``."""
    mask = np.asarray(mask, dtype=bool)
    taus = np.asarray(taus, dtype=float)
    ts = np.asarray(ts, dtype=float)
    active = mask.any(axis=1)
    out = np.zeros(mask.shape[0])
    if not active.any():
        return out
    m = mask[active]
    tau_max = np.where(m, taus, -np.inf).max(axis=1)
    gap = np.where(m, tau_max[:, None] - taus, 1.0)
    t = np.where(m, ts, 0.0)
    lo = np.zeros(m.shape[0])
    hi = t.sum(axis=1) / f_tot
    for _ in range(_MAX_BISECTIONS):
        s = 0.5 * (lo + hi)
        lhs = np.sum(t / (s[:, None] + gap), axis=1)
        above = lhs > f_tot
        lo = np.where(above, s, lo)
        hi = np.where(above, hi, s)
        if np.all(hi - lo <= 4 * np.finfo(float).eps * hi):
            break
    out[active] = tau_max + 0.5 * (lo + hi)
    return out


def expected_max_tau(q, taus) -> float:
    """Expected largest computation time among the participants.

    Clients are sorted by ``tau``; client ``n`` is the slowest participant when
    it joins and every slower client stays out. The empty round contributes 0.
    """
    q = np.asarray(q, dtype=float)
    taus = np.asarray(taus, dtype=float)
    if q.shape != taus.shape or q.ndim != 1:
        raise DimensionError(f"q{q.shape} and taus{taus.shape} must be equal-length vectors")
    order = np.argsort(taus, kind="stable")
    q, taus = q[order], taus[order]
    # none_above[n] = prod_{i > n} (1 - q_i)
    none_above = np.append(np.cumprod((1.0 - q)[::-1])[::-1][1:], 1.0)
    return float(np.sum(none_above * q * taus))


def expected_round_time_bound(plan, profiles: Sequence[ClientProfile], f_tot: float,
                              tight: bool = False) -> float:
    """Upper bound on the expected round time of a plan.

    The default is the fully separable bound
    ``sum_n (k_n^2/gamma^2) q_n (t_n/f_tot + tau_n)``. With ``tight=True`` the
    straggler term is kept exact: ``sum_n q_n t_n / f_tot + E[max tau]``.
    """
    q = np.asarray(plan.q, dtype=float)
    taus, ts = scaled_times(profiles, plan.k, plan.gamma)
    if q.shape != taus.shape:
        raise DimensionError("plan length does not match the fleet")
    if tight:
        return float(np.dot(q, ts) / f_tot + expected_max_tau(q, taus))
    return float(np.dot(q, ts / f_tot + taus))
