"""Toy LoRA model with random rank sketching.

The model is one frozen linear layer ``W0`` (classes x features) plus a
trainable low-rank correction ``B @ A``. A sketch keeps ``k`` of the ``gamma``
rank components and rescales them by ``gamma / k`` so that the sketched
product is an unbiased estimate of ``B @ A``.

Sketch indices are 0-based throughout the package.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import DimensionError, EmptyBatchError, InvalidSketchRatioError

W0_SCALE = 0.1
A_INIT_STD = 0.02


@dataclass(frozen=True)
class SketchMatrix:
    """Compact scaled diagonal selector: active indices plus ``gamma / k``."""

    gamma: int
    indices: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.intp)
        if self.gamma < 1:
            raise InvalidSketchRatioError(f"gamma must be >= 1, got {self.gamma}")
        if idx.ndim != 1 or not 1 <= idx.size <= self.gamma:
            raise InvalidSketchRatioError(
                f"sketch needs between 1 and {self.gamma} indices, got {idx.size}"
            )
        idx = np.sort(idx)
        if idx[0] < 0 or idx[-1] >= self.gamma or np.any(np.diff(idx) == 0):
            raise InvalidSketchRatioError(f"invalid sketch indices {idx.tolist()}")
        idx.setflags(write=False)
        object.__setattr__(self, "indices", idx)

    @property
    def k(self) -> int:
        return int(self.indices.size)

    @property
    def scale(self) -> Fraction:
        return Fraction(self.gamma, self.k)

    @property
    def factor(self) -> float:
        return self.gamma / self.k

    @classmethod
    def identity(cls, gamma: int) -> "SketchMatrix":
        return cls(gamma, np.arange(gamma))

    def diagonal(self) -> np.ndarray:
        d = np.zeros(self.gamma)
        d[self.indices] = self.factor
        return d

    def materialize(self) -> np.ndarray:
        """Dense ``gamma x gamma`` form. Only meant for checks."""
        return np.diag(self.diagonal())


def sample_sketch(gamma: int, k: int, rng: np.random.Generator) -> SketchMatrix:
    """Draw a sketch whose active set is a uniform ``k``-subset of ``range(gamma)``."""
    if not 1 <= k <= gamma:
        raise InvalidSketchRatioError(f"sketching ratio k={k} outside [1, {gamma}]")
    if k == gamma:
        return SketchMatrix.identity(gamma)
    return SketchMatrix(gamma, rng.choice(gamma, size=k, replace=False))


def apply_sketch(B: np.ndarray, S: SketchMatrix, A: np.ndarray) -> np.ndarray:
    """Return ``B @ S @ A`` using only the active columns of B and rows of A."""
    if B.ndim != 2 or A.ndim != 2 or B.shape[1] != S.gamma or A.shape[0] != S.gamma:
        raise DimensionError(
            f"cannot sketch B{B.shape} @ S[{S.gamma}] @ A{A.shape}"
        )
    idx = S.indices
    if S.k == S.gamma:
        return B @ A
    return S.factor * (B[:, idx] @ A[idx, :])


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        if self.inputs.ndim != 2 or self.targets.ndim != 1:
            raise DimensionError("inputs must be 2-D and targets 1-D")
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise DimensionError(
                f"{self.inputs.shape[0]} inputs but {self.targets.shape[0]} targets"
            )

    @property
    def size(self) -> int:
        return int(self.targets.shape[0])


@dataclass(frozen=True)
class LoraState:
    """Frozen base weight plus trainable factors ``B`` (m x gamma), ``A`` (gamma x n)."""

    W0: np.ndarray
    B: np.ndarray
    A: np.ndarray
    gamma: int = field(init=False)

    def __post_init__(self):
        m, n = self.W0.shape
        if self.B.ndim != 2 or self.A.ndim != 2:
            raise DimensionError("B and A must be matrices")
        gamma = self.B.shape[1]
        if self.B.shape[0] != m or self.A.shape != (gamma, n):
            raise DimensionError(
                f"B{self.B.shape} @ A{self.A.shape} does not match W0{self.W0.shape}"
            )
        if self.W0.flags.writeable:
            w0 = self.W0.copy()
            w0.setflags(write=False)
            object.__setattr__(self, "W0", w0)
        object.__setattr__(self, "gamma", int(gamma))

    @property
    def shape(self) -> tuple[int, int]:
        return self.W0.shape

    def with_factors(self, B: np.ndarray, A: np.ndarray) -> "LoraState":
        # W0 is already read-only, so it is shared rather than copied.
        return LoraState(self.W0, B, A)

    def effective_weight(self, S: SketchMatrix | None = None) -> np.ndarray:
        if S is None:
            return self.W0 + self.B @ self.A
        return self.W0 + apply_sketch(self.B, S, self.A)


def init_lora_state(n_classes: int, n_features: int, gamma: int,
                    rng: np.random.Generator) -> LoraState:
    """Random frozen base, ``B = 0`` and small random ``A`` (so the initial delta is zero)."""
    W0 = W0_SCALE * rng.standard_normal((n_classes, n_features))
    B = np.zeros((n_classes, gamma))
    A = A_INIT_STD * rng.standard_normal((gamma, n_features))
    return LoraState(W0, B, A)


def _check_batch(state: LoraState, S: SketchMatrix, batch: Batch) -> None:
    if batch.size == 0:
        raise EmptyBatchError("batch is empty")
    if batch.inputs.shape[1] != state.W0.shape[1]:
        raise DimensionError(
            f"inputs have {batch.inputs.shape[1]} features, W0 expects {state.W0.shape[1]}"
        )
    if S.gamma != state.gamma:
        raise DimensionError(f"sketch rank {S.gamma} != LoRA rank {state.gamma}")


def softmax_cross_entropy(W: np.ndarray, inputs: np.ndarray,
                          targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of ``softmax(inputs @ W.T)`` and its gradient w.r.t. ``W``."""
    logits = inputs @ W.T
    logits -= logits.max(axis=1, keepdims=True)
    exp = np.exp(logits)
    z = exp.sum(axis=1, keepdims=True)
    rows = np.arange(targets.shape[0])
    loss = float(np.mean(np.log(z[:, 0]) - logits[rows, targets]))
    probs = exp / z
    probs[rows, targets] -= 1.0
    grad = probs.T @ inputs / targets.shape[0]
    return loss, grad


def forward_loss(state: LoraState, S: SketchMatrix, batch: Batch) -> float:
    _check_batch(state, S, batch)
    W = state.effective_weight(S)
    loss, _ = softmax_cross_entropy(W, batch.inputs, batch.targets)
    return loss


def loss_and_grads(state: LoraState, S: SketchMatrix,
                   batch: Batch) -> tuple[float, np.ndarray, np.ndarray]:
    """Loss plus gradients of B and A under sketch ``S``.

    With ``G`` the gradient w.r.t. the effective weight ``W0 + B S A``:
    ``grad_B = G A^T S^T`` and ``grad_A = S^T B^T G``. Columns of ``grad_B`` and
    rows of ``grad_A`` outside the active set are exactly zero.
    """
    _check_batch(state, S, batch)
    return sketched_loss_and_grads(state.W0, state.B, state.A, S, batch.inputs, batch.targets)


def sketched_loss_and_grads(W0: np.ndarray, B: np.ndarray, A: np.ndarray, S: SketchMatrix,
                            inputs: np.ndarray, targets: np.ndarray):
    """Unchecked array version of :func:`loss_and_grads` for inner loops."""
    W = W0 + apply_sketch(B, S, A)
    loss, G = softmax_cross_entropy(W, inputs, targets)
    idx = S.indices
    grad_B = np.zeros_like(B)
    grad_A = np.zeros_like(A)
    grad_B[:, idx] = S.factor * (G @ A[idx, :].T)
    grad_A[idx, :] = S.factor * (B[:, idx].T @ G)
    return loss, grad_B, grad_A


def lora_grads(state: LoraState, S: SketchMatrix,
               batch: Batch) -> tuple[np.ndarray, np.ndarray]:
    _, grad_B, grad_A = loss_and_grads(state, S, batch)
    return grad_B, grad_A


def evaluate(state: LoraState, inputs: np.ndarray, targets: np.ndarray) -> tuple[float, float]:
    """Unsketched (full LoRA) loss and accuracy on a labelled set."""
    logits = inputs @ state.effective_weight().T
    acc = float(np.mean(np.argmax(logits, axis=1) == targets))
    logits -= logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(logits).sum(axis=1))
    loss = float(np.mean(logz - logits[np.arange(targets.shape[0]), targets]))
    return loss, acc
