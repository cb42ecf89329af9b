"""Synthetic non-IID federated data and simulated device profiles."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .timing import ClientProfile

MAX_PARTITION_ATTEMPTS = 100


def gaussian_mixture(n_samples: int, n_features: int, n_classes: int, rng: np.random.Generator,
                     separation: float = 1.0, condition: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Balanced classes with unit noise around random class means.

    Feature ``j`` is then scaled by ``condition ** (-j / (n_features - 1))``, so
    ``condition > 1`` gives an ill-conditioned problem with a slow tail.
    """
    if condition < 1:
        raise ConfigError(f"condition must be >= 1, got {condition}")
    means = separation * rng.standard_normal((n_classes, n_features))
    labels = rng.permutation(np.arange(n_samples) % n_classes)
    inputs = means[labels] + rng.standard_normal((n_samples, n_features))
    if condition > 1 and n_features > 1:
        inputs *= condition ** (-np.arange(n_features) / (n_features - 1))
    return inputs, labels


def dirichlet_partition(labels: np.ndarray, N: int, alpha: float,
                        rng: np.random.Generator) -> tuple[list[np.ndarray], np.ndarray]:
    """Split sample indices over ``N`` clients with per-class Dirichlet(alpha) shares.

    Any draw that leaves a client empty is discarded and redrawn. Returns the
    per-client index arrays and the weights ``a_n = |D_n| / |D|``.
    """
    labels = np.asarray(labels)
    if alpha <= 0:
        raise ConfigError(f"Dirichlet concentration must be positive, got {alpha}")
    if N < 1 or N > labels.size:
        raise ConfigError(f"cannot give each of {N} clients a sample from {labels.size}")
    classes = np.unique(labels)
    by_class = [np.flatnonzero(labels == c) for c in classes]
    for _ in range(MAX_PARTITION_ATTEMPTS):
        parts: list[list[np.ndarray]] = [[] for _ in range(N)]
        for idx in by_class:
            idx = rng.permutation(idx)
            shares = rng.dirichlet(np.full(N, alpha))
            cuts = (np.cumsum(shares)[:-1] * idx.size).astype(int)
            for n, chunk in enumerate(np.split(idx, cuts)):
                parts[n].append(chunk)
        clients = [np.sort(np.concatenate(p)) for p in parts]
        if all(c.size > 0 for c in clients):
            sizes = np.array([c.size for c in clients], dtype=float)
            return clients, sizes / sizes.sum()
    raise ConfigError(
        f"could not give every client data after {MAX_PARTITION_ATTEMPTS} Dirichlet draws"
    )


def log_uniform(low: float, high: float, size: int, rng: np.random.Generator) -> np.ndarray:
    if not 0 < low <= high:
        raise ConfigError(f"log-uniform range needs 0 < low <= high, got ({low}, {high})")
    return np.exp(rng.uniform(np.log(low), np.log(high), size))


def simulate_profiles(weights, tau_range: tuple[float, float], t_range: tuple[float, float],
                      rng: np.random.Generator) -> list[ClientProfile]:
    """Full-rank computation and communication times drawn log-uniformly per client."""
    weights = np.asarray(weights, dtype=float)
    taus = log_uniform(*tau_range, weights.size, rng)
    ts = log_uniform(*t_range, weights.size, rng)
    return [ClientProfile(float(a), float(tau), float(t)) for a, tau, t in zip(weights, taus, ts)]
