"""Choose sampling probabilities q and sketching ratios k to minimize wall-clock time.

The objective multiplies a rounds estimate by a per-round time bound::

    rounds(q, k) = A / (B - C * Y - D * Z)
    Y = sum_n a_n^2 / q_n,   Z = sum_n (a_n^2 / q_n) * gamma^2 / k_n^2
    time(q, k)   = sum_n (k_n^2 / gamma^2) * q_n * (t_n / f_tot + tau_n)

A, B, C, D are fitted from four probe runs through the null space of a 4x4
system. q is found for fixed k by a line search over the time level
``M = time(q, k)``; for each level the rounds factor is replaced by a
separable convex upper bound (harmonic mean <= arithmetic mean) and minimized
in closed form up to one scalar multiplier. k is then improved by greedy unit
decrements, and the two steps alternate.

All constants are only identifiable up to a common positive factor. Every
quantity here is invariant to that factor, so fitted constants are
normalized to ``B = 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import optimize

from .errors import (
    DegenerateProbesError,
    InconsistentObservationsError,
    InvalidSketchRatioError,
    PlanInfeasibleError,
)
from .protocol import Plan
from .timing import ClientProfile, profile_arrays

# Strict lower bound q_n > lower_n is enforced as q_n >= lower_n * (1 + margin).
FEASIBILITY_MARGIN = 1e-6
ROUNDS_CAP = 1e12
DEFAULT_GRID_POINTS = 200
_RANK_TOL = 1e-9


@dataclass(frozen=True)
class ConvergenceConstants:
    A: float
    B: float
    C: float
    D: float

    def __post_init__(self):
        for name in "ABCD":
            v = float(getattr(self, name))
            object.__setattr__(self, name, v)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"constant {name} must be finite and positive, got {v}")

    def scaled(self, factor: float) -> "ConvergenceConstants":
        return ConvergenceConstants(self.A * factor, self.B * factor,
                                    self.C * factor, self.D * factor)

    def normalized(self) -> "ConvergenceConstants":
        return self.scaled(1.0 / self.B)

    def to_dict(self) -> dict:
        return {"A": self.A, "B": self.B, "C": self.C, "D": self.D}

    @classmethod
    def from_dict(cls, d: dict) -> "ConvergenceConstants":
        return cls(float(d["A"]), float(d["B"]), float(d["C"]), float(d["D"]))


def sampling_sums(a, q, k, gamma: int) -> tuple[float, float]:
    """``(Y, Z)``: the sampling-variance and sketch-weighted variance sums."""
    a = np.asarray(a, dtype=float)
    w = a * a / np.asarray(q, dtype=float)
    ratio = float(gamma) ** 2 / np.asarray(k, dtype=float) ** 2
    return float(w.sum()), float(np.dot(w, ratio))


@dataclass(frozen=True)
class ProbeObservation:
    R: float
    Y: float
    Z: float

    def __post_init__(self):
        if not self.R > 0:
            raise ValueError(f"probe rounds must be positive, got {self.R}")
        if not (self.Y > 0 and self.Z > 0):
            raise ValueError("Y and Z must be positive")

    @classmethod
    def from_plan(cls, R: float, a, plan: Plan) -> "ProbeObservation":
        Y, Z = sampling_sums(a, plan.q, plan.k, plan.gamma)
        return cls(float(R), Y, Z)

    def to_dict(self) -> dict:
        return {"R": self.R, "Y": self.Y, "Z": self.Z}


def estimate_constants(observations: Sequence[ProbeObservation]) -> ConvergenceConstants:
    """Fit ``(A, B, C, D)`` from probe runs via the smallest right singular vector.

    Each observation gives one row ``(1/R, -1, Y, Z)`` of ``M`` with
    ``M @ [A, B, C, D] = 0``.
    """
    if len(observations) < 4:
        raise DegenerateProbesError(f"need at least 4 probe observations, got {len(observations)}")
    M = np.array([[1.0 / o.R, -1.0, o.Y, o.Z] for o in observations])
    _, s, vt = np.linalg.svd(M)
    if s[0] == 0 or s[2] <= _RANK_TOL * s[0]:
        raise DegenerateProbesError(
            f"probe matrix has rank < 3 (singular values {s.tolist()}); use distinct probes"
        )
    x = vt[-1]
    if x[0] < 0:
        x = -x
    if np.any(x <= 0):
        raise InconsistentObservationsError(
            f"fitted constants are not all positive: {x.tolist()}"
        )
    return ConvergenceConstants(*(x / x[1]))


@dataclass(frozen=True)
class FeasibilityBounds:
    lower: np.ndarray
    K2: float

    @property
    def floor(self) -> np.ndarray:
        """Smallest admissible q per client (the strict bound plus a margin)."""
        return self.lower * (1.0 + FEASIBILITY_MARGIN)

    @property
    def infeasible_clients(self) -> tuple[int, ...]:
        return tuple(int(i) for i in np.flatnonzero(self.floor > 1.0))

    def admits(self, q) -> bool:
        q = np.asarray(q, dtype=float)
        return bool(np.all(q >= self.floor) and np.all(q <= 1.0))


def feasibility_bounds(a, k, constants: ConvergenceConstants, gamma: int,
                       check: bool = True) -> FeasibilityBounds:
    """Per-client lower bounds ``a_n^2 N (C + D K^2) / B`` on q_n.

    With ``check`` set, raise :class:`PlanInfeasibleError` when some client
    would need ``q_n >= 1``; no sampling vector reaches the target then.
    """
    a = np.asarray(a, dtype=float)
    k = np.asarray(k)
    if np.any(k < 1) or np.any(k > gamma):
        raise InvalidSketchRatioError(f"sketching ratio outside [1, {gamma}]")
    K2 = float(gamma) ** 2 / float(k.min()) ** 2
    lower = a * a * a.size * (constants.C + constants.D * K2) / constants.B
    bounds = FeasibilityBounds(lower, K2)
    bad = bounds.infeasible_clients
    if check and bad:
        raise PlanInfeasibleError(
            f"clients {list(bad)} need q_n > {bounds.lower[list(bad)].tolist()}: "
            "the convergence target is unreachable with these sketching ratios",
            clients=bad,
        )
    return bounds


def time_coefficients(profiles: Sequence[ClientProfile], k, f_tot: float,
                      gamma: int) -> np.ndarray:
    """``c_n = (k_n^2/gamma^2)(t_n/f_tot + tau_n)``; the round-time bound is ``c @ q``."""
    _, tau, t = profile_arrays(profiles)
    return np.asarray(k, dtype=float) ** 2 / float(gamma) ** 2 * (t / f_tot + tau)


def rounds_factor(q, k, a, constants: ConvergenceConstants, gamma: int) -> float:
    """``A / (B - C Y - D Z)``, or ``inf`` when the denominator is not positive."""
    Y, Z = sampling_sums(a, q, k, gamma)
    denom = constants.B - constants.C * Y - constants.D * Z
    if denom <= 0:
        return math.inf
    return constants.A / denom


def rounds_surrogate(q, k, a, constants: ConvergenceConstants, gamma: int,
                     weights=None) -> float:
    """Separable upper bound on :func:`rounds_factor`, convex on its domain.

    Splitting ``B = sum_n w_n B`` and applying Jensen to ``1/x`` gives
    ``sum_n A w_n q_n / (B q_n - e_n / w_n)`` with ``e_n = a_n^2 (C + D gamma^2/k_n^2)``.
    Equal weights ``w_n = 1/N`` are the harmonic/arithmetic-mean bound; the
    bound is tight when ``w_n`` is proportional to ``e_n / q_n``.
    """
    q = np.asarray(q, dtype=float)
    e = _variance_weights(a, k, constants, gamma)
    w = np.full(q.size, 1.0 / q.size) if weights is None else np.asarray(weights, dtype=float)
    denom = constants.B * q - e / w
    if np.any(denom <= 0):
        return math.inf
    return float(np.sum(constants.A * w * q / denom))


def _variance_weights(a, k, constants: ConvergenceConstants, gamma: int) -> np.ndarray:
    """``e_n = a_n^2 (C + D gamma^2 / k_n^2)``: client n's share of ``C Y + D Z`` at q_n = 1."""
    a = np.asarray(a, dtype=float)
    ratio = float(gamma) ** 2 / np.asarray(k, dtype=float) ** 2
    return a * a * (constants.C + constants.D * ratio)


def tight_weights(q, e) -> np.ndarray:
    """Surrogate weights that make :func:`rounds_surrogate` exact at ``q``."""
    r = np.asarray(e, dtype=float) / np.asarray(q, dtype=float)
    return r / r.sum(axis=-1, keepdims=True)


def p2_objective(plan: Plan, constants: ConvergenceConstants,
                 profiles: Sequence[ClientProfile], f_tot: float) -> float:
    """Estimated wall-clock to target: rounds factor times round-time bound.

    Returns ``inf`` when the rounds denominator is not positive.
    """
    a, _, _ = profile_arrays(profiles)
    c = time_coefficients(profiles, plan.k, f_tot, plan.gamma)
    return _objective(plan.q, plan.k, a, c, constants, plan.gamma)


def _objective(q, k, a, c, constants, gamma) -> float:
    rf = rounds_factor(q, k, a, constants, gamma)
    if math.isinf(rf):
        return math.inf
    return rf * float(np.dot(c, q))


def rounds_estimate(plan: Plan, constants: ConvergenceConstants, a) -> float:
    rf = rounds_factor(plan.q, plan.k, a, constants, plan.gamma)
    if rf > ROUNDS_CAP:
        raise PlanInfeasibleError("plan never reaches the target (rounds estimate diverges)")
    return rf


@dataclass(frozen=True)
class LevelSolution:
    """Minimizer of the surrogate problem at one time level ``M``."""

    M: float
    q: np.ndarray
    multiplier: float
    clipped: np.ndarray


def solve_level(M: float, c, e, floor, constants: ConvergenceConstants,
                weights=None) -> LevelSolution | None:
    """Minimize ``sum_n A M w_n q_n / (B q_n - e_n/w_n)`` s.t. ``c @ q = M``, ``floor <= q <= 1``.

    Stationarity gives ``q_n = e_n/(w_n B) + sqrt(A M e_n / (lam c_n)) / B``
    before clipping. In terms of ``u = lam**-0.5``,
    along which ``c @ q(u)`` is piecewise linear and nondecreasing, so the
    multiplier is found exactly from the kinks. Equal weights (the default)
    reproduce the harmonic-mean surrogate. Returns ``None`` when the level is
    unreachable inside the box.
    """
    c = np.asarray(c, dtype=float)
    w = np.full((1, c.size), 1.0 / c.size) if weights is None else np.atleast_2d(weights)
    return _solve_levels(np.array([M], dtype=float), c, e, floor, constants, w)[0]


def _solve_levels(levels, c, e, floor, constants, weights) -> list[LevelSolution | None]:
    """Vectorized :func:`solve_level` over many levels; ``weights`` is (levels, N)."""
    levels = np.asarray(levels, dtype=float)
    ok, q, lam, clipped = _level_arrays(levels, c, e, floor, constants, weights)
    out: list[LevelSolution | None] = [None] * levels.size
    for i in np.flatnonzero(ok):
        out[i] = LevelSolution(float(levels[i]), q[i], float(lam[i]), clipped[i])
    return out


def _level_arrays(levels, c, e, floor, constants, weights):
    """Array core of :func:`_solve_levels`: ``(ok, q, multiplier, clipped)`` per level.

    Rows where ``ok`` is false hold NaN.
    """
    c = np.asarray(c, dtype=float)
    e = np.asarray(e, dtype=float)
    B = constants.B
    n_levels, N = levels.size, c.size
    q_out = np.full((n_levels, N), np.nan)
    lam_out = np.full(n_levels, np.nan)
    clip_out = np.zeros((n_levels, N), dtype=bool)
    pole = e / (weights * B)
    lo = np.maximum(floor, pole * (1 + 1e-12))
    lo_level = lo @ c
    hi_level = float(c.sum())
    ok = (pole < 1).all(axis=1) & (levels >= lo_level * (1 - 1e-12)) & (levels <= hi_level * (1 + 1e-12))
    if not ok.any():
        return ok, q_out, lam_out, clip_out
    Ms, pole, lo = levels[ok], pole[ok], lo[ok]
    slope = np.sqrt(constants.A * Ms[:, None] * e / c) / B

    # c @ q(u) is piecewise linear and nondecreasing in u, with kinks where a
    # coordinate hits its lower bound or 1; locate the segment containing M.
    kinks = np.concatenate([(lo - pole) / slope, (1.0 - pole) / slope], axis=1)
    kinks = np.sort(np.concatenate([np.zeros((Ms.size, 1)), np.maximum(kinks, 0.0)], axis=1), axis=1)
    q_at = np.clip(pole[:, None, :] + slope[:, None, :] * kinks[:, :, None], lo[:, None, :], 1.0)
    h = q_at @ c
    j = np.clip((h <= Ms[:, None]).sum(axis=1) - 1, 0, kinks.shape[1] - 2)
    rows = np.arange(Ms.size)
    u0, u1 = kinks[rows, j], kinks[rows, j + 1]
    h0, h1 = h[rows, j], h[rows, j + 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(h1 > h0, u0 + (Ms - h0) * (u1 - u0) / (h1 - h0), u0)
        lam = np.where(u == 0, np.inf, 1.0 / (u * u))
    u = np.clip(u, u0, u1)
    raw = pole + slope * u[:, None]
    q_out[ok] = np.clip(raw, lo, 1.0)
    lam_out[ok] = lam
    clip_out[ok] = (raw <= lo) | (raw >= 1.0)
    return ok, q_out, lam_out, clip_out


def level_grid(c: np.ndarray, floor: np.ndarray, eps: float | None = None) -> np.ndarray:
    """Time levels ``M`` scanned by the line search, ascending.

    The range is every level reachable inside the feasible box,
    ``[c @ floor, c @ 1]``; the default step splits it into 200 intervals.
    """
    lo = float(c @ floor)
    hi = float(c.sum())
    if hi <= lo:
        return np.array([lo])
    if eps is None:
        eps = (hi - lo) / DEFAULT_GRID_POINTS
    if eps <= 0:
        raise ValueError("step must be positive")
    n = int(math.floor((hi - lo) / eps + 1e-9))
    grid = lo + eps * np.arange(n + 1)
    if hi - grid[-1] > 1e-12 * hi:
        grid = np.append(grid, hi)
    return grid


def _refined_levels(levels, c, e, floor, constants, refine: int) -> list[LevelSolution]:
    N = c.size
    levels = np.asarray(levels, dtype=float)
    ok, Q, lam, clipped = _level_arrays(levels, c, e, floor, constants,
                                        np.full((levels.size, N), 1.0 / N))
    M, Q, lam, clipped = levels[ok], Q[ok], lam[ok], clipped[ok]
    for _ in range(refine if M.size else 0):
        got, Qn, lamn, clipn = _level_arrays(M, c, e, floor, constants, tight_weights(Q, e))
        # Keep a move only when it lowers the variance sum at that level.
        better = got & (np.where(got, (e / np.where(got[:, None], Qn, 1.0)).sum(axis=1), np.inf)
                        <= (e / Q).sum(axis=1))
        moved = float(np.max(np.abs(Qn[better] - Q[better]), initial=0.0))
        Q[better], lam[better], clipped[better] = Qn[better], lamn[better], clipn[better]
        if moved < 1e-12:
            break
    return [LevelSolution(float(M[i]), Q[i], float(lam[i]), clipped[i]) for i in range(M.size)]


def solve_levels(k, constants: ConvergenceConstants, profiles: Sequence[ClientProfile],
                 f_tot: float, gamma: int, eps: float | None = None,
                 refine: int = 50) -> list[LevelSolution]:
    """Surrogate minimizers for every reachable level of the line search.

    Each level is first solved with equal weights, then up to ``refine``
    reweighting passes tighten the surrogate at the current point. A pass can
    only lower the true rounds factor at that level, since the new surrogate
    upper-bounds it everywhere and matches it at the previous iterate.
    """
    a, _, _ = profile_arrays(profiles)
    k = np.asarray(k)
    floor = feasibility_bounds(a, k, constants, gamma).floor
    c = time_coefficients(profiles, k, f_tot, gamma)
    e = _variance_weights(a, k, constants, gamma)
    return _refined_levels(level_grid(c, floor, eps), c, e, floor, constants, refine)


def solve_q_given_k(k, constants: ConvergenceConstants, profiles: Sequence[ClientProfile],
                    f_tot: float, gamma: int, eps: float | None = None,
                    refine: int = 50, polish: bool = True) -> np.ndarray:
    """Sampling probabilities for fixed sketching ratios ``k``.

    Scans time levels with step ``eps`` and keeps the level solution with the
    lowest true objective; ties go to the smaller level. With ``polish`` the
    level is then tuned by a bounded scalar search between the neighbours of
    the best grid point. ``refine=0, polish=False`` is the plain equal-weight
    line search.
    """
    a, _, _ = profile_arrays(profiles)
    k = np.asarray(k)
    floor = feasibility_bounds(a, k, constants, gamma).floor
    c = time_coefficients(profiles, k, f_tot, gamma)
    e = _variance_weights(a, k, constants, gamma)
    sols = _refined_levels(level_grid(c, floor, eps), c, e, floor, constants, refine)
    if not sols:
        raise PlanInfeasibleError("no time level admits a feasible sampling vector")
    values = [_objective(s.q, k, a, c, constants, gamma) for s in sols]
    i = int(np.argmin(values))
    best_q, best_val = sols[i].q, values[i]
    if polish and len(sols) > 2:
        lo_M = sols[max(i - 1, 0)].M
        hi_M = sols[min(i + 1, len(sols) - 1)].M

        def at(M):
            got = _refined_levels([M], c, e, floor, constants, refine)
            return (got[0].q, _objective(got[0].q, k, a, c, constants, gamma)) if got else (None, math.inf)

        res = optimize.minimize_scalar(lambda M: at(M)[1], bounds=(lo_M, hi_M),
                                       method="bounded", options={"xatol": 1e-10 * hi_M})
        q, val = at(res.x)
        if q is not None and val < best_val:
            best_q, best_val = q, val
    return best_q


def greedy_k(q, constants: ConvergenceConstants, profiles: Sequence[ClientProfile],
             f_tot: float, gamma: int, k_init=None) -> np.ndarray:
    """Coordinate-wise unit decrements of k that keep q feasible and lower the objective.

    Starts from all-``gamma`` unless ``k_init`` is given; sweeps clients in
    index order until a full sweep changes nothing.
    """
    a, _, _ = profile_arrays(profiles)
    q = np.asarray(q, dtype=float)
    N = q.size
    k = np.full(N, gamma, dtype=np.int64) if k_init is None else np.array(k_init, dtype=np.int64)
    _, tau, t = profile_arrays(profiles)
    base = t / f_tot + tau
    g2 = float(gamma) ** 2

    def value(kv):
        return _objective(q, kv, a, kv.astype(float) ** 2 / g2 * base, constants, gamma)

    best = value(k)
    changed = True
    while changed:
        changed = False
        for n in range(N):
            if k[n] <= 1:
                continue
            k[n] -= 1
            if feasibility_bounds(a, k, constants, gamma, check=False).admits(q):
                v = value(k)
                if v < best:
                    best = v
                    changed = True
                    continue
            k[n] += 1
    return k


def _best_scale(q, k, a, base, constants: ConvergenceConstants, gamma: int):
    """Best multiple ``s * q`` for ranks ``k``: returns ``(value, s)``, or ``(inf, nan)``.

    With ``E = sum_n e_n / q_n`` the objective along the ray is
    ``A s (c @ q) / (B - E / s)``, minimized at ``s = 2E/B``; ``s`` is then
    clipped to the feasible box.
    """
    floor = feasibility_bounds(a, k, constants, gamma, check=False).floor
    lo, hi = float(np.max(floor / q)), 1.0 / float(np.max(q))
    if lo > hi:
        return math.inf, math.nan
    E = float(np.sum(_variance_weights(a, k, constants, gamma) / q))
    s = min(max(2.0 * E / constants.B, lo), hi)
    c = k.astype(float) ** 2 / float(gamma) ** 2 * base
    return _objective(s * q, k, a, c, constants, gamma), s


def greedy_plan(q, constants: ConvergenceConstants, profiles: Sequence[ClientProfile],
                f_tot: float, gamma: int, k_init=None) -> Plan:
    """Greedy unit decrements of k, each scored at the best rescaling of the current q.

    A smaller k_n raises every client's feasibility floor once it sets the
    largest ``gamma^2/k^2``, so a q tuned for the current ranks usually
    admits no decrement at all. Scaling q along its own direction lets a move
    trade more participation for cheaper rounds; accepted moves keep the
    scaled q. When a sweep stalls, the clients tied at the smallest k are
    also tried as one block: the floor only depends on that smallest k, so
    the first of them to move pays the whole feasibility cost alone.
    """
    a, tau, t = profile_arrays(profiles)
    q = np.asarray(q, dtype=float).copy()
    N = q.size
    k = np.full(N, gamma, dtype=np.int64) if k_init is None else np.array(k_init, dtype=np.int64)
    base = t / f_tot + tau
    best = _objective(q, k, a, k.astype(float) ** 2 / float(gamma) ** 2 * base, constants, gamma)
    changed = True
    while changed:
        changed = False
        for n in range(N):
            if k[n] <= 1:
                continue
            k[n] -= 1
            v, s = _best_scale(q, k, a, base, constants, gamma)
            if v < best:
                best, q = v, np.minimum(s * q, 1.0)
                changed = True
                continue
            k[n] += 1
        if not changed and k.min() > 1:
            trial = np.where(k == k.min(), k - 1, k)
            v, s = _best_scale(q, trial, a, base, constants, gamma)
            if v < best:
                best, q, k = v, np.minimum(s * q, 1.0), trial
                changed = True
    return Plan(q, k, gamma)


@dataclass
class AlternationResult:
    plan: Plan
    objective: float
    trace: list[float] = field(default_factory=list)
    iterations: int = 0


def alternate(profiles: Sequence[ClientProfile], constants: ConvergenceConstants, f_tot: float,
              gamma: int, eps: float | None = None, max_iters: int = 50,
              initial: Plan | None = None) -> AlternationResult:
    """Alternate the q line search and the greedy k search until neither moves.

    The k step is :func:`greedy_plan`, which may also rescale q.

    A step is only taken when it does not raise the objective, so ``trace``
    (objective after each outer iteration) is nonincreasing.
    """
    a, _, _ = profile_arrays(profiles)
    N = a.size

    def value(q, k):
        return _objective(q, k, a, time_coefficients(profiles, k, f_tot, gamma), constants, gamma)

    if initial is None:
        k = np.full(N, gamma, dtype=np.int64)
        q = solve_q_given_k(k, constants, profiles, f_tot, gamma, eps)
    else:
        q, k = np.array(initial.q), np.array(initial.k, dtype=np.int64)
    obj = value(q, k)
    trace = [obj]
    it = 0
    for it in range(1, max_iters + 1):
        q_new = solve_q_given_k(k, constants, profiles, f_tot, gamma, eps)
        if value(q_new, k) > obj:
            q_new = q
        step = greedy_plan(q_new, constants, profiles, f_tot, gamma)
        if value(step.q, step.k) <= value(q_new, k):
            q_new, k_new = step.q, step.k
        else:
            k_new = k
        new_obj = value(q_new, k_new)
        done = np.array_equal(k_new, k) and np.max(np.abs(q_new - q)) < 1e-4
        q, k, obj = q_new, k_new, new_obj
        trace.append(obj)
        if done:
            break
    return AlternationResult(Plan(q, k, gamma), obj, trace, it)
