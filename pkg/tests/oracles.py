"""Brute-force oracles for the planner: dense q grids and exhaustive k search."""

import itertools
import math

import numpy as np

from fedsketch.errors import PlanInfeasibleError
from fedsketch.planner import (
    ConvergenceConstants,
    feasibility_bounds,
    p2_objective,
    solve_q_given_k,
    time_coefficients,
)
from fedsketch.protocol import Plan
from fedsketch.timing import ClientProfile, profile_arrays


def random_instance(seed, N=3, gamma=4, random_k=True):
    """Small planner instance with log-uniform times and moderate constants."""
    rng = np.random.default_rng(seed)
    a = rng.dirichlet(np.full(N, 2.0))
    profiles = [
        ClientProfile(float(a[i]), float(np.exp(rng.uniform(np.log(0.1), np.log(10.0)))),
                      float(np.exp(rng.uniform(0.0, np.log(100.0)))))
        for i in range(N)
    ]
    C = float(np.exp(rng.uniform(np.log(0.01), np.log(0.2))))
    D = float(np.exp(rng.uniform(np.log(0.001), np.log(0.05))))
    constants = ConvergenceConstants(float(rng.uniform(1, 5)), 1.0, C, D)
    k = rng.integers(1, gamma + 1, size=N) if random_k else np.full(N, gamma)
    return profiles, constants, k, gamma


def grid_objective(profiles, constants, k, gamma, f_tot, resolution=0.005):
    """Best planner objective over the grid ``{floor_n + j * resolution} ∩ (0, 1]`` per coordinate."""
    a, _, _ = profile_arrays(profiles)
    k = np.asarray(k)
    floor = feasibility_bounds(a, k, constants, gamma, check=False).floor
    axes = [np.arange(fl, 1 + 1e-12, resolution) for fl in floor]
    Q = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, len(a))
    c = time_coefficients(profiles, k, f_tot, gamma)
    w = a * a / Q
    ratio = gamma**2 / k.astype(float) ** 2
    den = constants.B - constants.C * w.sum(1) - constants.D * (w * ratio).sum(1)
    with np.errstate(divide="ignore"):
        val = np.where(den > 0, constants.A / den * (Q @ c), np.inf)
    return float(val.min())


def exhaustive_k(profiles, constants, gamma, f_tot):
    """Best planner objective over every k vector, re-solving q for each."""
    best = math.inf
    for k in itertools.product(range(1, gamma + 1), repeat=len(profiles)):
        k = np.array(k)
        try:
            q = solve_q_given_k(k, constants, profiles, f_tot, gamma)
        except PlanInfeasibleError:
            continue
        best = min(best, p2_objective(Plan(q, k, gamma), constants, profiles, f_tot))
    return best


def exhaustive_plan(profiles, constants, gamma, f_tot):
    """``(objective, k, q)`` of the best k vector, re-solving q for each."""
    best = (math.inf, None, None)
    for k in itertools.product(range(1, gamma + 1), repeat=len(profiles)):
        k = np.array(k)
        try:
            q = solve_q_given_k(k, constants, profiles, f_tot, gamma)
        except PlanInfeasibleError:
            continue
        v = p2_objective(Plan(q, k, gamma), constants, profiles, f_tot)
        if v < best[0]:
            best = (v, k, q)
    return best
