"""Straight-line reference implementation of the federated round, used as a test oracle.

Written independently of ``fedsketch.protocol``: dense sketch matrices, explicit
loops, and scipy's ``brentq`` for the round time. It shares only the seeding
contract ``default_rng([seed, stream, round, client])``.

Run as a script to regenerate ``golden/protocol_n4.json``.
"""

import json
import sys
from pathlib import Path

import numpy as np
from scipy.optimize import brentq

SKETCH, PARTICIPATION, BATCH = 1, 2, 3


def dense_sketch(seed, r, n, gamma, k):
    if k == gamma:
        return np.eye(gamma)
    idx = np.random.default_rng([seed, SKETCH, r, n]).choice(gamma, size=k, replace=False)
    S = np.zeros((gamma, gamma))
    S[idx, idx] = gamma / k
    return S


def ce_grad(W, X, y):
    logits = X @ W.T
    logits = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=1, keepdims=True)
    loss = -np.mean(np.log(p[np.arange(len(y)), y]))
    p[np.arange(len(y)), y] -= 1
    return loss, p.T @ X / len(y)


def round_time(taus, ts, f_tot):
    tmax = max(taus)

    def g(T):
        return sum(t / (T - tau) for tau, t in zip(taus, ts)) - f_tot

    return brentq(g, tmax + 1e-15, tmax + sum(ts) / f_tot + 1.0, xtol=1e-14, rtol=1e-15)


def run(W0, B, A, clients, a, q, k, tau_full, t_full, f_tot, H, lr, batch_size, seed, rounds,
        test_x, test_y):
    N, gamma = len(clients), B.shape[1]
    out = []
    clock = 0.0
    for r in range(1, rounds + 1):
        sketches = [dense_sketch(seed, r, n, gamma, int(k[n])) for n in range(N)]
        part = np.random.default_rng([seed, PARTICIPATION, r]).random(N) < q
        newB, newA = B.copy(), A.copy()
        members = [n for n in range(N) if part[n]]
        for n in members:
            X, y = clients[n]
            brng = np.random.default_rng([seed, BATCH, r, n])
            Bn, An = B.copy(), A.copy()
            S = sketches[n]
            for _ in range(H):
                idx = brng.integers(0, len(y), size=batch_size)
                _, G = ce_grad(W0 + Bn @ S @ An, X[idx], y[idx])
                gB = G @ An.T @ S.T
                gA = S.T @ Bn.T @ G
                Bn = Bn - lr * gB
                An = An - lr * gA
            newB -= a[n] / q[n] * (B - Bn)
            newA -= a[n] / q[n] * (A - An)
        B, A = newB, newA
        if members:
            f = (np.asarray(k, float) / gamma) ** 2
            T = round_time([tau_full[n] * f[n] for n in members], [t_full[n] * f[n] for n in members], f_tot)
        else:
            T = 0.0
        clock += T
        loss, _ = ce_grad(W0 + B @ A, test_x, test_y)
        out.append({"round": r, "participants": members, "round_time": T,
                    "cumulative_time": clock, "loss": float(loss)})
    return out


def golden_problem():
    """The fixed N=4 toy used by the golden-file test."""
    rng = np.random.default_rng(99)
    m, n, gamma, N = 3, 5, 4, 4
    W0 = 0.1 * rng.standard_normal((m, n))
    B = np.zeros((m, gamma))
    A = 0.3 * rng.standard_normal((gamma, n))
    sizes = [7, 12, 5, 9]
    clients = [(rng.standard_normal((s, n)), rng.integers(0, m, size=s)) for s in sizes]
    a = np.array(sizes, dtype=float) / sum(sizes)
    return dict(
        W0=W0, B=B, A=A, clients=clients, a=a,
        q=np.array([0.9, 0.5, 1.0, 0.7]), k=np.array([4, 2, 3, 1]),
        tau_full=np.array([1.0, 2.5, 0.4, 3.0]), t_full=np.array([10.0, 4.0, 20.0, 8.0]),
        f_tot=10.0, H=3, lr=0.3, batch_size=4, seed=5, rounds=10,
        test_x=rng.standard_normal((20, n)), test_y=rng.integers(0, m, size=20),
    )


if __name__ == "__main__":
    path = Path(__file__).parent / "golden" / "protocol_n4.json"
    path.write_text(json.dumps(run(**golden_problem()), indent=1) + "\n")
    print(path, file=sys.stderr)
