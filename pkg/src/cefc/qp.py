"""Small dense convex QP via a primal active-set method.

Solves  min 1/2 x'Hx + c'x  s.t.  Gx <= h  for positive-definite H, starting
from a feasible point.  Problem sizes here are tiny (a handful of decision
variables, a few hundred inequality rows), so plain dense linear algebra is
adequate.
"""

from __future__ import annotations

import numpy as np


class QPError(Exception):
    pass


def solve_qp(H, c, G, h, x0, tol: float = 1e-10, max_iter: int = 200):
    """Primal active-set QP from a feasible start.

    Returns (x, active) where `active` is the final working set of row
    indices of G.  Raises QPError if x0 is infeasible or no progress is made.
    """
    H = np.asarray(H, dtype=float)
    c = np.asarray(c, dtype=float)
    G = np.atleast_2d(np.asarray(G, dtype=float))
    h = np.asarray(h, dtype=float)
    x = np.asarray(x0, dtype=float).copy()
    n = len(x)

    slack = G @ x - h
    if np.any(slack > 1e-8):
        raise QPError("starting point is infeasible")
    work = [i for i in np.flatnonzero(slack > -1e-9)]
    work = _independent_subset(G, work, n)

    for _ in range(max_iter):
        Gw = G[work] if work else np.zeros((0, n))
        kkt = np.block(
            [[H, Gw.T], [Gw, np.zeros((len(work), len(work)))]]
        )
        grad = H @ x + c
        rhs = np.concatenate([-grad, np.zeros(len(work))])
        sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
        d = sol[:n]
        mu = sol[n:]

        # the KKT solve carries rounding noise proportional to the gradient
        # size, so the stationarity test must scale with it
        if np.linalg.norm(d) < tol * max(1.0, np.linalg.norm(grad)):
            if len(mu) == 0 or np.min(mu) >= -tol:
                return x, list(work)
            # drop the lowest-index violating row (Bland's rule, avoids cycling)
            work.pop(int(np.flatnonzero(mu < -tol)[0]))
            continue

        # step to the nearest blocking constraint
        alpha = 1.0
        blocking = None
        for i in range(len(h)):
            if i in work:
                continue
            gi_d = G[i] @ d
            if gi_d > tol:
                a = (h[i] - G[i] @ x) / gi_d
                if a < alpha - 1e-14:
                    alpha = max(a, 0.0)
                    blocking = i
        x = x + alpha * d
        if blocking is not None:
            work.append(blocking)
            work = _independent_subset(G, work, n)
    raise QPError("active-set iteration limit exceeded")


def _independent_subset(G, idx, n):
    """Drop rows until the working-set rows are linearly independent."""
    keep = []
    for i in idx:
        trial = keep + [i]
        if len(trial) > n:
            break
        if np.linalg.matrix_rank(G[trial]) == len(trial):
            keep.append(i)
    return keep
