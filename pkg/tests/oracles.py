"""Independent reference computations used to pin expected test values.

These deliberately avoid the library's own code paths: vertex
enumeration for LPs, dense grid search on the balanced-current subspace
for the convex solvers, and finite differences for element matrices.
"""

from itertools import combinations

import numpy as np


def lp_vertex_minimum(c, G, h, E=None, f=None, feas_tol=1e-9):
    """Optimal LP objective by enumerating basic feasible points."""
    c = np.asarray(c, dtype=float)
    G = np.asarray(G, dtype=float)
    h = np.asarray(h, dtype=float)
    E = np.zeros((0, c.size)) if E is None else np.asarray(E, dtype=float)
    f = np.zeros(0) if f is None else np.asarray(f, dtype=float)
    n, p = c.size, E.shape[0]
    best = np.inf
    for rows in combinations(range(G.shape[0]), n - p):
        A = np.vstack([E, G[list(rows)]])
        b = np.concatenate([f, h[list(rows)]])
        if abs(np.linalg.det(A)) < 1e-12:
            continue
        v = np.linalg.solve(A, b)
        if np.all(G @ v <= h + feas_tol) and (
            p == 0 or np.max(np.abs(E @ v - f)) <= feas_tol
        ):
            best = min(best, float(c @ v))
    return best


def random_bounded_lp(rng):
    """Feasible bounded LP with integer-ish coefficients (n<=3, m<=10)."""
    n = int(rng.integers(2, 4))
    m_extra = int(rng.integers(1, 5))
    G = np.vstack([np.eye(n), -np.eye(n), rng.integers(-3, 4, size=(m_extra, n))])
    x0 = rng.uniform(-1, 1, n)
    h = G @ x0 + rng.uniform(0.5, 2.0, G.shape[0])
    c = rng.integers(-5, 6, n).astype(float)
    while not c.any():
        c = rng.integers(-5, 6, n).astype(float)
    if rng.random() < 0.4 and n > 2:
        E = np.ones((1, n))
        f = np.array([x0.sum()])
    else:
        E, f = None, None
    return c, G, h, E, f


def balanced_grid_minimum(p, objective, alpha, eps, step_frac=1e-3):
    """Dense grid search over the 2D zero-sum subspace of a 3-channel problem.

    ``objective`` is "l1" for the absolute-deviation form with the
    per-entry dead zone, or "l2" for the norm form with the aggregate
    dead zone.  Step is ``step_frac`` times the dose cap.
    """
    assert p.n_electrodes == 3
    basis = np.linalg.svd(np.ones((1, 3)))[2][1:].T  # (3, 2), orthonormal, sums to 0
    step = step_frac * p.mu
    u = np.arange(-p.mu, p.mu + step / 2, step)
    best = np.inf
    for chunk in np.array_split(u, 16):
        U = np.stack(np.meshgrid(chunk, u, indexing="ij"), axis=-1).reshape(-1, 2)
        Y = U @ basis.T
        feas = (np.abs(Y).sum(axis=1) <= p.mu) & (np.abs(Y).max(axis=1) <= p.gamma)
        Y = Y[feas]
        if not Y.size:
            continue
        fit_resid = Y @ p.L1.T - p.x1
        if objective == "l1":
            fit = np.abs(fit_resid).sum(axis=1)
            nuis = np.maximum(np.abs(Y @ p.L2.T), eps * p.nu).sum(axis=1)
        else:
            fit = np.linalg.norm(fit_resid, axis=1)
            nuis = np.maximum(
                np.linalg.norm(Y @ p.L2.T, axis=1),
                eps * p.nu * np.sqrt(p.n_nuisance),
            )
        obj = fit + nuis + alpha * p.zeta * np.abs(Y).sum(axis=1)
        best = min(best, float(obj.min()))
    return best


def hat_gradient_fd(verts, local, point, h=1e-7):
    """Finite-difference gradient of a P1 hat function on one tetrahedron."""

    def hat(x):
        A = np.vstack([np.ones(4), verts.T])
        b = np.concatenate([[1.0], x])
        return np.linalg.solve(A, b)[local]

    g = np.zeros(3)
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        g[k] = (hat(point + e) - hat(point - e)) / (2 * h)
    return g


def tet_stiffness_fd(verts, sigma=1.0):
    """Single-tet stiffness by finite-difference gradients and exact volume."""
    vol = abs(np.linalg.det(verts[1:] - verts[0])) / 6.0
    centroid = verts.mean(axis=0)
    grads = np.array([hat_gradient_fd(verts, i, centroid) for i in range(4)])
    return sigma * vol * grads @ grads.T
