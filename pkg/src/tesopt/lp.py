"""Primal-dual interior-point solver for linear programs.

Solves
    min  c'v   subject to   G v <= h,   E v = f

with a Mehrotra-style predictor-corrector.  Each Newton step reduces to
a quasi-definite KKT system

    ( G' W G + d I    E' ) (dv)
    ( E              -d I ) (dy)

with W = z/s and a static regularization d, factored sparsely; one step
of iterative refinement removes the regularization error.  Ruiz row and
column equilibration is applied to the constraint matrix up front, and
all stopping tests are evaluated on the original (unscaled) data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

REGULARIZATION = 1e-12
FRACTION_TO_BOUNDARY = 0.99
CERT_TOL = 1e-8          # certificate tolerance on equilibrated data
DIVERGENCE_RATIO = 1e8   # iterate blow-up ratio for the heuristic flags


@dataclass(frozen=True)
class LinearProgram:
    c: np.ndarray        # (n,)
    G: sp.csr_matrix     # (m, n)
    h: np.ndarray        # (m,)
    E: sp.csr_matrix     # (p, n), possibly p = 0
    f: np.ndarray        # (p,)

    def validate(self) -> None:
        n = self.c.shape[0]
        m, ng = self.G.shape
        if m < 1:
            raise ValueError("need at least one inequality row")
        if ng != n or self.h.shape != (m,):
            raise ValueError("inconsistent inequality dimensions")
        p, ne = self.E.shape
        if p and ne != n:
            raise ValueError("inconsistent equality dimensions")
        if self.f.shape != (p,):
            raise ValueError("inconsistent equality rhs")


@dataclass(frozen=True)
class LpSolution:
    v: np.ndarray
    status: str                       # optimal | infeasible | unbounded | max_iter
    iterations: int
    residuals: dict[str, float]       # primal, dual, gap (on original data)
    mu_history: tuple[float, ...] = ()
    z: np.ndarray | None = None       # inequality multipliers (original scale)
    s: np.ndarray | None = None       # slacks (original scale)


def make_program(c, G, h, E=None, f=None) -> LinearProgram:
    """Assemble a LinearProgram from array-likes, densifying nothing."""
    c = np.asarray(c, dtype=float).ravel()
    G = sp.csr_matrix(G, dtype=float)
    h = np.asarray(h, dtype=float).ravel()
    if E is None:
        E = sp.csr_matrix((0, c.size))
        f = np.zeros(0)
    else:
        E = sp.csr_matrix(E, dtype=float)
        f = np.asarray(f, dtype=float).ravel()
    lp = LinearProgram(c=c, G=G, h=h, E=E, f=f)
    lp.validate()
    return lp


def _ruiz_equilibration(G, E, iters: int = 10):
    """Row/column scalings making [G; E] entries O(1)."""
    m, n = G.shape
    p = E.shape[0]
    dr_g = np.ones(m)
    dr_e = np.ones(p)
    dc = np.ones(n)
    Gs, Es = G.copy(), E.copy()
    for _ in range(iters):
        row_g = abs(Gs).max(axis=1).toarray().ravel()
        rg = np.where(row_g > 0, np.sqrt(np.where(row_g > 0, row_g, 1.0)), 1.0)
        re = np.ones(p)
        if p:
            row_e = abs(Es).max(axis=1).toarray().ravel()
            re = np.where(row_e > 0, np.sqrt(np.where(row_e > 0, row_e, 1.0)), 1.0)
        Gs = sp.diags(1.0 / rg) @ Gs
        if p:
            Es = sp.diags(1.0 / re) @ Es
        col_g = abs(Gs).max(axis=0).toarray().ravel()
        col_e = abs(Es).max(axis=0).toarray().ravel() if p else 0.0
        col = np.maximum(col_g, col_e)
        cc = np.where(col > 0, np.sqrt(np.where(col > 0, col, 1.0)), 1.0)
        Gs = Gs @ sp.diags(1.0 / cc)
        if p:
            Es = Es @ sp.diags(1.0 / cc)
        dr_g *= rg
        dr_e *= re
        dc *= cc
    return Gs.tocsr(), (Es.tocsr() if p else E), dr_g, dr_e, dc


class _KktFactory:
    """Factors [[Hw + dI, E'], [E, -rI]] for a fixed sparsity pattern.

    The CSC structure of the assembled KKT matrix is built once; later
    factorizations only gather fresh ``Hw`` values through an index map,
    skipping the per-iteration block assembly and format conversions.
    The primal regularization d is scaled to stay visible next to the
    largest diagonal entry when active-set weights blow up; the equality
    block is O(1) after equilibration and keeps the absolute value.
    """

    def __init__(self, E: sp.spmatrix):
        self.E = E.tocsr()
        self.p = E.shape[0]
        self._pattern = None

    def _build(self, Hw: sp.csr_matrix):
        n = Hw.shape[0]
        nnz_h = Hw.nnz
        hw_idx = sp.csr_matrix(
            (np.arange(1, nnz_h + 1, dtype=float), Hw.indices, Hw.indptr),
            shape=Hw.shape,
        )
        if self.p:
            ET = self.E.T.tocsr()
            et_idx = sp.csr_matrix(
                (np.arange(nnz_h + 1, nnz_h + 1 + ET.nnz, dtype=float),
                 ET.indices, ET.indptr), shape=ET.shape)
            e_idx = sp.csr_matrix(
                (np.arange(nnz_h + 1 + ET.nnz, nnz_h + 1 + ET.nnz + self.E.nnz,
                           dtype=float), self.E.indices, self.E.indptr),
                shape=self.E.shape)
            corner_off = nnz_h + 1 + ET.nnz + self.E.nnz
            corner = sp.diags(np.arange(corner_off, corner_off + self.p,
                                        dtype=float))
            K = sp.bmat([[hw_idx, et_idx], [e_idx, corner]], format="csc")
            self._const = np.concatenate([ET.tocsr().data, self.E.data,
                                          -REGULARIZATION * np.ones(self.p)])
        else:
            K = hw_idx.tocsc()
            self._const = np.zeros(0)
        self._src = np.rint(K.data).astype(np.int64)
        self._indices = K.indices
        self._indptr = K.indptr
        self._shape = K.shape
        self._hw_indptr = Hw.indptr.copy()
        self._hw_indices = Hw.indices.copy()
        diag_marks = hw_idx.diagonal()
        if np.any(diag_marks == 0):
            raise ValueError("KKT primal block must have a full diagonal")
        diag_src = np.rint(diag_marks).astype(np.int64)
        self._diag_positions = np.nonzero(np.isin(self._src, diag_src))[0]
        self._pattern = True

    def factor(self, Hw: sp.csr_matrix):
        Hw = Hw.tocsr()
        Hw.sort_indices()
        if self._pattern is None or not (
            np.array_equal(Hw.indptr, self._hw_indptr)
            and np.array_equal(Hw.indices, self._hw_indices)
        ):
            self._build(Hw)
        source = np.concatenate([[0.0], Hw.data, self._const])
        data = source[self._src]
        delta_p = REGULARIZATION * max(1.0, abs(Hw.diagonal()).max())
        data[self._diag_positions] += delta_p
        K = sp.csc_matrix((data, self._indices, self._indptr), shape=self._shape)
        return spla.splu(K)


def _kkt_residual(Hw, E, x, r1, r2):
    p = E.shape[0]
    if p:
        dv, dy = x[: r1.size], x[r1.size :]
        return np.concatenate([r1 - (Hw @ dv + E.T @ dy), r2 - E @ dv])
    return r1 - Hw @ x


def _kkt_solve(lu, Hw, E, r1, r2, refine: int = 4):
    """Solve the unregularized KKT system with iterative refinement."""
    p = E.shape[0]
    rhs = np.concatenate([r1, r2]) if p else r1
    rhs_norm = np.linalg.norm(rhs)
    x = lu.solve(rhs)
    for _ in range(refine):
        res = _kkt_residual(Hw, E, x, r1, r2)
        if np.linalg.norm(res) <= 1e-14 * (1.0 + rhs_norm):
            break
        x = x + lu.solve(res)
    if p:
        return x[: r1.size], x[r1.size :]
    return x, np.zeros(0)


def _max_step(x: np.ndarray, dx: np.ndarray) -> float:
    neg = dx < 0
    if not np.any(neg):
        return np.inf
    return float(np.min(-x[neg] / dx[neg]))


def solve_lp(
    lp: LinearProgram,
    tol: float = 1e-10,
    max_iter: int = 200,
) -> LpSolution:
    """Solve the LP; statuses other than ``optimal`` carry best iterates."""
    lp.validate()
    if tol <= 0.0:
        raise ValueError("tol must be positive")

    Gs, Es, dr_g, dr_e, dc = _ruiz_equilibration(lp.G, lp.E)
    cs = lp.c / dc
    hs = lp.h / dr_g
    fs = lp.f / dr_e if lp.f.size else lp.f
    m, n = Gs.shape
    p = Es.shape[0]

    h_scale = 1.0 + np.abs(lp.h).max(initial=0.0)
    f_scale = 1.0 + np.abs(lp.f).max(initial=0.0)
    c_scale = 1.0 + np.abs(lp.c).max(initial=0.0)

    GsT = Gs.T.tocsc()
    Gw = Gs.copy()                       # row-scaled workspace, pattern fixed
    row_counts = np.diff(Gs.indptr)

    # starting point: primal/dual least-squares with unit weights, then a
    # positive shift (Mehrotra-style) on the slacks and multipliers
    factory = _KktFactory(Es)
    Hw0 = (GsT @ Gw).tocsr()             # weights start at one
    lu0 = factory.factor(Hw0)
    v, _ = _kkt_solve(lu0, Hw0, Es, Gs.T @ hs, fs)
    r = hs - Gs @ v
    shift = -r.min()
    s = r if shift < 0 else r + (1.0 + shift)
    s = np.maximum(s, 1e-8)
    u, yw = _kkt_solve(lu0, Hw0, Es, cs, np.zeros(p))
    z = -(Gs @ u)
    y = -yw
    shift = -z.min()
    z = z if shift < 0 else z + (1.0 + shift)
    z = np.maximum(z, 1e-8)

    z0_norm = max(np.abs(z).max(), np.abs(y).max(initial=0.0), 1.0)
    v0_norm = max(np.abs(v).max(), 1.0)
    mu_history: list[float] = []
    status = "max_iter"
    iters = 0

    def original_residuals():
        v_o = v / dc
        z_o = z / dr_g
        y_o = y / dr_e if p else y
        s_o = s * dr_g
        rd = lp.c + lp.G.T @ z_o + (lp.E.T @ y_o if p else 0.0)
        rp = (lp.E @ v_o - lp.f) if p else np.zeros(0)
        rg = lp.G @ v_o + s_o - lp.h
        obj = float(lp.c @ v_o)
        dual_obj = float(-(lp.h @ z_o) - (lp.f @ y_o if p else 0.0))
        # primal-dual objective gap: the complementarity sum s'z floors at
        # roughly m*eps*scale in doubles and cannot certify tight tolerances
        gap = abs(obj - dual_obj)
        return {
            "primal": float(max(np.abs(rg).max(), np.abs(rp).max(initial=0.0))),
            "dual": float(np.abs(rd).max()),
            "gap": gap,
            "objective": obj,
            "ineq": float(np.abs(rg).max()),
            "eq": float(np.abs(rp).max(initial=0.0)),
        }

    res = original_residuals()
    best_err = np.inf
    stall = 0
    for it in range(1, max_iter + 1):
        iters = it
        mu = float(s @ z) / m
        mu_history.append(mu)

        res = original_residuals()
        if (
            res["ineq"] <= tol * h_scale
            and res["eq"] <= tol * f_scale
            and res["dual"] <= tol * c_scale
            and res["gap"] <= tol * (1.0 + abs(res["objective"]))
        ):
            status = "optimal"
            break
        err = max(res["ineq"] / h_scale, res["eq"] / f_scale,
                  res["dual"] / c_scale, res["gap"] / (1.0 + abs(res["objective"])))
        if err < best_err * 0.98:
            best_err = err
            stall = 0
        else:
            stall += 1
            if stall >= 15:  # no measurable progress: numerical floor reached
                break

        # Farkas-type certificates on the equilibrated data
        obj_ray = float(hs @ z + (fs @ y if p else 0.0))
        znorm = max(np.abs(z).max(), np.abs(y).max(initial=0.0))
        if obj_ray < -CERT_TOL * znorm:
            cert = np.abs(Gs.T @ z + (Es.T @ y if p else 0.0)).max()
            if cert <= CERT_TOL * max(1.0, znorm) and znorm > 1e2:
                status = "infeasible"
                break
        vnorm = np.abs(v).max()
        cv = float(cs @ v)
        if vnorm > 1e2 and cv < -CERT_TOL * vnorm:
            ray_ineq = np.maximum(Gs @ v, 0.0).max()
            ray_eq = np.abs(Es @ v).max() if p else 0.0
            if max(ray_ineq, ray_eq) <= CERT_TOL * vnorm:
                status = "unbounded"
                break
        # divergence heuristic: residual ratios blowing up while the gap stalls
        if znorm > DIVERGENCE_RATIO * z0_norm:
            status = "infeasible"
            break
        if vnorm > DIVERGENCE_RATIO * v0_norm:
            status = "unbounded"
            break

        W = np.clip(z / s, 1e-16, 1e16)
        np.multiply(Gs.data, np.repeat(W, row_counts), out=Gw.data)
        Hw = (GsT @ Gw).tocsr()
        try:
            lu = factory.factor(Hw)
        except RuntimeError:
            status = "max_iter"
            break

        rd = cs + Gs.T @ z + (Es.T @ y if p else 0.0)
        rp = (Es @ v - fs) if p else np.zeros(0)
        rg = Gs @ v + s - hs

        # predictor (affine scaling) step
        rhs1 = -rd - Gs.T @ (W * rg - z)
        dv, dy = _kkt_solve(lu, Hw, Es, rhs1, -rp)
        ds = -rg - Gs @ dv
        dz = -z - W * ds
        ap = min(1.0, _max_step(s, ds))
        ad = min(1.0, _max_step(z, dz))
        mu_aff = float((s + ap * ds) @ (z + ad * dz)) / m
        sigma = np.clip((max(mu_aff, 0.0) / mu) ** 3, 0.0, 1.0)

        # corrector step reusing the factorization
        t = sigma * mu - ds * dz
        rhs1 = -rd - Gs.T @ (t / s - z + W * rg)
        dv, dy = _kkt_solve(lu, Hw, Es, rhs1, -rp)
        ds = -rg - Gs @ dv
        dz = t / s - z - W * ds

        ap_full = min(1.0, FRACTION_TO_BOUNDARY * _max_step(s, ds))
        ad_full = min(1.0, FRACTION_TO_BOUNDARY * _max_step(z, dz))
        # keep the complementarity measure non-increasing where possible;
        # if damping cannot achieve that the iterates are diverging (an
        # infeasibility signature) and the full step is taken instead
        ap, ad = ap_full, ad_full
        for k in range(11):
            mu_new = float((s + ap * ds) @ (z + ad * dz)) / m
            if mu_new <= mu * (1.0 + 1e-12):
                break
            if k == 10:
                ap, ad = ap_full, ad_full
                break
            ap *= 0.5
            ad *= 0.5
        v = v + ap * dv
        s = s + ap * ds
        y = y + ad * dy
        z = z + ad * dz

    res = original_residuals()
    if status == "max_iter" and (
        res["ineq"] <= tol * h_scale
        and res["eq"] <= tol * f_scale
        and res["dual"] <= tol * c_scale
        and res["gap"] <= tol * (1.0 + abs(res["objective"]))
    ):
        status = "optimal"
    return LpSolution(
        v=v / dc,
        status=status,
        iterations=iters,
        residuals={k: res[k] for k in ("primal", "dual", "gap")},
        mu_history=tuple(mu_history),
        z=z / dr_g,
        s=s * dr_g,
    )
