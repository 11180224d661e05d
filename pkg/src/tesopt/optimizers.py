"""Stimulation-pattern optimizers: L1-fit LP, L1-regularized L2 fit, and
ridge-weighted least squares, plus the shared dose post-scaling.

All solvers return a pattern that satisfies the hard constraints exactly:
the raw solution is balanced by mean subtraction and then scaled so the
total dose equals ``mu`` (which pins the per-channel maximum at mu/2 for
any balanced vector).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .lp import LinearProgram, make_program, solve_lp

DEGENERATE_FRACTION = 1e-12   # ||y||_1 below this times mu counts as no pattern

L1L2_TOL = 1e-6
L1L2_MAX_ITER = 20000
PROJECTION_MAX_CYCLES = 1000
PROJECTION_TOL = 1e-10


class OptimizerError(RuntimeError):
    pass


@dataclass
class StimulusProblem:
    """Split lead field plus dose limits and scale factors.

    ``L1`` holds the three target rows, ``L2`` the nuisance rows.  The
    scale factors are zeta = ||L||_1, nu = ||x||_inf and sigma_scale =
    ||L||_2 of the stacked lead field.
    """

    L1: np.ndarray              # (3, L) A/m^2 per A
    L2: np.ndarray              # (M, L)
    x1: np.ndarray              # (3,) A/m^2
    mu: float                   # total dose cap (A)
    gamma: float                # per-channel cap (A), mu/2
    zeta: float
    nu: float
    sigma_scale: float
    electrode_ids: tuple[int, ...] = ()
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if not self.electrode_ids:
            self.electrode_ids = tuple(range(1, self.L1.shape[1] + 1))
        if abs(self.gamma - self.mu / 2.0) > 1e-12 * self.mu:
            raise OptimizerError("channel cap gamma must equal mu/2")

    @property
    def n_electrodes(self) -> int:
        return self.L1.shape[1]

    @property
    def n_nuisance(self) -> int:
        return self.L2.shape[0]

    @classmethod
    def from_parts(cls, L1, L2, x1, mu, electrode_ids=()) -> "StimulusProblem":
        """Build a problem, deriving the scale factors from the matrices."""
        from .fem import spectral_norm

        # C-layout normalization keeps BLAS summation order (and hence
        # results) bitwise identical for column-subset copies
        L1 = np.ascontiguousarray(L1, dtype=float)
        L2 = np.ascontiguousarray(L2, dtype=float)
        x1 = np.ascontiguousarray(x1, dtype=float)
        stacked = np.vstack([L1, L2])
        return cls(
            L1=L1,
            L2=L2,
            x1=x1,
            mu=float(mu),
            gamma=float(mu) / 2.0,
            zeta=float(np.abs(stacked).sum(axis=0).max()),
            nu=float(np.abs(x1).max()),
            sigma_scale=spectral_norm(stacked),
            electrode_ids=tuple(electrode_ids),
        )

    def restrict(self, ids) -> "StimulusProblem":
        """Sub-problem over a channel subset; scale factors are re-derived."""
        ids = tuple(sorted(ids))
        index = {eid: i for i, eid in enumerate(self.electrode_ids)}
        cols = [index[eid] for eid in ids]
        return StimulusProblem.from_parts(
            self.L1[:, cols], self.L2[:, cols], self.x1, self.mu, electrode_ids=ids
        )

    def scatter(self, y_sub: np.ndarray, full_ids) -> np.ndarray:
        """Embed a restricted pattern back into the ``full_ids`` space."""
        full_ids = tuple(full_ids)
        out = np.zeros(len(full_ids))
        pos = {eid: i for i, eid in enumerate(full_ids)}
        for eid, val in zip(self.electrode_ids, y_sub):
            out[pos[eid]] = val
        return out

    def gram_target(self) -> np.ndarray:
        if "g1" not in self._cache:
            self._cache["g1"] = self.L1.T @ self.L1
        return self._cache["g1"]

    def gram_nuisance(self) -> np.ndarray:
        if "g2" not in self._cache:
            self._cache["g2"] = self.L2.T @ self.L2
        return self._cache["g2"]

    def target_drive(self) -> np.ndarray:
        if "l1tx" not in self._cache:
            self._cache["l1tx"] = self.L1.T @ self.x1
        return self._cache["l1tx"]


@dataclass(frozen=True)
class MethodParams:
    """Regularization and nuisance-weight levels, both in dB."""

    alpha_db: float
    weight_db: float

    def __post_init__(self):
        if not (math.isfinite(self.alpha_db) and math.isfinite(self.weight_db)):
            raise OptimizerError("dB parameters must be finite")


@dataclass(frozen=True)
class CurrentPattern:
    """Per-electrode injected currents with solver bookkeeping."""

    y: np.ndarray
    electrode_ids: tuple[int, ...]
    active_ids: tuple[int, ...]
    status: str                 # optimal | degenerate | max_iter | infeasible | unbounded
    raw_objective: float

    @property
    def degenerate(self) -> bool:
        return self.status == "degenerate"

    def validate(self, mu: float, gamma: float) -> None:
        if self.degenerate:
            return
        l1 = np.abs(self.y).sum()
        if abs(self.y.sum()) > 1e-9 * max(l1, mu):
            raise OptimizerError("pattern violates current balance")
        if l1 > mu * (1.0 + 1e-9):
            raise OptimizerError("total dose exceeded")
        if np.abs(self.y).max() > gamma * (1.0 + 1e-9):
            raise OptimizerError("channel cap exceeded")


def equalize_dose(y: np.ndarray, mu: float) -> np.ndarray:
    """Scale a balanced pattern so its total absolute dose equals ``mu``."""
    y = np.asarray(y, dtype=float)
    l1 = np.abs(y).sum()
    if l1 == 0.0:
        raise OptimizerError("cannot scale an all-zero pattern")
    if abs(y.sum()) > 1e-6 * l1:
        raise OptimizerError("pattern must be balanced before dose scaling")
    return y * (mu / l1)


def _finalize(p: StimulusProblem, y_raw: np.ndarray, status: str,
              raw_objective: float) -> CurrentPattern:
    y = y_raw - y_raw.mean()
    if np.abs(y).sum() < DEGENERATE_FRACTION * p.mu:
        return CurrentPattern(
            y=np.zeros_like(y), electrode_ids=p.electrode_ids, active_ids=(),
            status="degenerate", raw_objective=raw_objective,
        )
    y = equalize_dose(y, p.mu)
    active = tuple(
        eid for eid, val in zip(p.electrode_ids, y)
        if abs(val) > DEGENERATE_FRACTION * p.mu
    )
    return CurrentPattern(
        y=y, electrode_ids=p.electrode_ids, active_ids=active,
        status=status, raw_objective=raw_objective,
    )


def l1l1_objective(p: StimulusProblem, y: np.ndarray, alpha: float, eps: float) -> float:
    """L1 data fit with a nuisance dead zone and an L1 pattern penalty."""
    fit = np.abs(p.L1 @ y - p.x1).sum()
    nuisance = np.maximum(np.abs(p.L2 @ y), eps * p.nu).sum()
    return float(fit + nuisance + alpha * p.zeta * np.abs(y).sum())


def l1l2_objective(p: StimulusProblem, y: np.ndarray, alpha: float, eps: float) -> float:
    fit = np.linalg.norm(p.L1 @ y - p.x1)
    dead = eps * p.nu * np.sqrt(p.n_nuisance)
    nuisance = max(np.linalg.norm(p.L2 @ y), dead)
    return float(fit + nuisance + alpha * p.zeta * np.abs(y).sum())


def build_l1l1_lp(p: StimulusProblem, alpha: float, eps: float) -> LinearProgram:
    """Epigraph LP for the dead-zone L1 fitting problem.

    Variables are (y, t1, t2, t3); t1/t2 bound the absolute fit and
    nuisance residuals, t3 bounds |y| and carries the dose caps and the
    weighted pattern penalty.
    """
    if alpha < 0.0 or eps < 0.0:
        raise OptimizerError("alpha and eps must be non-negative")
    L = p.n_electrodes
    M = p.n_nuisance
    L1 = sp.csr_matrix(p.L1)
    L2 = sp.csr_matrix(p.L2)
    I3 = sp.identity(3, format="csr")
    IM = sp.identity(M, format="csr")
    IL = sp.identity(L, format="csr")
    ones_row = sp.csr_matrix(np.ones((1, L)))

    G = sp.bmat(
        [
            [L1, -I3, None, None],
            [L2, None, -IM, None],
            [-IL, None, None, -IL],
            [-L1, -I3, None, None],
            [-L2, None, -IM, None],
            [IL, None, None, -IL],
            [None, -I3, None, None],
            [None, None, -IM, None],
            [None, None, None, -IL],
            [None, None, None, IL],
            [None, None, None, ones_row],
        ],
        format="csr",
    )
    h = np.concatenate([
        p.x1,
        np.zeros(M),
        np.zeros(L),
        -p.x1,
        np.zeros(M),
        np.zeros(L),
        np.zeros(3),
        -eps * p.nu * np.ones(M),
        np.zeros(L),
        p.gamma * np.ones(L),
        [p.mu],
    ])
    c = np.concatenate([
        np.zeros(L), np.ones(3), np.ones(M), alpha * p.zeta * np.ones(L)
    ])
    E = sp.csr_matrix(
        np.concatenate([np.ones(L), np.zeros(3 + M + L)])[None, :]
    )
    return make_program(c, G, h, E, np.zeros(1))


def solve_l1l1_linear(
    p: StimulusProblem, alpha: float, eps: float,
    tol: float = 1e-10, max_iter: int = 200,
) -> CurrentPattern:
    # zeta is the induced 1-norm of the lead field, so for alpha >= 1 the
    # pattern penalty outweighs any attainable fit gain and y = 0 is an
    # exact optimum; skip the LP for those cells
    if alpha >= 1.0:
        return _finalize(p, np.zeros(p.n_electrodes), "optimal",
                         l1l1_objective(p, np.zeros(p.n_electrodes), alpha, eps))
    lp = build_l1l1_lp(p, alpha, eps)
    sol = solve_lp(lp, tol=tol, max_iter=max_iter)
    y = sol.v[: p.n_electrodes]
    raw = l1l1_objective(p, y, alpha, eps)
    return _finalize(p, y, sol.status, raw)


def solve_l1l1(p: StimulusProblem, params: MethodParams, **kwargs) -> CurrentPattern:
    from .search import db_to_linear

    return solve_l1l1_linear(
        p, db_to_linear(params.alpha_db), db_to_linear(params.weight_db), **kwargs
    )


def _project_l1_ball(y: np.ndarray, radius: float) -> np.ndarray:
    l1 = np.abs(y).sum()
    if l1 <= radius:
        return y
    u = np.sort(np.abs(y))[::-1]
    css = np.cumsum(u)
    k = np.nonzero(u * np.arange(1, y.size + 1) > css - radius)[0][-1]
    theta = (css[k] - radius) / (k + 1.0)
    return np.sign(y) * np.maximum(np.abs(y) - theta, 0.0)


def _soft_threshold(y: np.ndarray, lam: float) -> np.ndarray:
    return np.sign(y) * np.maximum(np.abs(y) - lam, 0.0)


def project_feasible(y: np.ndarray, mu: float, gamma: float, l1_weight: float = 0.0,
                     max_cycles: int = PROJECTION_MAX_CYCLES,
                     tol: float = PROJECTION_TOL) -> np.ndarray:
    """Prox of l1_weight*||.||_1 over {1'y = 0, ||y||_1 <= mu, |y| <= gamma}.

    Cyclic projections with Dykstra corrections onto the three constraint
    sets, with the L1 soft threshold joining the cycle; stops once the
    constraint violations drop below ``tol`` times the dose and the cycle
    has stopped moving.  With l1_weight = 0 this is the plain projection.
    """
    x = np.asarray(y, dtype=float).copy()
    n = x.size
    inv_n = 1.0 / n
    use_l1 = l1_weight > 0.0
    inc0 = np.zeros(n)
    inc1 = np.zeros(n)
    inc2 = np.zeros(n)
    inc3 = np.zeros(n)
    scale = max(mu, 1e-300)
    bound = tol * scale
    for _ in range(max_cycles):
        x_prev = x
        if use_l1:
            w = x + inc0
            x = np.sign(w) * np.maximum(np.abs(w) - l1_weight, 0.0)
            inc0 = w - x
        w = x + inc1
        x = w - w.sum() * inv_n
        inc1 = w - x
        w = x + inc2
        x = _project_l1_ball(w, mu)
        inc2 = w - x
        w = x + inc3
        x = np.minimum(np.maximum(w, -gamma), gamma)
        inc3 = w - x
        abs_x = np.abs(x)
        viol = max(
            abs(x.sum()),
            abs_x.sum() - mu,
            abs_x.max() - gamma,
        )
        if viol <= bound and np.abs(x - x_prev).max() <= bound:
            break
    return x


def solve_l1l2_linear(
    p: StimulusProblem, alpha: float, eps: float,
    tol: float = L1L2_TOL, max_iter: int = L1L2_MAX_ITER,
) -> CurrentPattern:
    """First-order primal-dual splitting for the L2-fit variant.

    Dual blocks handle the fit norm and the dead-zone nuisance norm; the
    primal step takes the prox of the weighted L1 penalty restricted to
    the dose polytope (cyclic projections).  Step sizes come from the
    power-iterated norm of the stacked matrix, split so primal moves are
    on the dose scale and dual moves on the unit-ball scale.
    """
    L = p.n_electrodes
    K = np.vstack([p.L1, p.L2])
    gram = K.T @ K
    v = np.ones(L) / np.sqrt(L)
    lam = 0.0
    for _ in range(10000):
        w = gram @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            break
        v = w / norm
        lam_new = float(v @ gram @ v)
        if abs(lam_new - lam) <= 1e-6 * abs(lam_new):
            lam = lam_new
            break
        lam = lam_new
    op_norm = max(np.sqrt(lam), 1e-300)
    tau = 0.99 * p.mu / op_norm
    sigma = 0.99 / (p.mu * op_norm)

    dead = eps * p.nu * np.sqrt(p.n_nuisance)
    thr = alpha * p.zeta
    M = p.n_nuisance
    y = np.zeros(L)
    ybar = y.copy()
    q = np.zeros(3 + M)
    status = "max_iter"
    p_scale = 1.0 + op_norm
    d_scale = 1.0 + op_norm * p.mu
    for it in range(1, max_iter + 1):
        w = q + sigma * (K @ ybar)
        w1 = w[:3] - sigma * p.x1
        w2 = w[3:]
        qn = np.empty_like(q)
        qn[:3] = w1 / max(1.0, np.linalg.norm(w1))
        n2 = np.linalg.norm(w2)
        qn[3:] = w2 * (min(max(n2 - sigma * dead, 0.0), 1.0) / n2) if n2 > 0 else w2
        y_new = project_feasible(y - tau * (K.T @ qn), p.mu, p.gamma,
                                 l1_weight=tau * thr)
        if it == 1 or it % 25 == 0:
            dq = q - qn
            dy = y - y_new
            p_res = np.linalg.norm(dy / tau - K.T @ dq)
            d_res = np.linalg.norm(dq / sigma - K @ dy)
            if p_res <= tol * p_scale and d_res <= tol * d_scale:
                q = qn
                y = y_new
                status = "optimal"
                break
        ybar = 2.0 * y_new - y
        q = qn
        y = y_new
    raw = l1l2_objective(p, y, alpha, eps)
    return _finalize(p, y, status, raw)


def solve_l1l2(p: StimulusProblem, params: MethodParams, **kwargs) -> CurrentPattern:
    from .search import db_to_linear

    return solve_l1l2_linear(
        p, db_to_linear(params.alpha_db), db_to_linear(params.weight_db), **kwargs
    )


def tls_raw_solution(p: StimulusProblem, alpha: float, delta: float) -> np.ndarray:
    """Solve the ridge normal equations for the weighted least squares fit.

    Dense Cholesky on the normal equations; when the regularization is
    too small for the Gram matrix to stay positive definite in doubles,
    falls back to a QR least-squares solve of the stacked system.
    """
    if alpha <= 0.0:
        raise OptimizerError("alpha must be positive for the least-squares path")
    A = (
        p.gram_target()
        + (delta * alpha) ** 2 * p.gram_nuisance()
        + (alpha * p.sigma_scale) ** 2 * np.eye(p.n_electrodes)
    )
    b = p.target_drive()
    try:
        y = sla.cho_solve(sla.cho_factor(A), b)
    except np.linalg.LinAlgError:
        stacked = np.vstack([
            p.L1,
            (delta * alpha) * p.L2,
            (alpha * p.sigma_scale) * np.eye(p.n_electrodes),
        ])
        rhs = np.concatenate([p.x1, np.zeros(stacked.shape[0] - 3)])
        y = np.linalg.lstsq(stacked, rhs, rcond=None)[0]
    scale = max(np.linalg.norm(b), np.linalg.norm(A, ord=2) * np.linalg.norm(y), 1e-300)
    if np.linalg.norm(A @ y - b) > 1e-10 * scale:
        raise OptimizerError("normal equations solve lost accuracy")
    return y


def solve_tls_linear(p: StimulusProblem, alpha: float, delta: float) -> CurrentPattern:
    y_raw = tls_raw_solution(p, alpha, delta)
    raw = float(
        np.linalg.norm(p.L1 @ y_raw - p.x1) ** 2
        + (delta * alpha) ** 2 * np.linalg.norm(p.L2 @ y_raw) ** 2
        + (alpha * p.sigma_scale) ** 2 * np.linalg.norm(y_raw) ** 2
    )
    return _finalize(p, y_raw, "optimal", raw)


def solve_tls(p: StimulusProblem, params: MethodParams) -> CurrentPattern:
    from .search import db_to_linear

    return solve_tls_linear(
        p, db_to_linear(params.alpha_db), db_to_linear(params.weight_db)
    )


@dataclass
class TlsDiagnostics:
    """Zero-weight ridge solution and utilities for expansion checks."""

    y_tilde: np.ndarray
    gamma_tilde: float
    alpha: float
    _eigvecs: np.ndarray = field(repr=False, compare=False, default=None)
    _eigvals: np.ndarray = field(repr=False, compare=False, default=None)

    def w_norm_sq(self, vec: np.ndarray) -> float:
        """Quadratic form of the ridge inverse: vec' W vec."""
        proj = self._eigvecs.T @ vec
        return float(proj @ (proj / self._eigvals))

    def ridge_inverse(self) -> np.ndarray:
        return (self._eigvecs / self._eigvals) @ self._eigvecs.T


def tls_diagnostics(p: StimulusProblem, alpha: float) -> TlsDiagnostics:
    """Zero-weight solution via the eigendecomposition of the target Gram.

    The Gram matrix has rank at most three, so a Cholesky factorization is
    not viable for small ridge levels; the eigen path is stable for any
    positive alpha.
    """
    from .metrics import focused_density

    if alpha <= 0.0:
        raise OptimizerError("alpha must be positive")
    lam, Q = np.linalg.eigh(p.gram_target())
    lam = np.maximum(lam, 0.0) + (alpha * p.sigma_scale) ** 2
    b = p.target_drive()
    y_tilde = (Q / lam) @ (Q.T @ b)
    gamma_tilde = focused_density(p, y_tilde) if p.x1.any() else 0.0
    return TlsDiagnostics(
        y_tilde=y_tilde,
        gamma_tilde=gamma_tilde,
        alpha=alpha,
        _eigvecs=Q,
        _eigvals=lam,
    )
