"""Two-stage lattice search over regularization and nuisance weight.

A candidate grid holds one solved pattern per (alpha_db, weight_db) cell.
Selection is either thresholded (keep cells with adequate focused
density, then maximize the current ratio) or a plain densest-cell
argmax.  Each search runs twice: the second run keeps only the channels
carrying the largest currents in the first run's selection.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import optimizers
from .metrics import DeviationEstimate, MetricSet, compute_metrics, deviation_estimate
from .optimizers import CurrentPattern, MethodParams, StimulusProblem

METHODS = ("l1l1", "l1l2", "tls")
GAMMA_THRESHOLD = 0.11  # A/m^2

# dB spans per method; half-open ranges, so span/step grid points
DEFAULT_RANGES = {
    "l1l1": ((-160.0, 20.0), (-160.0, 20.0)),
    "l1l2": ((-140.0, 40.0), (-140.0, 40.0)),
    "tls": ((-240.0, -60.0), (-100.0, 80.0)),
}
DESK_STEP_DB = 15.0
FULL_STEP_DB = 5.0


class SearchError(RuntimeError):
    pass


def db_to_linear(d: float) -> float:
    """Amplitude decibel convention: 20 dB per decade."""
    return float(10.0 ** (d / 20.0))


@dataclass(frozen=True)
class LatticeSpec:
    alpha_db_min: float
    alpha_db_max: float
    weight_db_min: float
    weight_db_max: float
    step_db: float = FULL_STEP_DB

    def __post_init__(self):
        for lo, hi in ((self.alpha_db_min, self.alpha_db_max),
                       (self.weight_db_min, self.weight_db_max)):
            span = hi - lo
            if span <= 0.0 or self.step_db <= 0.0:
                raise SearchError("lattice range must be positive")
            ratio = span / self.step_db
            if abs(ratio - round(ratio)) > 1e-9:
                raise SearchError("lattice span must be a multiple of the step")

    @property
    def alpha_values(self) -> np.ndarray:
        n = round((self.alpha_db_max - self.alpha_db_min) / self.step_db)
        return self.alpha_db_min + self.step_db * np.arange(n)

    @property
    def weight_values(self) -> np.ndarray:
        n = round((self.weight_db_max - self.weight_db_min) / self.step_db)
        return self.weight_db_min + self.step_db * np.arange(n)

    @property
    def dims(self) -> tuple[int, int]:
        return (self.alpha_values.size, self.weight_values.size)


def default_lattice_spec(method: str, step_db: float = DESK_STEP_DB) -> LatticeSpec:
    (a_lo, a_hi), (w_lo, w_hi) = DEFAULT_RANGES[method]
    return LatticeSpec(a_lo, a_hi, w_lo, w_hi, step_db=step_db)


@dataclass(frozen=True)
class CandidateCell:
    params: MethodParams
    pattern: CurrentPattern
    metrics: MetricSet
    valid: bool
    reason: str = ""


@dataclass
class CandidateGrid:
    method: str
    spec: LatticeSpec
    cells: list[list[CandidateCell]]

    @property
    def dims(self) -> tuple[int, int]:
        return (len(self.cells), len(self.cells[0]))

    def cell(self, i: int, j: int) -> CandidateCell:
        return self.cells[i][j]

    def metric_array(self, name: str) -> np.ndarray:
        out = np.full(self.dims, math.nan)
        for i, row in enumerate(self.cells):
            for j, c in enumerate(row):
                out[i, j] = getattr(c.metrics, name)
        return out


_WORKER_STATE: dict = {}


def solve_single_cell(p: StimulusProblem, method: str, alpha_db: float,
                      weight_db: float, opts: dict) -> CurrentPattern:
    params = MethodParams(alpha_db=alpha_db, weight_db=weight_db)
    if method == "l1l1":
        return optimizers.solve_l1l1(p, params, **opts.get("l1l1", {}))
    if method == "l1l2":
        return optimizers.solve_l1l2(p, params, **opts.get("l1l2", {}))
    if method == "tls":
        return optimizers.solve_tls(p, params)
    raise SearchError(f"unknown method {method!r}")


def _init_worker(p, method, opts):
    _WORKER_STATE["args"] = (p, method, opts)


def _worker(cell):
    p, method, opts = _WORKER_STATE["args"]
    alpha_db, weight_db = cell
    try:
        return solve_single_cell(p, method, alpha_db, weight_db, opts)
    except Exception as exc:  # per-cell failures never abort the sweep
        return ("error", f"{type(exc).__name__}: {exc}")


def evaluate_lattice(
    p: StimulusProblem,
    method: str,
    spec: LatticeSpec,
    threads: int = 1,
    solver_opts: dict | None = None,
) -> CandidateGrid:
    """Solve one candidate per lattice cell; failures are recorded, not raised.

    The result is independent of ``threads``: cells are pure functions of
    (problem, method, cell parameters) and are reassembled in index order.
    """
    opts = solver_opts or {}
    alphas = spec.alpha_values
    weights = spec.weight_values
    cells_in = [(a, w) for a in alphas for w in weights]

    if threads > 1 and len(cells_in) > 1:
        with ProcessPoolExecutor(
            max_workers=threads, initializer=_init_worker, initargs=(p, method, opts)
        ) as pool:
            chunk = max(1, len(cells_in) // (4 * threads))
            results = list(pool.map(_worker, cells_in, chunksize=chunk))
    else:
        results = []
        for a, w in cells_in:
            try:
                results.append(solve_single_cell(p, method, a, w, opts))
            except Exception as exc:
                results.append(("error", f"{type(exc).__name__}: {exc}"))

    rows: list[list[CandidateCell]] = []
    it = iter(results)
    for a in alphas:
        row = []
        for w in weights:
            res = next(it)
            params = MethodParams(alpha_db=float(a), weight_db=float(w))
            if isinstance(res, tuple):
                pattern = CurrentPattern(
                    y=np.zeros(p.n_electrodes), electrode_ids=p.electrode_ids,
                    active_ids=(), status="error", raw_objective=math.nan,
                )
                row.append(CandidateCell(params, pattern, compute_metrics(p, pattern),
                                         valid=False, reason=res[1]))
                continue
            metrics = compute_metrics(p, res)
            valid = res.status == "optimal"
            reason = "" if valid else res.status
            row.append(CandidateCell(params, res, metrics, valid=valid, reason=reason))
        rows.append(row)
    return CandidateGrid(method=method, spec=spec, cells=rows)


def select_case_a(grid: CandidateGrid, threshold: float = GAMMA_THRESHOLD):
    """Max current ratio among cells whose focused density clears the bar.

    Returns (i, j) or None when no cell passes the threshold.  Ties keep
    the lowest alpha index, then the lowest weight index.
    """
    best = None
    best_theta = -math.inf
    for i, row in enumerate(grid.cells):
        for j, c in enumerate(row):
            if not c.valid or not (c.metrics.gamma >= threshold):
                continue
            if c.metrics.theta > best_theta:
                best, best_theta = (i, j), c.metrics.theta
    return best


def select_case_b(grid: CandidateGrid):
    """Cell with the largest focused density over all valid cells."""
    best = None
    best_gamma = -math.inf
    for i, row in enumerate(grid.cells):
        for j, c in enumerate(row):
            if not c.valid:
                continue
            if c.metrics.gamma > best_gamma:
                best, best_gamma = (i, j), c.metrics.gamma
    if best is None:
        raise SearchError("no valid candidate in the grid")
    return best


def restrict_montage(y: np.ndarray, k: int, electrode_ids=None) -> tuple[int, ...]:
    """Ids of the k channels with the largest |current|; ties keep lower ids."""
    y = np.asarray(y, dtype=float)
    if electrode_ids is None:
        electrode_ids = tuple(range(1, y.size + 1))
    if not (2 <= k <= y.size):
        raise SearchError("montage size must be between 2 and the channel count")
    ids = np.asarray(electrode_ids)
    order = np.lexsort((ids, -np.abs(y)))
    return tuple(sorted(int(ids[i]) for i in order[:k]))


@dataclass(frozen=True)
class RunSelection:
    cell: tuple[int, int]
    params: MethodParams
    pattern: CurrentPattern
    metrics: MetricSet


@dataclass
class SearchOutcome:
    method: str
    case: str
    channels: int
    status: str                                   # ok | no-feasible-candidate
    run1: RunSelection | None
    run2: RunSelection | None
    montage: tuple[int, ...]
    deviations: dict[str, DeviationEstimate]
    run1_grid: CandidateGrid | None = None
    run2_grid: CandidateGrid | None = None


_METRIC_NAMES = ("gamma", "theta", "ad_deg", "max_current")


def _window_deviations(grid: CandidateGrid, cell: tuple[int, int],
                       step_db: float) -> dict[str, DeviationEstimate]:
    ni, nj = grid.dims
    i = min(max(cell[0], 1), ni - 2) if ni >= 3 else cell[0]
    j = min(max(cell[1], 1), nj - 2) if nj >= 3 else cell[1]
    clamped = (i, j) != cell
    out = {}
    for name in _METRIC_NAMES:
        arr = grid.metric_array(name)
        if ni >= 3 and nj >= 3:
            window = arr[i - 1 : i + 2, j - 1 : j + 2]
            out[name] = deviation_estimate(window, step_db, clamped=clamped)
        else:
            # grid too small for a quadratic window: flat surface, no spread
            out[name] = DeviationEstimate(0.0, (float(arr[cell]), 0, 0, 0, 0, 0),
                                          imputed=False, clamped=True)
    return out


def _selection(grid: CandidateGrid, case: str, threshold: float):
    if case == "A":
        return select_case_a(grid, threshold)
    if case == "B":
        try:
            return select_case_b(grid)
        except SearchError:
            return None
    raise SearchError(f"unknown case {case!r}")


def two_run_search(
    p: StimulusProblem,
    method: str,
    case: str,
    k: int,
    spec: LatticeSpec,
    threshold: float = GAMMA_THRESHOLD,
    threads: int = 1,
    solver_opts: dict | None = None,
    run1_grid: CandidateGrid | None = None,
    run2_grid_cache: dict | None = None,
) -> SearchOutcome:
    """Full-montage sweep, channel restriction, restricted re-sweep.

    ``run1_grid`` may be passed in when several (case, k) variants share
    the same first run; ``run2_grid_cache`` deduplicates second runs that
    land on the same montage.  Neither affects the result.
    """
    if k > p.n_electrodes:
        raise SearchError("k exceeds the electrode count")
    grid1 = run1_grid if run1_grid is not None else evaluate_lattice(
        p, method, spec, threads=threads, solver_opts=solver_opts
    )
    sel1 = _selection(grid1, case, threshold)
    if sel1 is None:
        return SearchOutcome(method, case, k, "no-feasible-candidate",
                             None, None, (), {}, run1_grid=grid1)
    c1 = grid1.cell(*sel1)
    montage = restrict_montage(c1.pattern.y, k, p.electrode_ids)

    cache_key = (method, montage)
    if run2_grid_cache is not None and cache_key in run2_grid_cache:
        grid2 = run2_grid_cache[cache_key]
    else:
        p2 = p.restrict(montage)
        grid2 = evaluate_lattice(p2, method, spec, threads=threads,
                                 solver_opts=solver_opts)
        if run2_grid_cache is not None:
            run2_grid_cache[cache_key] = grid2
    sel2 = _selection(grid2, case, threshold)
    if sel2 is None:
        return SearchOutcome(method, case, k, "no-feasible-candidate",
                             RunSelection(sel1, c1.params, c1.pattern, c1.metrics),
                             None, montage, {}, run1_grid=grid1, run2_grid=grid2)
    c2 = grid2.cell(*sel2)
    deviations = _window_deviations(grid2, sel2, spec.step_db)
    return SearchOutcome(
        method=method,
        case=case,
        channels=k,
        status="ok",
        run1=RunSelection(sel1, c1.params, c1.pattern, c1.metrics),
        run2=RunSelection(sel2, c2.params, c2.pattern, c2.metrics),
        montage=montage,
        deviations=deviations,
        run1_grid=grid1,
        run2_grid=grid2,
    )


def resolve_threads(requested: int | None = None) -> int:
    """Thread count: explicit request, capped by the TESOPT_THREADS env var."""
    cap = os.environ.get("TESOPT_THREADS")
    cap_n = int(cap) if cap else (os.cpu_count() or 1)
    if requested is None:
        return max(1, cap_n)
    return max(1, min(requested, cap_n))
