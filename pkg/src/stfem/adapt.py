"""A posteriori error estimation, Doerfler marking and the adaptive loop."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument, NumericalBreakdown
from .forms import cell_blocks, data_oscillation, h1x_error, local_load, trace_mismatch
from .mesh import build_initial, close_mesh
from .precond import MultilevelPreconditioner
from .solver import StopCriterion, build_system, pcg_solve
from .space import SpaceSpec, build_dofs, prolongation


@dataclass
class EstimatorReport:
    cells: np.ndarray          # mesh ids of the leaves
    eta_sq: np.ndarray         # signed per-cell contributions
    osc_sq: np.ndarray
    trace_sq: np.ndarray       # t = 0 mismatch per cell (zero away from t = 0)
    w: np.ndarray = field(repr=False, default=None)

    @property
    def total(self):
        return math.fsum(self.eta_sq)

    @property
    def clipped(self):
        return np.maximum(self.eta_sq, 0.0)

    @property
    def osc_total(self):
        return math.fsum(self.osc_sq)


def estimate(system, u, osc=True) -> EstimatorReport:
    """Per-cell residual contributions eta^2(K) for free coefficients u."""
    U, V = system.trial, system.test
    full = system.full(u)
    y = system.B @ u - system.f_vec
    w = system.G.apply(y)
    lu = U.local_coeffs(full, all_dofs=True)
    lw = V.local_coeffs(w)
    blk = cell_blocks(U, V, "b")
    vals = np.einsum("ci,cij,cj->c", lw, blk, lu)
    if system.f is not None:
        vals -= (local_load(V, system.f) * lw).sum(axis=1)
    tr = np.zeros(U.cells.size)
    if system.u0 is not None:
        tv, pos = trace_mismatch(U, full, system.u0, all_dofs=True)
        np.add.at(tr, pos, tv)
    o = data_oscillation(U, system.f) if (osc and system.f is not None) else np.zeros(U.cells.size)
    return EstimatorReport(U.cells.copy(), vals + tr, o, tr, w)


def mark(report_or_values, theta=0.5, mode="signed", cells=None):
    """Smallest greedy prefix carrying a theta-fraction of the indicators.

    Accepts an EstimatorReport or a plain array of indicators (then the
    returned ids are positions, or entries of ``cells`` if given).
    """
    if not (0.0 < theta <= 1.0):
        raise InvalidArgument("theta must lie in (0, 1]")
    if mode not in ("signed", "clipped"):
        raise InvalidArgument("marking mode must be 'signed' or 'clipped'")
    if isinstance(report_or_values, EstimatorReport):
        ind = report_or_values.eta_sq
        ids = report_or_values.cells
    else:
        ind = np.asarray(report_or_values, dtype=float)
        ids = np.arange(ind.size) if cells is None else np.asarray(cells)
    if mode == "clipped":
        ind = np.maximum(ind, 0.0)
    total = math.fsum(ind)
    if total <= 0.0 or not np.any(ind):
        return set()
    order = np.lexsort((ids, -ind))
    target = theta * total
    tol = 1e-12 * math.fsum(np.abs(ind))
    acc = []
    for k in order:
        acc.append(ind[k])
        if math.fsum(acc) >= target - tol:
            break
    return {int(ids[k]) for k in order[:len(acc)]}


# ------------------------------------------------------------ problems
@dataclass
class Problem:
    name: str
    T: float
    omega: tuple
    n_t: int
    n_x: int
    f: object
    u0: object
    u: object = None           # exact solution (t, x)
    ux: object = None          # its spatial derivative
    lift: object = None        # lateral Dirichlet data (t, x), None if homogeneous
    default_marking: str = "signed"


def smooth_problem():
    return Problem(
        "smooth", 1.0, (0.0, 1.0), 4, 2,
        f=lambda t, x: x * (1 - x) + 2 * t,
        u0=lambda x: 0.0 * x,
        u=lambda t, x: t * x * (1 - x),
        ux=lambda t, x: t * (1 - 2 * x),
    )


def rough_init_problem():
    return Problem(
        "rough_init", 1.0, (0.0, 1.0), 4, 2,
        f=lambda t, x: 0.0 * t * x,
        u0=lambda x: np.ones_like(x),
    )


def fundamental_problem(ts=1e-3):
    def u(t, x):
        s = t + ts
        return np.exp(-x * x / (4 * s)) / np.sqrt(4 * np.pi * s)

    def ux(t, x):
        return -x / (2 * (t + ts)) * u(t, x)

    return Problem(
        "fundamental", 1.0, (-1.0, 1.0), 16, 4,
        f=lambda t, x: 0.0 * t * x,
        u0=lambda x: u(0.0, x),
        u=u, ux=ux, lift=u, default_marking="clipped",
    )


PROBLEMS = {
    "smooth": smooth_problem,
    "rough_init": rough_init_problem,
    "fundamental": fundamental_problem,
}


@dataclass
class LevelRecord:
    level: int
    ndof: int
    eta: float
    error_H1x: float
    pcg_iters: int
    alg_est: float
    osc: float
    kappa: float = float("nan")
    n_cells: int = 0
    n_marked: int = 0
    marked_at_t0: float = float("nan")

    def row(self):
        return (self.level, self.ndof, self.eta, self.error_H1x, self.pcg_iters, self.alg_est, self.osc)


@dataclass
class LoopResult:
    mesh: object
    records: list
    stopped: str               # 'budget', 'levels' or 'converged'
    solution: object = None    # (trial dofs, all-dof coefficients) of the last level
    traces: list = field(default_factory=list)


def adaptive_loop(problem: Problem, theta=0.5, eps=0.01, p=(1, 1), max_ndof=10_000,
                  refine="adaptive", marking=None, precond_scale=1.0, max_levels=50,
                  max_iter=500, on_level=None):
    """solve -> estimate -> mark -> refine, warm-starting PCG on each level.

    Stops before solving a level whose trial dimension exceeds ``max_ndof``;
    after ``max_levels`` solved levels the mesh is left unrefined.
    ``on_level(mesh, record, result)`` is called after every solved level.
    """
    if refine not in ("adaptive", "uniform"):
        raise InvalidArgument("refine must be 'adaptive' or 'uniform'")
    if not (0.0 < eps < 1.0):
        raise InvalidArgument("eps must lie in (0, 1)")
    marking = marking or problem.default_marking
    p_t, p_x = p
    mesh = build_initial(problem.T, problem.omega, problem.n_t, problem.n_x)
    trial_spec = SpaceSpec.trial(p_t, p_x)
    test_spec = SpaceSpec.test(p_t + 2, p_x + 3)
    records, traces = [], []
    prev = None
    stopped = "levels"
    for level in range(max_levels):
        U = build_dofs(mesh, mesh.latest, trial_spec)
        if U.n > max_ndof:
            stopped = "budget"
            break
        V = build_dofs(mesh, mesh.latest, test_spec)
        G = MultilevelPreconditioner(mesh, test_spec, scale=precond_scale)
        K = MultilevelPreconditioner(mesh, trial_spec, scale=precond_scale)
        system = build_system(U, V, G, problem.f, problem.u0, lift_fn=problem.lift)
        u_init = None
        if prev is not None:
            u_init = (prolongation(prev[0], U, all_dofs=True) @ prev[1])[U.free]
        res = pcg_solve(system, K, u_init, StopCriterion(eps, max_iter))
        traces.append(res)
        rep = estimate(system, res.u)
        full = system.full(res.u)
        err = h1x_error(U, full, problem.ux, all_dofs=True) if problem.ux is not None else float("nan")
        eta_sq = rep.total
        if eta_sq < 0:
            raise NumericalBreakdown("negative total estimator")
        if refine == "uniform":
            marked = set(int(c) for c in U.cells)
        else:
            marked = mark(rep, theta, marking)
        t0 = mesh.t_bounds(np.array(sorted(marked), dtype=np.int64))[0] if marked else np.zeros(0)
        rec = LevelRecord(level, U.n, math.sqrt(eta_sq), err, res.iterations, res.alg_est[-1],
                          math.sqrt(rep.osc_total), res.kappa, U.cells.size, len(marked),
                          float(np.mean(t0 <= 1e-14 * problem.T)) if marked else float("nan"))
        records.append(rec)
        if on_level is not None:
            on_level(mesh, rec, res)
        prev = (U, full)
        del system, G, K, V
        mesh.clear_caches(keep=lambda i, spec: spec != test_spec)
        if not marked:
            stopped = "converged"
            break
        if level == max_levels - 1:
            break
        close_mesh(mesh, marked)
    mesh.clear_caches()
    return LoopResult(mesh, records, stopped, prev, traces)
