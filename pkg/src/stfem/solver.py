"""Schur complement system of the minimal residual method and its PCG solver.

With B the parabolic form, G the test-side preconditioner and gamma0/M0 the
trace at t = 0, the discrete solution minimises

    ||B u - f||_G^2 + ||u(0) - u0||^2,

i.e. it solves A u = F with A = B^T G B + gamma0^T M0 gamma0.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .errors import InvalidArgument, NumericalBreakdown
from .forms import assemble_B, assemble_load, assemble_trace, trace_load
from .poly import gauss


@dataclass
class SchurSystem:
    trial: object
    test: object
    B: sp.csr_matrix
    G: object
    trace_mass: sp.csr_matrix      # gamma0^T M0 gamma0 on free trial dofs
    f_vec: np.ndarray              # test load, lifting already subtracted
    init_vec: np.ndarray           # int u0 phi_j(0), lifting already subtracted
    init_sq: float                 # ||u0 - lift(0)||^2 restricted part, see residual_sq
    lift: np.ndarray | None = None  # values on all trial dofs (masked entries only)
    f: object = None
    u0: object = None
    BT: sp.csr_matrix = field(default=None, repr=False)

    def __post_init__(self):
        if self.B.shape[1] != self.trial.n or self.B.shape[0] != self.test.n:
            raise InvalidArgument("dimension mismatch between B and the spaces")
        if self.G.n != self.test.n:
            raise InvalidArgument("preconditioner does not match the test space")
        self.BT = self.B.T.tocsr()
        self.rhs = self.BT @ self.G.apply(self.f_vec) + self.init_vec

    @property
    def n(self):
        return self.trial.n

    def apply(self, u):
        return self.BT @ self.G.apply(self.B @ u) + self.trace_mass @ u

    def residual_sq(self, u):
        """eta^2(u) = ||B u - f||_G^2 + ||u(0) - u0||^2 (global)."""
        y = self.B @ u - self.f_vec
        return float(y @ self.G.apply(y)) + self.trace_sq(u)

    def trace_sq(self, u):
        return float(u @ (self.trace_mass @ u) - 2 * self.init_vec @ u + self.init_sq)

    def full(self, u):
        """Coefficients on all trial dofs (free part plus lifting)."""
        out = np.zeros(self.trial.n_all) if self.lift is None else self.lift.copy()
        out[self.trial.free] = u
        return out

    def dense(self):
        """Dense A_h (small problems only)."""
        return np.column_stack([self.apply(e) for e in np.eye(self.n)])


def build_system(trial, test, G, f, u0, lift_fn=None, quad=None, u0_points=None):
    """Assemble the Schur system.

    lift_fn(t, x) gives lateral Dirichlet data; the lifting is its nodal
    interpolant on the lateral trial nodes.
    """
    if trial.mesh is not test.mesh or trial.partition != test.partition:
        raise InvalidArgument("trial and test spaces live on different partitions")
    B_all = assemble_B(trial, test, all_trial=True)
    B = B_all[:, trial.free].tocsr()
    g0_all, M0, tr = assemble_trace(trial, all_dofs=True)
    g0 = g0_all[:, trial.free]
    trace_mass = (g0.T @ M0 @ g0).tocsr()
    f_vec = assemble_load(test, f, quad)
    tl = trace_load(trial, u0, u0_points)
    init_vec = g0.T @ tl
    # ||u0||^2 on the trace partition
    xg, wg = gauss(u0_points or tr.p + 9)
    h = tr.x1 - tr.x0
    xq = tr.x0[:, None] + h[:, None] * xg[None, :]
    u0q = np.asarray(u0(xq), dtype=float) * np.ones_like(xq)
    init_sq = float((u0q ** 2 * wg[None, :] * h[:, None]).sum())
    lift = None
    if lift_fn is not None:
        masked = np.setdiff1d(np.arange(trial.n_all), trial.free)
        lift = np.zeros(trial.n_all)
        nodes = trial.dof_nodes[masked]
        lift[masked] = lift_fn(trial.node_t[nodes], trial.node_x[nodes])
        f_vec = f_vec - B_all @ lift
        gl = g0_all @ lift
        init_vec = init_vec - g0.T @ (M0 @ gl)
        init_sq = init_sq - 2 * float(tl @ gl) + float(gl @ (M0 @ gl))
    return SchurSystem(trial, test, B, G, trace_mass, f_vec, init_vec, init_sq, lift, f, u0)


@dataclass
class LinearSystem:
    """Plain SPD system for generic use of pcg_solve."""
    A: object
    rhs: np.ndarray

    @property
    def n(self):
        return self.rhs.size

    def apply(self, u):
        return self.A @ u


@dataclass
class StopCriterion:
    eps: float = 0.01
    max_iter: int = 500
    eta_provider: object = None
    abs_tol: float | None = None   # alternative: stop when alg_est^2 <= abs_tol


@dataclass
class PCGResult:
    u: np.ndarray
    iterations: int
    alg_est: list
    eta_sq: list
    kappa: float
    converged: bool
    alphas: list = field(default_factory=list)
    betas: list = field(default_factory=list)

    def trace_rows(self):
        rows = []
        for k, (a, e) in enumerate(zip(self.alg_est, self.eta_sq)):
            rows.append((k, a, e, (a * a / e) if e > 0 else float("inf")))
        return rows


def lanczos_kappa(alphas, betas):
    """Condition estimate from the CG coefficients (Lanczos tridiagonal)."""
    k = len(alphas)
    if k == 0:
        return 1.0
    d = np.empty(k)
    e = np.empty(max(k - 1, 0))
    d[0] = 1.0 / alphas[0]
    for j in range(1, k):
        d[j] = 1.0 / alphas[j] + betas[j - 1] / alphas[j - 1]
        e[j - 1] = np.sqrt(betas[j - 1]) / alphas[j - 1]
    lam = sla.eigvalsh_tridiagonal(d, e) if k > 1 else d
    return float(lam[-1] / lam[0])


def pcg_solve(system, K, u_init=None, stop: StopCriterion | None = None):
    """Preconditioned CG with the algebraic-error stopping rule.

    alg_est^2 = r . K r for the residual r = F - A u.  For a SchurSystem the
    estimator eta^2(u) is tracked incrementally; otherwise it comes from
    ``stop.eta_provider`` (or the absolute tolerance is used).
    """
    stop = stop or StopCriterion()
    Kop = K.apply if hasattr(K, "apply") else K
    n = system.n
    u = np.zeros(n) if u_init is None else np.array(u_init, dtype=float)
    if u.shape != (n,):
        raise InvalidArgument("initial iterate has the wrong length")
    schur = isinstance(system, SchurSystem) and stop.eta_provider is None
    if schur:
        y = system.B @ u - system.f_vec
        z = system.G.apply(y)
        tu = system.trace_mass @ u
        r = -(system.BT @ z) + system.init_vec - tu

        def eta_sq():
            return float(y @ z) + float(u @ tu - 2 * system.init_vec @ u + system.init_sq)
    else:
        r = system.rhs - system.apply(u)

        def eta_sq():
            return float(stop.eta_provider(u)) if stop.eta_provider is not None else 1.0
    s = Kop(r)
    rho = float(r @ s)
    alg, etas, alphas, betas = [np.sqrt(max(rho, 0.0))], [eta_sq()], [], []

    def done():
        if stop.abs_tol is not None:
            return rho <= stop.abs_tol
        e = etas[-1]
        if rho <= 0.0:
            return True
        return e > 0 and rho / e <= stop.eps

    it = 0
    converged = done()
    p = s.copy()
    while not converged and it < stop.max_iter:
        if schur:
            qB = system.B @ p
            qz = system.G.apply(qB)
            qt = system.trace_mass @ p
            Ap = system.BT @ qz + qt
        else:
            Ap = system.apply(p)
        pAp = float(p @ Ap)
        if pAp <= 1e-14 * float(p @ p):
            raise NumericalBreakdown(f"non-positive curvature p^T A p = {pAp:.3e} at iteration {it}")
        alpha = rho / pAp
        u += alpha * p
        r -= alpha * Ap
        if schur:
            y += alpha * qB
            z += alpha * qz
            tu += alpha * qt
        s = Kop(r)
        rho_new = float(r @ s)
        beta = rho_new / rho
        alphas.append(alpha)
        betas.append(beta)
        rho = rho_new
        p = s + beta * p
        it += 1
        alg.append(np.sqrt(max(rho, 0.0)))
        etas.append(eta_sq())
        converged = done()
    kappa = lanczos_kappa(alphas, betas[:-1] if betas else betas)
    return PCGResult(u, it, alg, etas, kappa, converged, alphas, betas)
