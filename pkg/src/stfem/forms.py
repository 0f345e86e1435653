"""Assembly of the space-time forms.

    b(u, v) = int_Q d_t u * v + d_x u * d_x v
    <u(0), w(0)>_{L2(Omega)},   int_Q f v,   int_Omega u0 w(0)

Cell matrices are tensor products of 1D reference matrices; hanging-node
constraints are folded in through the cell expansion of each DofSystem.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument
from .poly import gauss, lagrange, ref_matrices
from .space import DofSystem, block_diagonal, local_basis, trace_t0


@dataclass(frozen=True)
class QuadratureRule:
    n_t: int
    n_x: int

    @classmethod
    def for_pair(cls, u: DofSystem, v: DofSystem, extra=0):
        return cls(u.spec.p_t + v.spec.p_t + 2 + extra, u.spec.p_x + v.spec.p_x + 2 + extra)

    @classmethod
    def for_data(cls, v: DofSystem, extra=4):
        return cls(v.spec.p_t + 1 + extra, v.spec.p_x + 1 + extra)


def cell_points(mesh, cells, rule: QuadratureRule):
    """Tensor Gauss points of every cell.

    Returns t, x, w of shape (ncell, nq) and the reference coordinates
    tau, xi of shape (nq,).
    """
    gt, wt = gauss(rule.n_t)
    gx, wx = gauss(rule.n_x)
    tau = np.repeat(gt, rule.n_x)
    xi = np.tile(gx, rule.n_t)
    wq = np.outer(wt, wx).ravel()
    t0, t1 = mesh.t_bounds(cells)
    x0, x1 = mesh.x_bounds(cells)
    t = t0[:, None] + (t1 - t0)[:, None] * tau[None, :]
    x = x0[:, None] + (x1 - x0)[:, None] * xi[None, :]
    w = ((t1 - t0) * (x1 - x0))[:, None] * wq[None, :]
    return t, x, w, tau, xi


def _same_partition(u: DofSystem, v: DofSystem):
    if u.mesh is not v.mesh or u.partition != v.partition:
        raise InvalidArgument("trial and test spaces live on different partitions")


def cell_blocks(u: DofSystem, v: DofSystem, kind="b"):
    """Per-cell matrices (rows: v local, cols: u local) for one form.

    kind: 'b' full parabolic form, 'dt' time-derivative part, 'dx' spatial
    stiffness part, 'mass' L2 product, 'bt' form with the time derivative on v.
    """
    _same_partition(u, v)
    mesh, cells = u.mesh, u.cells
    ht, hx = mesh.h_t(cells), mesh.h_x(cells)
    Mt, Dt, Kt = ref_matrices(u.spec.p_t, v.spec.p_t)
    Mx, Dx, Kx = ref_matrices(u.spec.p_x, v.spec.p_x)
    blocks = np.zeros((cells.size, v.nloc, u.nloc))
    if kind in ("b", "dt"):
        blocks += hx[:, None, None] * np.kron(Dt, Mx)[None]
    if kind in ("b", "bt", "dx"):
        blocks += (ht / hx)[:, None, None] * np.kron(Mt, Kx)[None]
    if kind == "bt":
        _, Dt2, _ = ref_matrices(v.spec.p_t, u.spec.p_t)
        blocks += hx[:, None, None] * np.kron(Dt2.T, Mx)[None]
    if kind == "mass":
        blocks += (ht * hx)[:, None, None] * np.kron(Mt, Mx)[None]
    return blocks


def assemble_form(u: DofSystem, v: DofSystem, kind="b", u_all=False, v_all=False):
    blk = block_diagonal(cell_blocks(u, v, kind))
    Tv = v.cell_expansion(v_all)
    Tu = u.cell_expansion(u_all)
    return (Tv.T @ blk @ Tu).tocsr()


def assemble_B(trial: DofSystem, test: DofSystem, quad=None, all_trial=False):
    """Rows: free test dofs; columns: free (or all) trial dofs.

    Cell integrals use exact tensor Gauss rules, so ``quad`` only needs to
    be passed for compatibility; it is ignored for polynomial integrands.
    """
    return assemble_form(trial, test, "b", u_all=all_trial)


def assemble_trace(trial: DofSystem, all_dofs=False):
    """(gamma0, M0, trace space) with <u(0), w(0)> = (gamma0 u)^T M0 (gamma0 w)."""
    tr, g0 = trace_t0(trial)
    if all_dofs:
        g0 = tr.gamma0_all
    return g0, tr.mass(), tr


def local_load(v: DofSystem, f, quad: QuadratureRule | None = None):
    """Per-cell vectors int_K f * phi_l (shape (ncell, nloc))."""
    quad = quad or QuadratureRule.for_data(v)
    t, x, w, tau, xi = cell_points(v.mesh, v.cells, quad)
    fv = np.asarray(f(t, x), dtype=float) * np.ones_like(t)
    phi = local_basis(v.spec.p_t, v.spec.p_x, tau, xi)
    return (fv * w) @ phi


def assemble_load(test: DofSystem, f, quad: QuadratureRule | None = None):
    """Vector of int_Q f * psi_j over the free test dofs."""
    loc = local_load(test, f, quad)
    return test.cell_expansion().T @ loc.ravel()


def trace_load(trial: DofSystem, u0, n=None):
    """int_Omega u0 * phi_k over the trace basis at t = 0."""
    _, _, tr = assemble_trace(trial)
    p = tr.p
    xg, wg = gauss(n or p + 1 + 8)
    phi = lagrange(p)(xg)
    h = tr.x1 - tr.x0
    xq = tr.x0[:, None] + h[:, None] * xg[None, :]
    vals = np.asarray(u0(xq), dtype=float) * np.ones_like(xq)
    loc = (vals * wg[None, :] * h[:, None]) @ phi
    out = np.zeros(tr.n)
    np.add.at(out, tr.local, loc)
    return out


def assemble_init(trial: DofSystem, u0, n=None, all_dofs=False):
    """Vector of int_Omega u0 * phi_j(0, .) over the free trial dofs."""
    g0, _, _ = assemble_trace(trial, all_dofs)
    return g0.T @ trace_load(trial, u0, n)


def trace_mismatch(trial: DofSystem, coeffs, u0, n=None, all_dofs=False):
    """Per t=0 cell: int_{K_x} (u_h(0) - u0)^2 dx, and the cell positions."""
    g0, _, tr = assemble_trace(trial, all_dofs)
    c = g0 @ np.asarray(coeffs, dtype=float)
    p = tr.p
    xg, wg = gauss(n or p + 1 + 8)
    phi = lagrange(p)(xg)
    h = tr.x1 - tr.x0
    xq = tr.x0[:, None] + h[:, None] * xg[None, :]
    uh = c[tr.local] @ phi.T
    d = uh - np.asarray(u0(xq), dtype=float) * np.ones_like(xq)
    vals = (d ** 2 * wg[None, :]).sum(axis=1) * h
    pos = np.searchsorted(trial.cells, tr.cells)
    return vals, pos


# ------------------------------------------------------------ oscillation
def _legendre01(n, s):
    """Orthonormal Legendre polynomials of degree < n on [0, 1] at s."""
    V = np.polynomial.legendre.legvander(2 * s - 1, max(n - 1, 0))
    return V * np.sqrt(2 * np.arange(max(n, 1)) + 1)[None, :]


def oscillation_indices(p_t, p_x):
    """Tensor Legendre index pairs spanning P_{p_t-1,p_x} + P_{p_t,p_x-2}."""
    idx = set()
    for a in range(p_t):
        for b in range(p_x + 1):
            idx.add((a, b))
    for a in range(p_t + 1):
        for b in range(p_x - 1):
            idx.add((a, b))
    return sorted(idx)


def data_oscillation(dofs: DofSystem, f, p=None, quad: QuadratureRule | None = None):
    """Per-cell osc^2(K) = h_x^2 * ||f - P_K f||^2_{L2(K)}.

    P_K is the L2(K) projection onto P_{p_t-1,p_x} + P_{p_t,p_x-2}; p defaults
    to the degrees of ``dofs``.
    """
    p_t, p_x = p if p is not None else (dofs.spec.p_t, dofs.spec.p_x)
    quad = quad or QuadratureRule(p_t + 6, p_x + 6)
    mesh, cells = dofs.mesh, dofs.cells
    t, x, w, tau, xi = cell_points(mesh, cells, quad)
    fv = np.asarray(f(t, x), dtype=float) * np.ones_like(t)
    idx = oscillation_indices(p_t, p_x)
    if idx:
        Lt = _legendre01(p_t + 1, tau)
        Lx = _legendre01(p_x + 1, xi)
        Phi = np.stack([Lt[:, a] * Lx[:, b] for a, b in idx], axis=1)
        area = (mesh.h_t(cells) * mesh.h_x(cells))
        # orthonormal on the reference cell: coefficient = mean over cell weights
        wr = w / area[:, None]
        coef = (fv * wr) @ Phi
        resid = fv - coef @ Phi.T
    else:
        resid = fv
    return mesh.h_x(cells) ** 2 * (resid ** 2 * w).sum(axis=1)


def h1x_error(dofs: DofSystem, coeffs, ux, all_dofs=False, quad=None):
    """||d_x(u - u_h)||_{L2(Q)} for an exact spatial derivative ux(t, x)."""
    quad = quad or QuadratureRule(dofs.spec.p_t + 6, dofs.spec.p_x + 6)
    t, x, w, tau, xi = cell_points(dofs.mesh, dofs.cells, quad)
    loc = dofs.local_coeffs(coeffs, all_dofs)
    dphi = local_basis(dofs.spec.p_t, dofs.spec.p_x, tau, xi, (0, 1))
    uhx = (loc @ dphi.T) / dofs.mesh.h_x(dofs.cells)[:, None]
    e = np.asarray(ux(t, x), dtype=float) - uhx
    return float(np.sqrt((e ** 2 * w).sum()))


__all__ = [
    "QuadratureRule", "cell_points", "cell_blocks", "assemble_form", "assemble_B",
    "assemble_trace", "assemble_load", "assemble_init", "trace_load", "trace_mismatch",
    "data_oscillation", "oscillation_indices", "h1x_error", "local_load",
]
