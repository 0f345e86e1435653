"""Dense reference evaluation of fractional-in-time norms.

Slow by design: every Gram matrix is built from explicit double integrals

    |v|^2 = int_Omega int_J int_J |v(t,x) - v(s,x)|^2 / |t - s|^2 ds dt dx,
    int_J ||v(t)||^2 / (T - t) dt,   int_J ||v(t)||^2 / t dt.

Omega is cut into the finest spatial strips of the mesh; on each strip and
x Gauss point, v(., x) is piecewise polynomial over the time intervals of the
leaves crossing that strip.  Interval pairs are integrated by
  * divided differences (same interval),
  * a Duffy split of the corner singularity (touching intervals),
  * plain tensor Gauss (separated intervals).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CapacityError, InvalidArgument
from .forms import assemble_form
from .poly import gauss, lagrange

DEFAULT_CAP = 3000
N_FAR = 20       # Gauss points per direction, separated pairs
N_NEAR = 20      # Gauss points per direction, Duffy triangles


@dataclass
class GramMatrix:
    matrix: np.ndarray
    tag: str

    @property
    def n(self):
        return self.matrix.shape[0]

    def quad(self, c):
        c = np.asarray(c, dtype=float)
        return float(c @ self.matrix @ c)

    def export(self, path):
        """Write header n (int64) followed by the row-major float64 entries."""
        with open(path, "wb") as fh:
            np.array([self.n], dtype=np.int64).tofile(fh)
            np.ascontiguousarray(self.matrix, dtype=np.float64).tofile(fh)

    @staticmethod
    def load(path, tag="V"):
        with open(path, "rb") as fh:
            n = int(np.fromfile(fh, dtype=np.int64, count=1)[0])
            M = np.fromfile(fh, dtype=np.float64, count=n * n).reshape(n, n)
        return GramMatrix(M, tag)


# ------------------------------------------------------------ 1D pieces
def _pair_blocks_far(p, a0, a1, b0, b1):
    """Blocks of int_I int_J (v_I(t) - v_J(s))^2/(t-s)^2 for separated I, J.

    Returns (nI, 2(p+1), 2(p+1)) matrices in the local basis [I nodes, J nodes].
    """
    g, w = gauss(N_FAR)
    L = lagrange(p)(g)                                   # (n, p+1)
    hI, hJ = a1 - a0, b1 - b0
    t = a0[:, None] + hI[:, None] * g[None, :]           # (P, n)
    s = b0[:, None] + hJ[:, None] * g[None, :]
    d = 1.0 / (t[:, :, None] - s[:, None, :])            # (P, n, n)
    W = (hI * hJ)[:, None, None] * np.outer(w, w)[None] * d * d
    # sum_k W (phi(t) - psi(s)) (phi(t) - psi(s))^T
    A_tt = np.einsum("pij,ia,ib->pab", W, L, L)
    A_ss = np.einsum("pij,ja,jb->pab", W, L, L)
    A_ts = np.einsum("pij,ia,jb->pab", W, L, L)
    top = np.concatenate([A_tt, -A_ts], axis=2)
    bot = np.concatenate([-A_ts.transpose(0, 2, 1), A_ss], axis=2)
    return np.concatenate([top, bot], axis=1)


def _duffy_points():
    """Points (u, v) on [0,1]^2 and weights for integrands bounded at (0, 0)."""
    g, w = gauss(N_NEAR)
    r = np.repeat(g, g.size)
    q = np.tile(g, g.size)
    wt = np.repeat(w, g.size) * np.tile(w, g.size) * r
    u = np.concatenate([r, r * q])
    v = np.concatenate([r * q, r])
    return u, v, np.concatenate([wt, wt])


def _pair_blocks_touch(p, a0, m, b1):
    """Blocks for I = [a0, m], J = [m, b1] (touching at m)."""
    u, v, wq = _duffy_points()
    hI, hJ = m - a0, b1 - m
    tau = 1.0 - u                   # t = m - hI u
    sig = v                         # s = m + hJ v
    L = lagrange(p)
    Lt, Ls = L(tau), L(sig)
    dist = hI[:, None] * u[None, :] + hJ[:, None] * v[None, :]   # s - t > 0
    W = (hI * hJ)[:, None] * wq[None, :] / dist ** 2
    R = np.concatenate([np.broadcast_to(Lt, (hI.size,) + Lt.shape),
                        -np.broadcast_to(Ls, (hI.size,) + Ls.shape)], axis=2)
    return np.einsum("pk,pka,pkb->pab", W, R, R)


def _self_blocks(p, h):
    """int_I int_I (v(t)-v(s))^2/(t-s)^2 in the local basis of I."""
    g, w = gauss(p + 2)
    tau = np.repeat(g, g.size)
    sig = np.tile(g, g.size)
    ww = np.repeat(w, g.size) * np.tile(w, g.size)
    D = lagrange(p).divided_difference(tau, sig)            # per unit length
    S = (D * ww[:, None]).T @ D
    return np.ones_like(h)[:, None, None] * S[None]         # scale-invariant


def column_gram(p, t0, t1, mask=None):
    """Slobodeckij Gram of a 1D piecewise polynomial over sorted intervals.

    The local basis of interval k occupies rows k*(p+1) ... k*(p+1)+p.
    ``mask`` restricts the double integral to pairs of selected intervals.
    """
    n = t0.size
    m = p + 1
    S = np.zeros((n * m, n * m))
    sel = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)

    def add(i, j, blk):
        for a, b, B in zip(i, j, blk):
            ia = slice(a * m, a * m + m)
            jb = slice(b * m, b * m + m)
            S[ia, ia] += B[:m, :m]
            S[ia, jb] += B[:m, m:]
            S[jb, ia] += B[m:, :m]
            S[jb, jb] += B[m:, m:]

    idx = np.flatnonzero(sel)
    for k, B in zip(idx, _self_blocks(p, t1[idx] - t0[idx])):
        S[k * m:k * m + m, k * m:k * m + m] += B
    I, J = np.triu_indices(n, 1)
    keep = sel[I] & sel[J]
    I, J = I[keep], J[keep]
    touch = np.isclose(t1[I], t0[J], rtol=0, atol=1e-14 * max(t1.max(), 1.0))
    if touch.any():
        ti, tj = I[touch], J[touch]
        add(ti, tj, 2.0 * _pair_blocks_touch(p, t0[ti], t1[ti], t1[tj]))
    far_i, far_j = I[~touch], J[~touch]
    chunk = 2000
    for c in range(0, far_i.size, chunk):
        fi, fj = far_i[c:c + chunk], far_j[c:c + chunk]
        add(fi, fj, 2.0 * _pair_blocks_far(p, t0[fi], t1[fi], t0[fj], t1[fj]))
    return S


def column_weighted(p, t0, t1, T, which="T"):
    """Diagonal-block Gram of int v(t)^2/(T-t) (or /t) over the intervals.

    The basis function of the endpoint node itself is left out (its
    coefficient must vanish for the integral to exist).
    """
    n, m = t0.size, p + 1
    S = np.zeros((n * m, n * m))
    L = lagrange(p)
    g, w = gauss(N_FAR)
    phi = L(g)
    for k in range(n):
        h = t1[k] - t0[k]
        if which == "T" and abs(t1[k] - T) <= 1e-14 * T:
            # phi_b(t)/(T - t) = -(phi_b(1) - phi_b(tau)) / (h (1 - tau)) when phi_b(1) = 0
            dd = -L.divided_difference(np.ones_like(g), g)
            B = (phi * w[:, None]).T @ dd
            B[:, p] = B[p, :] = 0.0
            B = 0.5 * (B + B.T)
        elif which == "t0" and abs(t0[k]) <= 1e-14 * T:
            dd = L.divided_difference(g, np.zeros_like(g))
            B = (phi * w[:, None]).T @ dd
            B[:, 0] = B[0, :] = 0.0
            B = 0.5 * (B + B.T)
        else:
            t = t0[k] + h * g
            wt = h * w / ((T - t) if which == "T" else t)
            B = (phi * wt[:, None]).T @ phi
        S[k * m:k * m + m, k * m:k * m + m] = B
    return S


# ------------------------------------------------------------ columns
def _columns(dofs, cells_mask=None):
    """Yield (t0, t1, pos, x_q, w_q, mask) for every strip and x Gauss point."""
    mesh, cells = dofs.mesh, dofs.cells
    x0, x1 = mesh.x_bounds(cells)
    t0, t1 = mesh.t_bounds(cells)
    bp = np.unique(np.concatenate([x0, x1]))
    g, w = gauss(dofs.spec.p_x + 1)
    for a, b in zip(bp[:-1], bp[1:]):
        tol = 1e-14 * (mesh.b - mesh.a)
        on = np.flatnonzero((x0 <= a + tol) & (x1 >= b - tol))
        on = on[np.argsort(t0[on])]
        for xq, wq in zip(g, w):
            xx = a + (b - a) * xq
            mask = None if cells_mask is None else cells_mask[on]
            yield t0[on], t1[on], on, xx, (b - a) * wq, mask


def _column_eval(dofs, pos, xx, all_dofs):
    """Sparse map coefficients -> time-node values on the column intervals."""
    mesh = dofs.mesh
    p = dofs.spec.p_t
    x0, x1 = mesh.x_bounds(dofs.cells[pos])
    xi = (xx - x0) / (x1 - x0)
    nodes = lagrange(p).nodes
    P = np.repeat(pos, p + 1)
    tau = np.tile(nodes, pos.size)
    return dofs.basis_on_cells(P, tau, np.repeat(xi, p + 1), all_dofs=all_dofs)


def _n(dofs, all_dofs):
    return dofs.n_all if all_dofs else dofs.n


def _check_cap(dofs, all_dofs, cap):
    if _n(dofs, all_dofs) > cap:
        raise CapacityError(f"{_n(dofs, all_dofs)} unknowns exceed the oracle cap {cap}")


def slobodeckij_gram(dofs, all_dofs=False, cells=None, cap=DEFAULT_CAP):
    """Dense Gram of |.|^2_{H^{1/2}(J; L2(Omega))}, optionally localized to a cell set."""
    _check_cap(dofs, all_dofs, cap)
    N = _n(dofs, all_dofs)
    out = np.zeros((N, N))
    cmask = None
    if cells is not None:
        cmask = np.isin(dofs.cells, np.asarray(list(cells), dtype=np.int64))
    cache = {}
    p = dofs.spec.p_t
    for t0, t1, pos, xx, wq, mask in _columns(dofs, cmask):
        if mask is not None and not mask.any():
            continue
        key = (t0.tobytes(), t1.tobytes(), None if mask is None else mask.tobytes())
        if key not in cache:
            cache[key] = column_gram(p, t0, t1, mask)
        E = _column_eval(dofs, pos, xx, all_dofs)
        out += wq * (E.T @ (E.T @ cache[key].T).T)
    return 0.5 * (out + out.T)


def weighted_gram(dofs, which="T", all_dofs=False, cap=DEFAULT_CAP):
    """Dense Gram of int ||v(t)||^2/(T - t) dt (which='T') or /t (which='t0')."""
    if which not in ("T", "t0"):
        raise InvalidArgument("which must be 'T' or 't0'")
    _check_cap(dofs, all_dofs, cap)
    N = _n(dofs, all_dofs)
    out = np.zeros((N, N))
    cache = {}
    p, T = dofs.spec.p_t, dofs.mesh.T
    for t0, t1, pos, xx, wq, _ in _columns(dofs):
        key = (t0.tobytes(), t1.tobytes())
        if key not in cache:
            cache[key] = column_weighted(p, t0, t1, T, which)
        E = _column_eval(dofs, pos, xx, all_dofs)
        out += wq * (E.T @ (E.T @ cache[key].T).T)
    return 0.5 * (out + out.T)


def gram(dofs, tag="V", all_dofs=False, cap=DEFAULT_CAP) -> GramMatrix:
    """V: ||d_x .||^2 + |.|^2_{H^{1/2}} + int ||.||^2/(T-t);  W: without the weighted term."""
    if tag not in ("V", "W"):
        raise InvalidArgument("tag must be 'V' or 'W'")
    _check_cap(dofs, all_dofs, cap)
    M = assemble_form(dofs, dofs, "dx", all_dofs, all_dofs).toarray()
    M = M + slobodeckij_gram(dofs, all_dofs, cap=cap)
    if tag == "V":
        M = M + weighted_gram(dofs, "T", all_dofs, cap=cap)
    return GramMatrix(0.5 * (M + M.T), tag)


# ------------------------------------------------------------ scalar forms
def slobodeckij_seminorm_sq(dofs, coeffs, all_dofs=False, cap=DEFAULT_CAP):
    c = np.asarray(coeffs, dtype=float)
    return float(c @ slobodeckij_gram(dofs, all_dofs, cap=cap) @ c)


def localized_seminorm_sq(dofs, coeffs, q, all_dofs=False, cap=DEFAULT_CAP):
    """Slobodeckij seminorm with both time points restricted to the cell union q."""
    c = np.asarray(coeffs, dtype=float)
    return float(c @ slobodeckij_gram(dofs, all_dofs, cells=q, cap=cap) @ c)


def _endpoint_values(dofs, c, all_dofs, t_end):
    nodes = dofs.dof_nodes if all_dofs else dofs.free_nodes
    on = np.abs(dofs.node_t[nodes] - t_end) <= 1e-12 * dofs.mesh.T
    return c[on]


def weighted_terms(dofs, coeffs, which="T", all_dofs=False, cap=DEFAULT_CAP):
    """int ||v(t)||^2/(T-t) dt (which='T') or int ||v(t)||^2/t dt (which='t0')."""
    c = np.asarray(coeffs, dtype=float)
    t_end = dofs.mesh.T if which == "T" else 0.0
    ends = _endpoint_values(dofs, c, all_dofs, t_end)
    if ends.size and np.max(np.abs(ends)) > 1e-12 * max(np.max(np.abs(c)), 1.0):
        raise InvalidArgument("function does not vanish at the singular endpoint; the integral diverges")
    return float(c @ weighted_gram(dofs, which, all_dofs, cap=cap) @ c)
