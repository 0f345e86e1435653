"""Scott-Zhang interpolation and the Fortin operator on a bubble test space.

Verification path only: none of this enters the solver.

The bubble test space on a partition is

    V0 (continuous bilinear, zero on the lateral boundary and at t = T)
    + face bubbles  q(t) mu_f(x) on maximal interior spatial faces f
    + volume bubbles B_K r,  r in P_{p_t,p_x-2} + P_{p_t-1,p_x}.

On a face between cells of equal level, q ranges over b(t) P_{p_t}; on a
face with a coarse (master) cell on one side and four finer cells on the
other, q ranges over b(t) P_{4(p_t+1)-1} so that moments against P_{p_t} on
each of the four pieces can be matched.  b is the quadratic bubble of the
face time interval and mu_f the hat function over the two adjacent columns.

The Fortin operator is

    F v = I v + C1 d + C2 (d - C1 d),   d = v - I v,

so that v - F v = (1 - C2)(1 - C1) d has vanishing face and volume moments.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .errors import InvalidArgument
from .forms import QuadratureRule, cell_blocks, cell_points, oscillation_indices
from .mesh import patches
from .poly import gauss
from .space import SpaceSpec, build_dofs


def _legendre01(n, s):
    """Orthonormal Legendre polynomials of degree < n on [0, 1] (and derivatives)."""
    s = np.asarray(s, dtype=float)
    k = max(n - 1, 0)
    V = np.polynomial.legendre.legvander(2 * s - 1, k)
    scale = np.sqrt(2 * np.arange(k + 1) + 1)
    dV = np.zeros_like(V)
    for j in range(1, k + 1):
        c = np.zeros(j + 1)
        c[j] = 1.0
        dV[..., j] = 2 * np.polynomial.legendre.legval(2 * s - 1, np.polynomial.legendre.legder(c))
    return V[..., :n] * scale[:n], dV[..., :n] * scale[:n]


def composite_points(mesh, cells, n_t, n_x, sub_t=1, sub_x=1):
    """Composite tensor Gauss points on each cell split into sub_t x sub_x pieces.

    Returns t, x, w of shape (ncells, nq) and reference tau, xi of shape (nq,).
    """
    gt, wt = gauss(n_t)
    gx, wx = gauss(n_x)
    tau = ((np.arange(sub_t)[:, None] + gt[None, :]) / sub_t).ravel()
    wtau = np.tile(wt, sub_t) / sub_t
    xi = ((np.arange(sub_x)[:, None] + gx[None, :]) / sub_x).ravel()
    wxi = np.tile(wx, sub_x) / sub_x
    TT = np.repeat(tau, xi.size)
    XX = np.tile(xi, tau.size)
    W = np.outer(wtau, wxi).ravel()
    t0, t1 = mesh.t_bounds(cells)
    x0, x1 = mesh.x_bounds(cells)
    t = t0[:, None] + (t1 - t0)[:, None] * TT[None, :]
    x = x0[:, None] + (x1 - x0)[:, None] * XX[None, :]
    w = ((t1 - t0) * (x1 - x0))[:, None] * W[None, :]
    return t, x, w, TT, XX


# ------------------------------------------------------------ Scott-Zhang
@dataclass
class SZOperator:
    """Scott-Zhang projector onto a continuous bilinear space.

    S_j is the lowest-id leaf having node j as a vertex; the dual weight is
    the L2(S_j)-biorthogonal partner of the local vertex basis function.
    """
    target: object
    cell_of: np.ndarray      # position (into target.cells) of S_j per free dof
    vertex_of: np.ndarray    # local vertex index of node j in S_j
    dual: np.ndarray         # (4, 4) reference dual coefficients: psi*_a = sum_b dual[a, b] L_b / |K|

    @classmethod
    def build(cls, target):
        if (target.spec.p_t, target.spec.p_x) != (1, 1):
            raise InvalidArgument("Scott-Zhang target must be the bilinear space")
        cells = target.cells
        nloc = target.nloc
        node_pos = np.full(target.node_t.size, -1, dtype=np.int64)
        node_loc = np.zeros(target.node_t.size, dtype=np.int64)
        order = np.argsort(cells, kind="stable")          # lowest id first
        for c in order[::-1]:
            node_pos[target.local_nodes[c]] = c
            node_loc[target.local_nodes[c]] = np.arange(nloc)
        fn = target.free_nodes
        if (node_pos[fn] < 0).any():
            raise InvalidArgument("free node without a cell")
        Mt = np.array([[1 / 3, 1 / 6], [1 / 6, 1 / 3]])
        dual = np.linalg.inv(np.kron(Mt, Mt))
        return cls(target, node_pos[fn], node_loc[fn], dual)

    def dual_values(self, tau, xi):
        """psi*_a(tau, xi) * |K| on the reference cell, shape (npts, 4)."""
        L = np.stack([(1 - tau) * (1 - xi), (1 - tau) * xi, tau * (1 - xi), tau * xi], axis=1)
        return L @ self.dual.T

    def check_biorthogonality(self, n=4):
        g, w = gauss(n)
        tau = np.repeat(g, n)
        xi = np.tile(g, n)
        ww = np.repeat(w, n) * np.tile(w, n)
        L = np.stack([(1 - tau) * (1 - xi), (1 - tau) * xi, tau * (1 - xi), tau * xi], axis=1)
        D = self.dual_values(tau, xi)
        return float(np.abs((D * ww[:, None]).T @ L - np.eye(4)).max())

    def matrix(self, tau, xi, w):
        """Sparse (n_free x ncells*nq) map from point values to coefficients.

        Points are the same reference points on every cell, with physical
        weights w of shape (ncells, nq).
        """
        nq = tau.size
        D = self.dual_values(tau, xi)                       # (nq, 4)
        area = self.target.mesh.h_t(self.target.cells) * self.target.mesh.h_x(self.target.cells)
        c = self.cell_of
        vals = D[:, self.vertex_of].T * w[c] / area[c][:, None]
        rows = np.repeat(np.arange(c.size), nq)
        cols = (c[:, None] * nq + np.arange(nq)[None, :]).ravel()
        return sp.csr_matrix((vals.ravel(), (rows, cols)), shape=(c.size, self.target.cells.size * nq))


def _vertex_variant_mask(target, variant):
    if variant not in ("plain", "zero_at_T", "zero_at_0"):
        raise InvalidArgument("variant must be 'plain', 'zero_at_T' or 'zero_at_0'")
    t = target.node_t[target.free_nodes]
    keep = np.ones(t.size, dtype=bool)
    tol = 1e-12 * target.mesh.T
    if variant == "zero_at_T":
        keep &= np.abs(t - target.mesh.T) > tol
    elif variant == "zero_at_0":
        keep &= np.abs(t) > tol
    return keep


def scott_zhang(target, v, variant="plain", sub=0, n_quad=6):
    """Coefficients (over target's free dofs) of I v.

    ``v`` is a vectorized callable v(t, x); ``sub`` levels of composite
    subdivision make the cell integrals exact for piecewise polynomials
    living on a partition refined ``sub`` times.
    """
    op = SZOperator.build(target)
    mesh = target.mesh
    t, x, w, tau, xi = composite_points(mesh, target.cells, n_quad, n_quad, 4 ** sub, 2 ** sub)
    vals = np.asarray(v(t, x), dtype=float) * np.ones_like(t)
    c = op.matrix(tau, xi, w) @ vals.ravel()
    # nodes on the lateral boundary use a 1D dual on the lateral side of S_j
    xs = target.node_x[target.free_nodes]
    tol = 1e-12 * (mesh.b - mesh.a)
    lat = np.flatnonzero((np.abs(xs - mesh.a) <= tol) | (np.abs(xs - mesh.b) <= tol))
    if lat.size:
        g, gw = gauss(n_quad)
        m = 4 ** sub
        s = ((np.arange(m)[:, None] + g[None, :]) / m).ravel()
        sw = np.tile(gw / m, m)
        d1 = np.array([[4.0, -2.0], [-2.0, 4.0]])
        cells = target.cells[op.cell_of[lat]]
        t0, t1 = mesh.t_bounds(cells)
        k = op.vertex_of[lat] // 2                       # 0: lower time vertex, 1: upper
        dual = d1[k, 0][:, None] * (1 - s)[None, :] + d1[k, 1][:, None] * s[None, :]
        tt = t0[:, None] + (t1 - t0)[:, None] * s[None, :]
        xx = np.broadcast_to(xs[lat][:, None], tt.shape)
        fv = np.asarray(v(tt, xx), dtype=float) * np.ones_like(tt)
        c[lat] = (dual * fv * sw[None, :]).sum(axis=1)
    c[~_vertex_variant_mask(target, variant)] = 0.0
    return c


# ------------------------------------------------------------ bubble space
@dataclass
class Face:
    x: float
    t0: float
    t1: float
    left: np.ndarray     # positions of the cells on the left (sorted by time)
    right: np.ndarray
    hl: float
    hr: float
    pieces: np.ndarray   # (npieces, 2) time intervals of the finer side
    nbasis: int


class BubbleTestSpace:
    """Lowest-order conforming part plus face and volume bubbles for trial degree p."""

    def __init__(self, mesh, i, p):
        self.mesh, self.partition = mesh, i
        self.p_t, self.p_x = p
        self.V0 = build_dofs(mesh, i, SpaceSpec.test(1, 1))
        self.cells = self.V0.cells
        self._build_faces()
        self.vol_idx = oscillation_indices(self.p_t, self.p_x)
        self.n_vol_loc = len(self.vol_idx)
        self.n0 = self.V0.n
        self.n_face = int(sum(f.nbasis for f in self.faces))
        self.face_offset = np.r_[0, np.cumsum([f.nbasis for f in self.faces])].astype(np.int64)
        self.n_vol = self.n_vol_loc * self.cells.size
        self.n = self.n0 + self.n_face + self.n_vol
        self._norms()

    # -------------------------------------------------------------- faces
    def _build_faces(self):
        mesh, cells = self.mesh, self.cells
        index = mesh.leaf_index(self.partition)
        own, nb = mesh.face_neighbors(index, cells, "x+")
        pos_of = {int(c): k for k, c in enumerate(cells)}
        groups = {}
        for o, n in zip(own.tolist(), nb.tolist()):
            groups.setdefault(o, []).append(n)
        # faces where a fine left side meets a coarse right cell show up as
        # several owners sharing one neighbour; collect by face key instead
        faces = {}
        t0s, t1s = mesh.t_bounds(cells)
        x0s, x1s = mesh.x_bounds(cells)
        for o, nbrs in groups.items():
            po = pos_of[o]
            for n in nbrs:
                pn = pos_of[n]
                lo = min(t0s[po], t0s[pn])
                hi = max(t1s[po], t1s[pn])
                key = (round(float(x1s[po]) / mesh.dx0 * 2 ** 40), round(lo / mesh.dt0 * 4 ** 20))
                f = faces.setdefault(key, {"x": float(x1s[po]), "t0": lo, "t1": hi, "L": set(), "R": set()})
                f["t0"] = min(f["t0"], lo)
                f["t1"] = max(f["t1"], hi)
                f["L"].add(po)
                f["R"].add(pn)
        out = []
        for key in sorted(faces):
            f = faces[key]
            L = np.array(sorted(f["L"], key=lambda k: t0s[k]), dtype=np.int64)
            R = np.array(sorted(f["R"], key=lambda k: t0s[k]), dtype=np.int64)
            fine = L if L.size >= R.size else R
            pieces = np.stack([t0s[fine], t1s[fine]], axis=1)
            if L.size > 1 and R.size > 1:
                raise InvalidArgument("face with refined cells on both sides")
            nb = (self.p_t + 1) * pieces.shape[0]
            out.append(Face(f["x"], f["t0"], f["t1"], L, R,
                            float(x1s[L[0]] - x0s[L[0]]), float(x1s[R[0]] - x0s[R[0]]), pieces, nb))
        self.faces = out
        # cell -> list of (face index, side) with side -1 left of face, +1 right
        self.cell_faces = [[] for _ in range(cells.size)]
        for k, f in enumerate(out):
            for c in f.left:
                self.cell_faces[c].append((k, -1))
            for c in f.right:
                self.cell_faces[c].append((k, +1))

    def _face_q(self, f: Face, t, deriv=0):
        """Time factors q_m(t) (or derivatives) of face f, shape (npts, nbasis)."""
        h = f.t1 - f.t0
        s = (np.asarray(t, dtype=float) - f.t0) / h
        P, dP = _legendre01(f.nbasis, s)
        b = s * (1 - s)
        if deriv == 0:
            return b[:, None] * P
        db = 1 - 2 * s
        return (db[:, None] * P + b[:, None] * dP) / h

    def _face_mu(self, f: Face, x, deriv=0):
        x = np.asarray(x, dtype=float)
        left = x <= f.x
        if deriv == 0:
            return np.where(left, (x - (f.x - f.hl)) / f.hl, ((f.x + f.hr) - x) / f.hr)
        return np.where(left, 1.0 / f.hl, -1.0 / f.hr)

    def _norms(self):
        g, w = gauss(4 * (self.p_t + 1) + 4)
        self.face_norm = np.zeros(self.n_face)
        for k, f in enumerate(self.faces):
            t = f.t0 + (f.t1 - f.t0) * g
            q = self._face_q(f, t)
            nq = ((q ** 2) * (w * (f.t1 - f.t0))[:, None]).sum(axis=0)
            nmu = (f.hl + f.hr) / 3.0
            self.face_norm[self.face_offset[k]:self.face_offset[k + 1]] = np.sqrt(nq * nmu)
        gt, wt = gauss(self.p_t + 4)
        gx, wx = gauss(self.p_x + 4)
        tau = np.repeat(gt, gx.size)
        xi = np.tile(gx, gt.size)
        ww = np.repeat(wt, gx.size) * np.tile(wx, gt.size)
        B = self._vol_ref(tau, xi)
        ref = np.sqrt(((B ** 2) * ww[:, None]).sum(axis=0))
        area = self.mesh.h_t(self.cells) * self.mesh.h_x(self.cells)
        self.vol_norm = (np.sqrt(area)[:, None] * ref[None, :]).ravel()

    def _vol_ref(self, tau, xi, deriv=(0, 0)):
        """Reference volume bubbles B r_i at (tau, xi), shape (npts, n_vol_loc)."""
        Lt, dLt = _legendre01(self.p_t + 1, tau)
        Lx, dLx = _legendre01(self.p_x + 1, xi)
        bt, dbt = tau * (1 - tau), 1 - 2 * tau
        bx, dbx = xi * (1 - xi), 1 - 2 * xi
        out = np.empty((np.size(tau), self.n_vol_loc))
        for k, (a, b) in enumerate(self.vol_idx):
            ft = bt * Lt[:, a] if deriv[0] == 0 else dbt * Lt[:, a] + bt * dLt[:, a]
            fx = bx * Lx[:, b] if deriv[1] == 0 else dbx * Lx[:, b] + bx * dLx[:, b]
            out[:, k] = ft * fx
        return out

    # ---------------------------------------------------------- evaluation
    def basis_matrix(self, t, x, deriv=(0, 0)):
        """Sparse (npts x n) matrix of all basis functions at the points."""
        t = np.asarray(t, dtype=float).ravel()
        x = np.asarray(x, dtype=float).ravel()
        pos, tau, xi = self.V0.locate(t, x)
        blocks = [self.V0.basis_on_cells(pos, tau, xi, deriv)]
        # face bubbles
        rows, cols, vals = [], [], []
        for c in np.unique(pos):
            sel = np.flatnonzero(pos == c)
            for k, side in self.cell_faces[c]:
                f = self.faces[k]
                q = self._face_q(f, t[sel], deriv[0])
                mu = self._face_mu(f, x[sel], deriv[1])
                if side == +1:
                    mu = np.where(x[sel] >= f.x, mu, 0.0) if deriv[1] == 0 else np.where(x[sel] >= f.x, -1.0 / f.hr, 0.0)
                else:
                    mu = np.where(x[sel] <= f.x, mu, 0.0) if deriv[1] == 0 else np.where(x[sel] <= f.x, 1.0 / f.hl, 0.0)
                off = self.face_offset[k]
                val = q * mu[:, None] / self.face_norm[off:off + f.nbasis][None, :]
                rows.append(np.repeat(sel, f.nbasis))
                cols.append(np.tile(np.arange(off, off + f.nbasis), sel.size))
                vals.append(val.ravel())
        if rows:
            Fm = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                               shape=(t.size, self.n_face))
        else:
            Fm = sp.csr_matrix((t.size, self.n_face))
        blocks.append(Fm)
        # volume bubbles
        B = self._vol_ref(tau, xi, deriv)
        cells = self.cells[pos]
        scale = np.ones(t.size)
        if deriv[0]:
            scale = scale / self.mesh.h_t(cells)
        if deriv[1]:
            scale = scale / self.mesh.h_x(cells)
        colv = pos[:, None] * self.n_vol_loc + np.arange(self.n_vol_loc)[None, :]
        B = B * scale[:, None] / self.vol_norm[colv]
        Vm = sp.csr_matrix((B.ravel(), (np.repeat(np.arange(t.size), self.n_vol_loc), colv.ravel())),
                           shape=(t.size, self.n_vol))
        blocks.append(Vm)
        return sp.hstack(blocks).tocsr()

    def eval(self, coeffs, t, x, deriv=(0, 0)):
        shape = np.shape(t)
        return (self.basis_matrix(t, x, deriv) @ np.asarray(coeffs, dtype=float)).reshape(shape)

    def callable(self, coeffs):
        return lambda t, x: self.eval(coeffs, t, x)


# ------------------------------------------------------------ Fortin
class FortinOperator:
    """Linear map from point values of v to coefficients of F v in a BubbleTestSpace.

    ``sub`` is the number of refinement levels separating the partition of
    the inputs from the target partition (for exact composite quadrature).
    """

    def __init__(self, space: BubbleTestSpace, sub=1):
        self.space = space
        mesh, cells = space.mesh, space.cells
        p_t = space.p_t
        self.sub = sub
        # volume points (shared by Scott-Zhang and C2)
        nt, nx = 4 * (p_t + 1) + 4, space.p_x + 6
        t, x, w, tau, xi = composite_points(mesh, cells, nt, nx, 4 ** sub, 2 ** sub)
        self.vt, self.vx, self.vw = t, x, w
        self.sz = SZOperator.build(space.V0)
        S = self.sz.matrix(tau, xi, w)
        self.nvp = t.size
        # face points
        g, wg = gauss(nt)
        ft, fx, fw, fpiece = [], [], [], []
        ns = 4 ** (sub + 1)
        for k, f in enumerate(space.faces):
            for j, (a, b) in enumerate(f.pieces):
                s = ((np.arange(ns)[:, None] + g[None, :]) / ns).ravel()
                ft.append(a + (b - a) * s)
                fx.append(np.full(s.size, f.x))
                fw.append(np.tile(wg, ns) / ns * (b - a))
                fpiece.append(np.full(s.size, k * 1000 + j))
        self.ft = np.concatenate(ft) if ft else np.zeros(0)
        self.fx = np.concatenate(fx) if fx else np.zeros(0)
        fw = np.concatenate(fw) if fw else np.zeros(0)
        self.nfp = self.ft.size
        # C1: per face, moments of delta on each piece against Legendre P_{p_t}
        start = 0
        Qf = space.basis_matrix(self.ft, self.fx).tocsc()[:, space.n0:space.n0 + space.n_face] if self.nfp else None
        C1 = np.zeros((space.n_face, self.nfp)) if self.nfp < 200000 else None
        for k, f in enumerate(space.faces):
            npts = f.pieces.shape[0] * ns * g.size
            idx = np.arange(start, start + npts)
            start += npts
            Mom = np.zeros((f.nbasis, npts))
            for j, (a, b) in enumerate(f.pieces):
                loc = idx[j * ns * g.size:(j + 1) * ns * g.size] - idx[0]
                s = (self.ft[idx[loc]] - a) / (b - a)
                P, _ = _legendre01(p_t + 1, s)
                Mom[j * (p_t + 1):(j + 1) * (p_t + 1), loc] = (P * fw[idx[loc]][:, None]).T
            off = space.face_offset[k]
            A = Mom @ Qf[idx][:, off:off + f.nbasis].toarray()
            C1[off:off + f.nbasis, idx] = np.linalg.solve(A, Mom)
        self.C1 = sp.csr_matrix(C1) if C1 is not None else sp.csr_matrix((0, 0))
        # C2: per cell, moments against the Legendre tensor space
        Lt, _ = _legendre01(p_t + 1, tau)
        Lx, _ = _legendre01(space.p_x + 1, xi)
        R = np.stack([Lt[:, a] * Lx[:, b] for a, b in space.vol_idx], axis=1)   # (nq, m)
        Bref = space._vol_ref(tau, xi)                                         # (nq, m)
        m = space.n_vol_loc
        blocks = []
        for c in range(cells.size):
            Mom = (R * w[c][:, None]).T                                         # (m, nq)
            A = Mom @ (Bref / space.vol_norm[c * m:(c + 1) * m][None, :])
            blocks.append(np.linalg.solve(A, Mom))
        self.C2 = sp.block_diag(blocks, format="csr") if blocks else sp.csr_matrix((0, 0))
        # evaluation of the lower parts at the points
        self.S = S
        self.E0_v = space.V0.basis_at(t.ravel(), x.ravel())
        self.E0_f = space.V0.basis_at(self.ft, self.fx) if self.nfp else sp.csr_matrix((0, space.n0))
        Bv = space.basis_matrix(t.ravel(), x.ravel())
        self.Ef_v = Bv[:, space.n0:space.n0 + space.n_face]
        self.keep = _vertex_variant_mask(space.V0, "zero_at_T")

    @property
    def points(self):
        """All evaluation points: volume points first, then face points."""
        return np.concatenate([self.vt.ravel(), self.ft]), np.concatenate([self.vx.ravel(), self.fx])

    def apply_values(self, vals):
        """Coefficients of F v from values at ``points`` (vector or matrix columns)."""
        vals = np.asarray(vals, dtype=float)
        vv, vf = vals[:self.nvp], vals[self.nvp:]
        cI = self.S @ vv
        cI = cI * (self.keep[:, None] if cI.ndim == 2 else self.keep)
        d_f = vf - self.E0_f @ cI
        a = self.C1 @ d_f
        d_v = vv - self.E0_v @ cI - self.Ef_v @ a
        b = self.C2 @ d_v
        return np.concatenate([cI, a, b], axis=0)

    def apply(self, v):
        t, x = self.points
        return self.apply_values(np.asarray(v(t, x), dtype=float) * np.ones_like(t))

    def moments(self, vals):
        """Face and volume moments of a function given by values at ``points``."""
        vals = np.asarray(vals, dtype=float)
        return self.C1 @ vals[self.nvp:], self.C2 @ vals[:self.nvp]


def fortin_apply(v, space: BubbleTestSpace, sub=1):
    """Coefficients of F v in ``space`` for a vectorized callable v(t, x)."""
    return FortinOperator(space, sub).apply(v)


def annihilation_defect(mesh, coarse, fine, p, sub=1, n_extra=2):
    """max |b(u_j, v_k - F v_k)| / max |b(u_j, v_k)| over the trial basis u_j on
    partition ``coarse`` and all basis functions v_k of the bubble space on ``fine``.
    """
    Vc = BubbleTestSpace(mesh, coarse, p)
    Vf = BubbleTestSpace(mesh, fine, p)
    F = FortinOperator(Vc, sub)
    pt, px = F.points
    Fv = F.apply_values(Vf.basis_matrix(pt, px).toarray())          # (nc, nf)
    U = build_dofs(mesh, coarse, SpaceSpec.trial(*p))
    leaves = mesh.leaves(fine)
    rule = QuadratureRule(4 * (p[0] + 1) + 2 + n_extra, p[1] + 6 + n_extra)
    t, x, w, _, _ = cell_points(mesh, leaves, rule)
    t, x, w = t.ravel(), x.ravel(), w.ravel()
    Ut, Ux = U.basis_at(t, x, (1, 0)), U.basis_at(t, x, (0, 1))
    Wt = sp.diags(w)
    Bf, Bf_x = Vf.basis_matrix(t, x), Vf.basis_matrix(t, x, (0, 1))
    Bc, Bc_x = Vc.basis_matrix(t, x), Vc.basis_matrix(t, x, (0, 1))
    bv = (Ut.T @ Wt @ Bf + Ux.T @ Wt @ Bf_x).toarray()
    bF = np.asarray(Ut.T @ Wt @ (Bc @ Fv) + Ux.T @ Wt @ (Bc_x @ Fv))
    defect = np.abs(bv - bF).max()
    scale = np.abs(bv).max()
    return defect / scale, defect, scale, Vf.n, U.n


def local_stability_constants(target, W, sub=0):
    """Per-cell sup ||I w||_{L2(K)} / ||w||_{L2(q_K)} over w in the discrete space W.

    ``target`` is the bilinear space receiving I, ``W`` a space on the same
    partition; q_K are the Scott-Zhang element patches.
    """
    mesh = target.mesh
    op = SZOperator.build(target)
    nt = W.spec.p_t + 3
    nx = W.spec.p_x + 3
    t, x, w, tau, xi = composite_points(mesh, target.cells, nt, nx, 4 ** sub, 2 ** sub)
    Ew = W.basis_at(t.ravel(), x.ravel(), all_dofs=False)
    IW = (op.matrix(tau, xi, w) @ Ew).toarray()                        # (n0, nW)
    pidx = patches(mesh, target.partition)
    M1 = np.array([[1 / 3, 1 / 6], [1 / 6, 1 / 3]])
    Tloc = target.cell_expansion()
    TW = W.cell_expansion()
    MW = cell_blocks(W, W, "mass")
    ht, hx = mesh.h_t(target.cells), mesh.h_x(target.cells)
    pos_of = {int(c): k for k, c in enumerate(target.cells)}
    out = np.zeros(target.cells.size)
    for k, K in enumerate(target.cells.tolist()):
        rows = Tloc[k * 4:(k + 1) * 4]
        A = (rows @ IW)                                                 # local coeffs of I w on K
        MK = ht[k] * hx[k] * np.kron(M1, M1)
        num = A.T @ MK @ A
        qpos = [pos_of[c] for c in pidx.q[K]]
        den = np.zeros((W.n, W.n))
        for c in qpos:
            r = TW[c * W.nloc:(c + 1) * W.nloc].toarray()
            den += r.T @ MW[c] @ r
        act = np.flatnonzero((np.abs(num).sum(axis=0) > 0) | (np.abs(den).sum(axis=0) > 0))
        if act.size == 0:
            continue
        N, D = num[np.ix_(act, act)], den[np.ix_(act, act)]
        # restrict to the range of D (functions not vanishing on q_K)
        lam_d, Q = np.linalg.eigh(D)
        keep = lam_d > 1e-12 * lam_d.max()
        Q = Q[:, keep] / np.sqrt(lam_d[keep])
        lam = sla.eigvalsh(Q.T @ N @ Q)
        out[k] = np.sqrt(max(lam.max(), 0.0))
    return out
