"""Continuous tensor-Lagrange spaces on prism partitions with hanging nodes.

Every leaf carries the (p_t+1) x (p_x+1) equispaced Lagrange nodes; local
node ``a * (p_x + 1) + b`` sits at time fraction a/p_t and space fraction
b/p_x of the cell.  Nodes of finer cells that lie inside the face of a
coarser neighbour without being one of its nodes are constrained to the
coarse polynomial trace.  All remaining nodes are degrees of freedom
("dofs"); boundary masks remove some of those from the free set.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import ConsistencyError, InvalidArgument
from .poly import lagrange, ref_matrices

VERTEX, EDGE_TIME, EDGE_SPACE, INTERIOR = 0, 1, 2, 3
KIND_NAMES = ("vertex", "edge-time", "edge-space", "interior")


@dataclass(frozen=True)
class SpaceSpec:
    p_t: int
    p_x: int
    lateral_zero: bool = True
    terminal_zero: bool = False
    initial_zero: bool = False
    role: str = "trial"

    def __post_init__(self):
        if self.p_t < 1 or self.p_x < 1:
            raise InvalidArgument("polynomial degrees must be >= 1")

    @classmethod
    def trial(cls, p_t, p_x):
        return cls(p_t, p_x, True, False, False, "trial")

    @classmethod
    def test(cls, p_t, p_x):
        return cls(p_t, p_x, True, True, False, "test")

    def with_degree(self, p_t, p_x):
        return SpaceSpec(p_t, p_x, self.lateral_zero, self.terminal_zero,
                         self.initial_zero, self.role)


def local_basis(p_t, p_x, tau, xi, deriv=(0, 0)):
    """Tensor basis values on the reference cell, shape (npts, nloc)."""
    lt, lx = lagrange(p_t), lagrange(p_x)
    ft = lt.deriv(tau) if deriv[0] else lt(tau)
    fx = lx.deriv(xi) if deriv[1] else lx(xi)
    return (ft[:, :, None] * fx[:, None, :]).reshape(len(tau), -1)


def block_diagonal(blocks):
    """Sparse block-diagonal matrix from an array of shape (ncell, r, c)."""
    n, r, c = blocks.shape
    rows = (np.arange(n)[:, None, None] * r + np.arange(r)[None, :, None]) * np.ones((1, 1, c), dtype=np.int64)
    cols = (np.arange(n)[:, None, None] * c + np.arange(c)[None, None, :]) * np.ones((1, r, 1), dtype=np.int64)
    return sp.csr_matrix((blocks.ravel(), (rows.ravel(), cols.ravel())), shape=(n * r, n * c))


class DofSystem:
    """Node enumeration, constraints and masks of one space on one partition."""

    def __init__(self, mesh, i, spec: SpaceSpec):
        mesh._check_partition(i)
        self.mesh, self.partition, self.spec = mesh, i, spec
        p_t, p_x = spec.p_t, spec.p_x
        self.cells = mesh.leaves(i)
        nc = self.cells.size
        self.nloc = (p_t + 1) * (p_x + 1)
        lev = mesh.level[self.cells]
        self.Lmax = L = int(lev.max())
        st = np.int64(1) << (2 * (L - lev))
        sx = np.int64(1) << (L - lev)
        self._ct0 = mesh.it[self.cells] * st * p_t
        self._cx0 = mesh.ix[self.cells] * sx * p_x
        self._cst, self._csx = st, sx
        a = np.repeat(np.arange(p_t + 1), p_x + 1)
        b = np.tile(np.arange(p_x + 1), p_t + 1)
        self._la, self._lb = a, b
        tk = self._ct0[:, None] + a[None, :] * st[:, None]
        xk = self._cx0[:, None] + b[None, :] * sx[:, None]
        keys = np.stack([tk.ravel(), xk.ravel()], axis=1)
        ukeys, inv = np.unique(keys, axis=0, return_inverse=True)
        inv = inv.ravel()
        self.keys = ukeys
        self.local_nodes = inv.reshape(nc, self.nloc)
        N = ukeys.shape[0]
        self.t_unit = mesh.dt0 / (4.0 ** L * p_t)
        self.x_unit = mesh.dx0 / (2.0 ** L * p_x)
        self.node_t = ukeys[:, 0] * self.t_unit
        self.node_x = mesh.a + ukeys[:, 1] * self.x_unit
        # kind of every node, vertex having priority
        corner = ((a == 0) | (a == p_t)) & ((b == 0) | (b == p_x))
        onx = ((b == 0) | (b == p_x)) & ~corner
        ont = ((a == 0) | (a == p_t)) & ~corner
        lk = np.where(corner, VERTEX, np.where(onx, EDGE_TIME, np.where(ont, EDGE_SPACE, INTERIOR)))
        kind = np.full(N, INTERIOR, dtype=np.int64)
        np.minimum.at(kind, inv, np.tile(lk, nc))
        self.node_kind = kind
        # owner cell of each node (first cell listing it)
        owner = np.full(N, nc, dtype=np.int64)
        np.minimum.at(owner, inv, np.repeat(np.arange(nc), self.nloc))
        self.node_owner = owner
        self._build_constraints()
        self._build_masks()

    # ----------------------------------------------------------- construction
    def _build_constraints(self):
        mesh, p_t, p_x = self.mesh, self.spec.p_t, self.spec.p_x
        index = mesh.leaf_index(self.partition)
        slave_ids, master_cells = [], []
        face_local = {
            "t+": self._la == 0, "t-": self._la == p_t,
            "x+": self._lb == 0, "x-": self._lb == p_x,
        }
        for side, sel in face_local.items():
            own, nb = mesh.face_neighbors(index, self.cells, side)
            fine = mesh.level[nb] > mesh.level[own]
            own, nb = own[fine], nb[fine]
            if own.size == 0:
                continue
            po = np.searchsorted(self.cells, own)
            pn = np.searchsorted(self.cells, nb)
            cand = self.local_nodes[pn][:, sel]
            coarse = self.local_nodes[po]
            isin = (cand[:, :, None] == coarse[:, None, :]).any(axis=2)
            r, c = np.nonzero(~isin)
            slave_ids.append(cand[r, c])
            master_cells.append(po[r])
        N = self.keys.shape[0]
        self.constrained = np.zeros(N, dtype=bool)
        if not slave_ids:
            self.W = sp.csr_matrix((N, N))
        else:
            s = np.concatenate(slave_ids)
            m = np.concatenate(master_cells)
            s, first = np.unique(s, return_index=True)
            m = m[first]
            self.constrained[s] = True
            tau = (self.keys[s, 0] - self._ct0[m]) / (self._cst[m] * p_t)
            xi = (self.keys[s, 1] - self._cx0[m]) / (self._csx[m] * p_x)
            if (tau < -1e-12).any() or (tau > 1 + 1e-12).any() or (xi < -1e-12).any() or (xi > 1 + 1e-12).any():
                raise ConsistencyError("hanging node outside its master cell")
            w = local_basis(p_t, p_x, tau, xi)
            w[np.abs(w) < 1e-14] = 0.0
            rows = np.repeat(s, self.nloc)
            cols = self.local_nodes[m].ravel()
            self.W = sp.csr_matrix((w.ravel(), (rows, cols)), shape=(N, N))
            self.W.eliminate_zeros()
        self.dof_nodes = np.flatnonzero(~self.constrained)
        nd = self.dof_nodes.size
        D = sp.csr_matrix((np.ones(nd), (self.dof_nodes, np.arange(nd))), shape=(N, nd))
        E = D
        # masters may themselves be constrained: substitute until stable
        for _ in range(64):
            E_new = (D + self.W @ E).tocsr()
            E_new.eliminate_zeros()
            diff = E_new - E
            E = E_new
            if diff.nnz == 0 or abs(diff).max() == 0:
                break
        else:
            raise ConsistencyError("constraint resolution did not converge")
        self.E_all = E

    def _build_masks(self):
        spec, mesh = self.spec, self.mesh
        keys = self.keys[self.dof_nodes]
        L = self.Lmax
        x_end = (mesh.n_x << L) * spec.p_x
        t_end = (mesh.n_t << (2 * L)) * spec.p_t
        masked = np.zeros(self.dof_nodes.size, dtype=bool)
        if spec.lateral_zero:
            masked |= (keys[:, 1] == 0) | (keys[:, 1] == x_end)
        if spec.terminal_zero:
            masked |= keys[:, 0] == t_end
        if spec.initial_zero:
            masked |= keys[:, 0] == 0
        self.dof_masked = masked
        self.free = np.flatnonzero(~masked)
        self.n = self.free.size
        self.n_all = self.dof_nodes.size
        self.E = self.E_all[:, self.free].tocsr()
        self._T = None
        self._T_all = None

    # ------------------------------------------------------------- accessors
    @property
    def free_nodes(self):
        """Global node ids of the free dofs, in free order."""
        return self.dof_nodes[self.free]

    @property
    def free_t(self):
        return self.node_t[self.free_nodes]

    @property
    def free_x(self):
        return self.node_x[self.free_nodes]

    @property
    def free_kind(self):
        return self.node_kind[self.free_nodes]

    def nodes(self):
        """List of (t, x, kind name) for every dof in enumeration order."""
        n = self.dof_nodes
        return [(float(self.node_t[k]), float(self.node_x[k]), KIND_NAMES[self.node_kind[k]]) for k in n]

    def constraint_table(self):
        """dict slave node id -> list of (master dof node id, weight)."""
        out = {}
        E = self.E_all.tocsr()
        for s in np.flatnonzero(self.constrained):
            row = E.getrow(s)
            out[int(s)] = [(int(self.dof_nodes[c]), float(v)) for c, v in zip(row.indices, row.data)]
        return out

    def cell_expansion(self, all_dofs=False):
        """Sparse map from (free or all) dof coefficients to cell-local ones.

        Row ``c * nloc + l`` holds local node l of the c-th leaf.
        """
        if all_dofs:
            if self._T_all is None:
                self._T_all = self.E_all[self.local_nodes.ravel()].tocsr()
            return self._T_all
        if self._T is None:
            self._T = self.E[self.local_nodes.ravel()].tocsr()
        return self._T

    def local_coeffs(self, coeffs, all_dofs=False):
        c = np.asarray(coeffs, dtype=float)
        return (self.cell_expansion(all_dofs) @ c).reshape(self.cells.size, self.nloc)

    def free_to_all(self, coeffs, masked_values=None):
        out = np.zeros(self.n_all)
        out[self.free] = coeffs
        if masked_values is not None:
            out[~np.isin(np.arange(self.n_all), self.free)] = masked_values
        return out

    # ----------------------------------------------------------- geometry
    def cell_geometry(self):
        t0, t1 = self.mesh.t_bounds(self.cells)
        x0, x1 = self.mesh.x_bounds(self.cells)
        return t0, t1, x0, x1

    def locate(self, t, x):
        """Leaf position (into ``cells``) and reference coordinates of points."""
        mesh = self.mesh
        t = np.asarray(t, dtype=float).ravel()
        x = np.asarray(x, dtype=float).ravel()
        tol_t = 1e-12 * mesh.T
        tol_x = 1e-12 * (mesh.b - mesh.a)
        if ((t < -tol_t) | (t > mesh.T + tol_t) | (x < mesh.a - tol_x) | (x > mesh.b + tol_x)).any():
            raise InvalidArgument("evaluation point outside the space-time cylinder")
        it = np.clip(np.floor(t / mesh.dt0), 0, mesh.n_t - 1).astype(np.int64)
        ix = np.clip(np.floor((x - mesh.a) / mesh.dx0), 0, mesh.n_x - 1).astype(np.int64)
        cell = it * mesh.n_x + ix
        i = self.partition
        for _ in range(mesh.max_level + 2):
            inner = ~((mesh.born[cell] <= i) & (i < mesh.refined_at[cell]))
            if not inner.any():
                break
            c = cell[inner]
            t0, t1 = mesh.t_bounds(c)
            x0, x1 = mesh.x_bounds(c)
            k = np.clip(np.floor(4 * (t[inner] - t0) / (t1 - t0)), 0, 3).astype(np.int64)
            m = np.clip(np.floor(2 * (x[inner] - x0) / (x1 - x0)), 0, 1).astype(np.int64)
            cell[inner] = mesh.child0[c] + 2 * k + m
        pos = np.searchsorted(self.cells, cell)
        t0, t1 = mesh.t_bounds(cell)
        x0, x1 = mesh.x_bounds(cell)
        tau = np.clip((t - t0) / (t1 - t0), 0.0, 1.0)
        xi = np.clip((x - x0) / (x1 - x0), 0.0, 1.0)
        return pos, tau, xi

    def basis_on_cells(self, pos, tau, xi, deriv=(0, 0), all_dofs=False):
        """Sparse (npts x ndofs) matrix of basis values at reference points."""
        pos = np.asarray(pos, dtype=np.int64)
        vals = local_basis(self.spec.p_t, self.spec.p_x, tau, xi, deriv)
        if deriv[0]:
            vals = vals / self.mesh.h_t(self.cells[pos])[:, None] ** deriv[0]
        if deriv[1]:
            vals = vals / self.mesh.h_x(self.cells[pos])[:, None] ** deriv[1]
        npts = len(pos)
        rows = np.repeat(np.arange(npts), self.nloc)
        cols = (pos[:, None] * self.nloc + np.arange(self.nloc)[None, :]).ravel()
        M = sp.csr_matrix((vals.ravel(), (rows, cols)), shape=(npts, self.cells.size * self.nloc))
        return (M @ self.cell_expansion(all_dofs)).tocsr()

    def basis_at(self, t, x, deriv=(0, 0), all_dofs=False):
        pos, tau, xi = self.locate(t, x)
        return self.basis_on_cells(pos, tau, xi, deriv, all_dofs)

    def eval(self, coeffs, t, x, all_dofs=False):
        shape = np.shape(t)
        v = self.basis_at(t, x, all_dofs=all_dofs) @ np.asarray(coeffs, dtype=float)
        return v.reshape(shape)

    def eval_grad(self, coeffs, t, x, all_dofs=False):
        pos, tau, xi = self.locate(t, x)
        c = np.asarray(coeffs, dtype=float)
        return (self.basis_on_cells(pos, tau, xi, (1, 0), all_dofs) @ c,
                self.basis_on_cells(pos, tau, xi, (0, 1), all_dofs) @ c)

    def interpolate(self, g, all_dofs=False):
        """Nodal interpolant of g(t, x) (vectorized callable)."""
        nodes = self.dof_nodes if all_dofs else self.free_nodes
        return np.asarray(g(self.node_t[nodes], self.node_x[nodes]), dtype=float) * np.ones(nodes.size)

    # ------------------------------------------------------- cell matrices
    def mass_diagonal(self):
        """Squared L2(Q) norms of the free basis functions."""
        Mt, _, _ = ref_matrices(self.spec.p_t, self.spec.p_t)
        Mx, _, _ = ref_matrices(self.spec.p_x, self.spec.p_x)
        ht = self.mesh.h_t(self.cells)
        hx = self.mesh.h_x(self.cells)
        ref = np.kron(Mt, Mx)
        T = self.cell_expansion().tocsr()
        out = np.zeros(self.n)
        # chunked over cells to bound the size of the sparse temporaries
        step = 4096
        for c0 in range(0, self.cells.size, step):
            c1 = min(c0 + step, self.cells.size)
            Tc = T[c0 * self.nloc:c1 * self.nloc]
            Y = block_diagonal((ht[c0:c1] * hx[c0:c1])[:, None, None] * ref[None]) @ Tc
            out += np.asarray(Tc.multiply(Y).sum(axis=0)).ravel()
        return out

    def support_x_diameter(self):
        """Spatial extent of the support of each free basis function."""
        T = self.cell_expansion().tocoo()
        cell = T.row // self.nloc
        keep = T.data != 0
        x0, x1 = self.mesh.x_bounds(self.cells)
        lo = np.full(self.n, np.inf)
        hi = np.full(self.n, -np.inf)
        np.minimum.at(lo, T.col[keep], x0[cell[keep]])
        np.maximum.at(hi, T.col[keep], x1[cell[keep]])
        return hi - lo

    def support_cells(self):
        """CSC matrix (cells x free dofs) with nonzeros where a basis function lives."""
        T = self.cell_expansion().tocoo()
        keep = T.data != 0
        C = sp.csc_matrix((np.ones(keep.sum()), (T.row[keep] // self.nloc, T.col[keep])),
                          shape=(self.cells.size, self.n))
        C.data[:] = 1.0
        return C


def build_dofs(mesh, i, spec: SpaceSpec) -> DofSystem:
    """Dof system of ``spec`` on partition i (cached on the hierarchy)."""
    cache = mesh.__dict__.setdefault("_dof_cache", {})
    key = (i, spec)
    if key not in cache:
        cache[key] = DofSystem(mesh, i, spec)
    return cache[key]


# ------------------------------------------------------------------ trace
class TraceSpace:
    """Continuous piecewise P_{p_x} functions on the spatial partition at t = 0."""

    def __init__(self, dofs: DofSystem):
        self.dofs = dofs
        mesh = dofs.mesh
        self.p = dofs.spec.p_x
        bottom = dofs.cells[mesh.it[dofs.cells] == 0]
        x0, x1 = mesh.x_bounds(bottom)
        order = np.argsort(x0)
        self.x0, self.x1 = x0[order], x1[order]
        self.cells = bottom[order]
        at0 = np.flatnonzero(dofs.keys[:, 0] == 0)
        if dofs.constrained[at0].any():
            raise ConsistencyError("hanging node on the initial time slice")
        self.node_x = dofs.node_x[at0]
        self.n = at0.size
        # global dof position -> trace index
        pos_all = -np.ones(dofs.keys.shape[0], dtype=np.int64)
        pos_all[at0] = np.arange(at0.size)
        fn = dofs.free_nodes
        sel = np.flatnonzero(pos_all[fn] >= 0)
        self.gamma0 = sp.csr_matrix((np.ones(sel.size), (pos_all[fn[sel]], sel)),
                                    shape=(self.n, dofs.n))
        an = dofs.dof_nodes
        sel = np.flatnonzero(pos_all[an] >= 0)
        self.gamma0_all = sp.csr_matrix((np.ones(sel.size), (pos_all[an[sel]], sel)),
                                        shape=(self.n, dofs.n_all))
        # local-to-trace map: cell c, local b -> trace index
        xk = dofs.keys[at0, 1]
        hx = (self.x1 - self.x0)
        start = np.searchsorted(self.node_x, self.x0 - 0.25 * hx / self.p)
        self.local = start[:, None] + np.arange(self.p + 1)[None, :]
        del xk

    def mass(self):
        M, _, _ = ref_matrices(self.p, self.p)
        hx = self.x1 - self.x0
        rows = np.repeat(self.local, self.p + 1, axis=1).ravel()
        cols = np.tile(self.local, (1, self.p + 1)).ravel()
        data = (hx[:, None, None] * M[None]).ravel()
        return sp.csr_matrix((data, (rows, cols)), shape=(self.n, self.n))

    def eval(self, coeffs, x):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        k = np.clip(np.searchsorted(self.x0, x, side="right") - 1, 0, self.x0.size - 1)
        xi = np.clip((x - self.x0[k]) / (self.x1[k] - self.x0[k]), 0, 1)
        phi = lagrange(self.p)(xi)
        return (phi * np.asarray(coeffs)[self.local[k]]).sum(axis=1)


def trace_t0(dofs: DofSystem):
    """Trace space at t = 0 and the restriction matrix gamma0 (free dofs -> trace)."""
    tr = TraceSpace(dofs)
    return tr, tr.gamma0


# ------------------------------------------------------------ prolongation
def prolongation(coarse: DofSystem, fine: DofSystem, all_dofs=False):
    """Sparse matrix mapping coarse coefficients to fine ones (same function).

    The fine space may have equal or higher degrees than the coarse one.
    """
    if coarse.mesh is not fine.mesh or coarse.partition > fine.partition:
        raise InvalidArgument("partitions are not nested")
    if coarse.spec.p_t > fine.spec.p_t or coarse.spec.p_x > fine.spec.p_x:
        raise InvalidArgument("coarse space is not contained in the fine space")
    mesh = fine.mesh
    nodes = fine.dof_nodes if all_dofs else fine.free_nodes
    own = fine.cells[fine.node_owner[nodes]]
    anc = mesh.ancestor_in(own, coarse.partition)
    pos = np.searchsorted(coarse.cells, anc)
    if (coarse.cells[np.minimum(pos, coarse.cells.size - 1)] != anc).any():
        raise ConsistencyError("ancestor is not a coarse leaf")
    t0, t1 = mesh.t_bounds(anc)
    x0, x1 = mesh.x_bounds(anc)
    tau = np.clip((fine.node_t[nodes] - t0) / (t1 - t0), 0, 1)
    xi = np.clip((fine.node_x[nodes] - x0) / (x1 - x0), 0, 1)
    P = coarse.basis_on_cells(pos, tau, xi, all_dofs=all_dofs)
    P.data[np.abs(P.data) < 1e-15] = 0.0
    P.eliminate_zeros()
    return P


# ------------------------------------------------------------ bubble split
@dataclass
class BubbleSplit:
    vertex: np.ndarray       # free indices of the vertex part
    bubble: np.ndarray       # free indices of the remainder
    vertex_dofs: DofSystem   # the lowest-order space on the same partition
    embed: sp.csr_matrix     # lowest-order free coeffs -> free coeffs of the space
    h_x: np.ndarray          # support spatial diameter per bubble index
    norm: np.ndarray         # L2(Q) norm per bubble index


def bubble_split(dofs: DofSystem, check_degree=True) -> BubbleSplit:
    """Split the free nodes into lowest-order vertex dofs and the rest."""
    spec = dofs.spec
    if check_degree and (spec.p_t < 3 or spec.p_x < 4) and spec.role == "test":
        raise InvalidArgument("bubble split expects test degrees p_t >= 3, p_x >= 4")
    low = build_dofs(dofs.mesh, dofs.partition, spec.with_degree(1, 1))
    if low.Lmax != dofs.Lmax:
        raise ConsistencyError("level mismatch")
    lk = low.keys[low.free_nodes] * np.array([spec.p_t, spec.p_x])
    hk = dofs.keys[dofs.free_nodes]
    # both key arrays are lexicographically sorted
    code_l = lk[:, 0] * (hk[:, 1].max() + 1) + lk[:, 1]
    code_h = hk[:, 0] * (hk[:, 1].max() + 1) + hk[:, 1]
    is_v = np.isin(code_h, code_l)
    vertex = np.flatnonzero(is_v)
    bubble = np.flatnonzero(~is_v)
    if vertex.size != low.n:
        raise ConsistencyError("vertex dofs do not match the lowest-order space")
    embed = prolongation(low, dofs)
    hx = dofs.support_x_diameter()[bubble]
    nrm = np.sqrt(dofs.mass_diagonal()[bubble])
    return BubbleSplit(vertex, bubble, low, embed, hx, nrm)
