"""Nested partitions of Q = (0, T) x (a, b) into parabolically scaled prisms.

A cell of level l occupies the time slot ``it`` and the space slot ``ix`` of
the level-l tensor grid, i.e.

    t in [it * dt0 / 4**l, (it + 1) * dt0 / 4**l],
    x in [a + ix * dx0 / 2**l, a + (ix + 1) * dx0 / 2**l].

Integer slot indices make every geometric comparison exact.  Refinement
splits a cell into 4 time quarters times 2 space halves; child ``2*k + m``
holds time quarter k and space half m.

Cells are never removed.  Partition i consists of the cells with
``born <= i < refined_at``.  Refinements requested after the last committed
partition go to a pending partition that ``close_mesh`` completes and commits.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConsistencyError, InvalidArgument, InvalidState

NEVER = np.iinfo(np.int64).max
# the 8 neighbour directions (dt, dx) in slot units
_DIRS = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


@dataclass(frozen=True)
class Prism:
    id: int
    level: int
    t_interval: tuple
    x_interval: tuple
    parent: int | None
    children: tuple = ()

    @property
    def h_t(self):
        return self.t_interval[1] - self.t_interval[0]

    @property
    def h_x(self):
        return self.x_interval[1] - self.x_interval[0]


class LeafIndex:
    """Lookup of the leaves of one partition by (level, it, ix)."""

    def __init__(self, mesh: "MeshHierarchy", leaves: np.ndarray):
        self.mesh = mesh
        self.leaves = leaves
        self.by_level = {}
        lev = mesh.level[leaves]
        for l in np.unique(lev):
            ids = leaves[lev == l]
            codes = mesh._code(int(l), mesh.it[ids], mesh.ix[ids])
            order = np.argsort(codes, kind="stable")
            self.by_level[int(l)] = (codes[order], ids[order])
        self.max_level = int(lev.max()) if leaves.size else 0

    def lookup(self, l, it, ix):
        """Leaf id at exactly (l, it, ix), -1 where there is none."""
        it = np.asarray(it, dtype=np.int64)
        out = np.full(it.shape, -1, dtype=np.int64)
        if l not in self.by_level:
            return out
        codes, ids = self.by_level[l]
        c = self.mesh._code(l, it, np.asarray(ix, dtype=np.int64))
        pos = np.searchsorted(codes, c)
        pos_c = np.minimum(pos, codes.size - 1)
        hit = codes[pos_c] == c
        out[hit] = ids[pos_c[hit]]
        return out

    def covering(self, l, it, ix, lowest=0):
        """Leaf of level in [lowest, l] containing the level-l slot, else -1."""
        it = np.asarray(it, dtype=np.int64)
        ix = np.asarray(ix, dtype=np.int64)
        out = np.full(it.shape, -1, dtype=np.int64)
        for m in range(l, lowest - 1, -1):
            todo = out < 0
            if not todo.any():
                break
            s = l - m
            found = self.lookup(m, it[todo] >> (2 * s), ix[todo] >> s)
            out[np.flatnonzero(todo)] = found
        return out


class MeshHierarchy:
    """Append-only store of prisms plus the nested partitions T_0 < T_1 < ..."""

    def __init__(self, T, omega, n_t, n_x):
        a, b = float(omega[0]), float(omega[1])
        if n_t < 1 or n_x < 1 or int(n_t) != n_t or int(n_x) != n_x:
            raise InvalidArgument("n_t and n_x must be positive integers")
        if not (T > 0) or not (b > a):
            raise InvalidArgument("degenerate time interval or spatial domain")
        self.T = float(T)
        self.a, self.b = a, b
        self.n_t, self.n_x = int(n_t), int(n_x)
        self.dt0 = self.T / self.n_t
        self.dx0 = (b - a) / self.n_x
        self.scaling_ratio = self.dt0 / self.dx0 ** 2
        # deepest level for which slot codes fit into int64
        self.max_level = 0
        while self.n_t * self.n_x * 8 ** (self.max_level + 1) < 2 ** 62:
            self.max_level += 1
        n0 = self.n_t * self.n_x
        it, ix = np.divmod(np.arange(n0, dtype=np.int64), self.n_x)
        self.level = np.zeros(n0, dtype=np.int64)
        self.it = it
        self.ix = ix
        self.parent = np.full(n0, -1, dtype=np.int64)
        self.child0 = np.full(n0, -1, dtype=np.int64)
        self.born = np.zeros(n0, dtype=np.int64)
        self.refined_at = np.full(n0, NEVER, dtype=np.int64)
        self.n_partitions = 1
        self._leaf_cache = {}
        self._index_cache = {}

    # ------------------------------------------------------------------ basics
    @property
    def n_cells(self):
        return self.level.size

    @property
    def latest(self):
        return self.n_partitions - 1

    def _code(self, l, it, ix):
        return it * (self.n_x << l) + ix

    def n_slots(self, l):
        return self.n_t << (2 * l), self.n_x << l

    def _check_partition(self, i, allow_pending=False):
        top = self.n_partitions if allow_pending else self.n_partitions - 1
        if not (0 <= i <= top):
            raise InvalidArgument(f"partition index {i} out of range")

    def clear_caches(self, keep=None):
        """Drop cached dof systems and level data; ``keep(partition, spec)`` selects survivors."""
        for name in ("_dof_cache", "_level_cache"):
            cache = self.__dict__.get(name)
            if cache:
                for key in [k for k in cache if keep is None or not keep(*k)]:
                    del cache[key]

    def leaves(self, i=None):
        """Sorted leaf ids of partition ``i`` (default: latest committed)."""
        if i is None:
            i = self.latest
        self._check_partition(i, allow_pending=True)
        if i < self.n_partitions and i in self._leaf_cache:
            return self._leaf_cache[i]
        ids = np.flatnonzero((self.born <= i) & (i < self.refined_at))
        if i < self.n_partitions:
            self._leaf_cache[i] = ids
        return ids

    def leaf_index(self, i=None):
        if i is None:
            i = self.latest
        if i < self.n_partitions and i in self._index_cache:
            return self._index_cache[i]
        idx = LeafIndex(self, self.leaves(i))
        if i < self.n_partitions:
            self._index_cache[i] = idx
        return idx

    def is_leaf(self, K, i=None):
        if i is None:
            i = self.latest
        return bool(self.born[K] <= i < self.refined_at[K])

    def t_bounds(self, cells):
        cells = np.asarray(cells)
        h = self.dt0 / 4.0 ** self.level[cells]
        return self.it[cells] * h, (self.it[cells] + 1) * h

    def x_bounds(self, cells):
        cells = np.asarray(cells)
        h = self.dx0 / 2.0 ** self.level[cells]
        return self.a + self.ix[cells] * h, self.a + (self.ix[cells] + 1) * h

    def h_t(self, cells):
        return self.dt0 / 4.0 ** self.level[np.asarray(cells)]

    def h_x(self, cells):
        return self.dx0 / 2.0 ** self.level[np.asarray(cells)]

    def prism(self, K) -> Prism:
        K = int(K)
        t0, t1 = self.t_bounds([K])
        x0, x1 = self.x_bounds([K])
        c0 = int(self.child0[K])
        children = tuple(range(c0, c0 + 8)) if c0 >= 0 else ()
        par = int(self.parent[K])
        return Prism(K, int(self.level[K]), (float(t0[0]), float(t1[0])),
                     (float(x0[0]), float(x1[0])), None if par < 0 else par, children)

    def ancestor_in(self, cells, i):
        """For each cell, the ancestor (or itself) that is a leaf of partition i."""
        cells = np.array(cells, dtype=np.int64, copy=True)
        for _ in range(self.max_level + 2):
            bad = ~((self.born[cells] <= i) & (i < self.refined_at[cells]))
            if not bad.any():
                return cells
            par = self.parent[cells[bad]]
            if (par < 0).any():
                raise InvalidArgument("cells are not covered by the requested partition")
            cells[bad] = par
        raise ConsistencyError("ancestor search did not terminate")

    # ------------------------------------------------------------- refinement
    def _refine(self, cells):
        """Split the given leaves of the pending partition; returns new ids."""
        cells = np.unique(np.asarray(cells, dtype=np.int64))
        if cells.size == 0:
            return cells
        pend = self.n_partitions
        if ((self.born[cells] > pend) | (self.refined_at[cells] <= pend)).any():
            raise InvalidArgument("only leaves can be refined")
        if self.level[cells].max() + 1 > self.max_level:
            raise InvalidState("maximum refinement depth reached")
        n = cells.size
        first = self.n_cells
        k = np.arange(8)
        lev = np.repeat(self.level[cells] + 1, 8)
        it = (4 * self.it[cells])[:, None] + (k // 2)[None, :]
        ix = (2 * self.ix[cells])[:, None] + (k % 2)[None, :]
        self.level = np.concatenate([self.level, lev])
        self.it = np.concatenate([self.it, it.ravel()])
        self.ix = np.concatenate([self.ix, ix.ravel()])
        self.parent = np.concatenate([self.parent, np.repeat(cells, 8)])
        self.child0 = np.concatenate([self.child0, np.full(8 * n, -1, dtype=np.int64)])
        self.born = np.concatenate([self.born, np.full(8 * n, pend, dtype=np.int64)])
        self.refined_at = np.concatenate([self.refined_at, np.full(8 * n, NEVER, dtype=np.int64)])
        self.child0[cells] = first + 8 * np.arange(n)
        self.refined_at[cells] = pend
        self._leaf_cache.pop(pend, None)
        self._index_cache.pop(pend, None)
        return np.arange(first, first + 8 * n, dtype=np.int64)

    def _grading_violators(self, index, cells):
        """Leaves touching one of ``cells`` whose level is at least 2 lower."""
        cells = np.asarray(cells, dtype=np.int64)
        found = []
        lev = self.level[cells]
        for l in np.unique(lev):
            l = int(l)
            if l < 2:
                continue
            sel = cells[lev == l]
            NT, NX = self.n_slots(l)
            for dt, dx in _DIRS:
                it = self.it[sel] + dt
                ix = self.ix[sel] + dx
                ok = (it >= 0) & (it < NT) & (ix >= 0) & (ix < NX)
                if not ok.any():
                    continue
                hit = index.covering(l, it[ok], ix[ok])
                hit = hit[hit >= 0]
                found.append(hit[self.level[hit] <= l - 2])
        if not found:
            return np.zeros(0, dtype=np.int64)
        return np.unique(np.concatenate(found))

    def face_neighbors(self, index, cells, side):
        """Leaves sharing a face with each of ``cells`` on one side.

        side is one of 't-', 't+', 'x-', 'x+'.  Returns (owner, neighbour)
        arrays listing every adjacent pair.
        """
        cells = np.asarray(cells, dtype=np.int64)
        owners, nbrs = [], []
        axis, step = side[0], (1 if side[1] == "+" else -1)
        lev = self.level[cells]
        for l in np.unique(lev):
            l = int(l)
            sel = cells[lev == l]
            NT, NX = self.n_slots(l)
            it = self.it[sel] + (step if axis == "t" else 0)
            ix = self.ix[sel] + (step if axis == "x" else 0)
            ok = (it >= 0) & (it < NT) & (ix >= 0) & (ix < NX)
            sel, it, ix = sel[ok], it[ok], ix[ok]
            cov = index.covering(l, it, ix)
            owners.append(sel[cov >= 0])
            nbrs.append(cov[cov >= 0])
            # finer neighbours: descend through the slots adjacent to the face
            own, fit, fix = sel[cov < 0], it[cov < 0], ix[cov < 0]
            m = l
            while own.size:
                m += 1
                if m > index.max_level:
                    raise ConsistencyError("face neighbour search fell off the tree")
                if axis == "t":
                    q = 0 if step == 1 else 3
                    fit = np.repeat(4 * fit + q, 2)
                    fix = (2 * fix[:, None] + np.arange(2)[None, :]).ravel()
                    own = np.repeat(own, 2)
                else:
                    q = 0 if step == 1 else 1
                    fit = (4 * fit[:, None] + np.arange(4)[None, :]).ravel()
                    fix = np.repeat(2 * fix + q, 4)
                    own = np.repeat(own, 4)
                hit = index.lookup(m, fit, fix)
                owners.append(own[hit >= 0])
                nbrs.append(hit[hit >= 0])
                keep = hit < 0
                own, fit, fix = own[keep], fit[keep], fix[keep]
        if not owners:
            z = np.zeros(0, dtype=np.int64)
            return z, z
        return np.concatenate(owners), np.concatenate(nbrs)

    def _rule_vi_violators(self, index, cells):
        """Temporally coarser neighbours breaking the common-time-interval rule."""
        bad = []
        for side in ("t-", "t+"):
            own, nb = self.face_neighbors(index, cells, side)
            if own.size == 0:
                continue
            order = np.lexsort((nb, own))
            own, nb = own[order], nb[order]
            lv = self.level[nb]
            start = np.r_[0, np.flatnonzero(np.diff(own)) + 1]
            lmin = np.minimum.reduceat(lv, start)
            lmax = np.maximum.reduceat(lv, start)
            t0, _ = self.t_bounds(nb)
            # same level within a side implies the same time interval only
            # if the slots line up; compare exact slot starts at max level
            L = index.max_level
            tstart = self.it[nb] << (2 * (L - lv))
            smin = np.minimum.reduceat(tstart, start)
            smax = np.maximum.reduceat(tstart, start)
            viol = np.flatnonzero((lmin != lmax) | (smin != smax))
            for g in viol:
                lo, hi = start[g], (start[g + 1] if g + 1 < start.size else own.size)
                grp = nb[lo:hi]
                bad.append(grp[self.level[grp] == self.level[grp].min()])
        if not bad:
            return np.zeros(0, dtype=np.int64)
        return np.unique(np.concatenate(bad))

    # -------------------------------------------------------------- queries
    def neighbors(self, K, i=None):
        if i is None:
            i = self.latest
        if not self.is_leaf(K, i):
            raise InvalidArgument("neighbors requires a leaf of the queried partition")
        index = self.leaf_index(i)
        out = {"temporal": [], "spatial": []}
        for side in ("t-", "t+", "x-", "x+"):
            _, nb = self.face_neighbors(index, [K], side)
            key = "temporal" if side[0] == "t" else "spatial"
            out[key].extend(int(n) for n in np.sort(nb))
        return out


def build_initial(T, omega, n_t, n_x) -> MeshHierarchy:
    """Hierarchy whose only partition is the tensor mesh of n_t x n_x cells."""
    return MeshHierarchy(T, omega, n_t, n_x)


def refine_cell(h: MeshHierarchy, K) -> list:
    """Refine leaf K of the pending partition into its 8 children."""
    K = int(K)
    pend = h.n_partitions
    if not (0 <= K < h.n_cells) or not (h.born[K] <= pend < h.refined_at[K]):
        raise InvalidArgument(f"cell {K} is not a leaf")
    return [int(c) for c in h._refine([K])]


def close_mesh(h: MeshHierarchy, marked) -> int:
    """Refine ``marked`` leaves plus the closure; commit and return the new index.

    Closure: a worklist pass refines every leaf touching a newly created cell
    whose level is two or more below it, and the temporally coarser cells on a
    side whose temporal neighbours do not share one time interval.  Cells are
    processed in ascending id order.
    """
    pend = h.n_partitions
    marked = np.unique(np.asarray(sorted(int(k) for k in marked), dtype=np.int64))
    if marked.size:
        if (marked < 0).any() or (marked >= h.n_cells).any():
            raise InvalidArgument("marked ids out of range")
        leaf = (h.born[marked] <= pend) & (pend < h.refined_at[marked])
        # leaves already split through refine_cell are accepted as well
        done = h.refined_at[marked] == pend
        if not (leaf | done).all():
            raise InvalidArgument("marked cells must be leaves of the latest partition")
        marked = marked[leaf]
    new = h._refine(marked)
    pending_new = np.flatnonzero(h.born == pend)
    work = pending_new if pending_new.size else new
    while work.size:
        index = LeafIndex(h, h.leaves(pend))
        live = work[(h.born[work] <= pend) & (pend < h.refined_at[work])]
        bad = h._grading_violators(index, live)
        if bad.size == 0:
            around = np.unique(np.concatenate([live] + [
                h.face_neighbors(index, live, s)[1] for s in ("t-", "t+")]))
            bad = h._rule_vi_violators(index, around)
        work = h._refine(bad)
    h.n_partitions += 1
    return h.n_partitions - 1


def closure_violations(h: MeshHierarchy, i=None) -> np.ndarray:
    """Cells a closure pass on partition i would refine (empty at a fixed point)."""
    if i is None:
        i = h.latest
    index = h.leaf_index(i)
    leaves = h.leaves(i)
    bad = h._grading_violators(index, leaves)
    return np.union1d(bad, h._rule_vi_violators(index, leaves))


# ------------------------------------------------------------------ patches
@dataclass
class PatchIndex:
    partition: int
    q: dict = field(default_factory=dict)
    q_t: dict = field(default_factory=dict)
    q_t_box: dict = field(default_factory=dict)


def patches(h: MeshHierarchy, i=None) -> PatchIndex:
    """Element patches q_K and temporal patch cylinders q_K^t of partition i.

    q_K is the union of the supports of the continuous bilinear basis
    functions that do not vanish on K; q_K^t is the time cylinder over K_x
    spanned by K_t and the time intervals of K's temporal neighbours.
    """
    from .space import SpaceSpec, build_dofs

    if i is None:
        i = h.latest
    h._check_partition(i)
    leaves = h.leaves(i)
    index = h.leaf_index(i)
    if h._rule_vi_violators(index, leaves).size:
        raise ConsistencyError("temporal neighbours on one side do not share a time interval")
    out = PatchIndex(i)
    t0, t1 = h.t_bounds(leaves)
    pos = {int(K): n for n, K in enumerate(leaves)}
    lo = dict(zip(leaves.tolist(), t0.tolist()))
    hi = dict(zip(leaves.tolist(), t1.tolist()))
    nbr = {int(K): [] for K in leaves}
    for side in ("t-", "t+"):
        own, nb = h.face_neighbors(index, leaves, side)
        for o, n in zip(own.tolist(), nb.tolist()):
            nbr[o].append(n)
            if side == "t-":
                lo[o] = min(lo[o], float(h.t_bounds([n])[0][0]))
            else:
                hi[o] = max(hi[o], float(h.t_bounds([n])[1][0]))
    x0, x1 = h.x_bounds(leaves)
    for n, K in enumerate(leaves.tolist()):
        out.q_t[K] = sorted([K] + nbr[K])
        out.q_t_box[K] = ((lo[K], hi[K]), (float(x0[n]), float(x1[n])))
    # support patches from the bilinear basis without boundary masks
    d = build_dofs(h, i, SpaceSpec(1, 1, lateral_zero=False, terminal_zero=False))
    T = d.cell_expansion().tocsc()
    nloc = d.nloc
    cell_of_row = np.repeat(np.arange(leaves.size), nloc)
    supp = []
    for j in range(T.shape[1]):
        rows = T.indices[T.indptr[j]:T.indptr[j + 1]]
        supp.append(np.unique(cell_of_row[rows]))
    touching = [[] for _ in range(leaves.size)]
    for j, s in enumerate(supp):
        for c in s.tolist():
            touching[c].append(j)
    for n, K in enumerate(leaves.tolist()):
        cells = np.unique(np.concatenate([supp[j] for j in touching[n]]))
        out.q[K] = sorted(leaves[cells].tolist())
    del pos
    return out


# ------------------------------------------------------------- diagnostics
def dump_mesh(h: MeshHierarchy, i, fh):
    """Write one line per leaf: ``id level t0 t1 x0 x1 parent``."""
    leaves = h.leaves(i)
    t0, t1 = h.t_bounds(leaves)
    x0, x1 = h.x_bounds(leaves)
    for n, K in enumerate(leaves.tolist()):
        fh.write("%d %d %.17g %.17g %.17g %.17g %d\n" % (
            K, h.level[K], t0[n], t1[n], x0[n], x1[n], h.parent[K]))


def check_invariants(h: MeshHierarchy) -> dict:
    """Run every structural check on every committed partition.

    Returns a dict of booleans; raises nothing.
    """
    res = {"partition": True, "grading": True, "closure_idempotent": True,
           "rule_vi": True, "nested": True, "complexity": True}
    area = h.T * (h.b - h.a)
    for i in range(h.n_partitions):
        leaves = h.leaves(i)
        s = math.fsum((h.h_t(leaves) * h.h_x(leaves)).tolist())
        if abs(s - area) > 1e-12 * area:
            res["partition"] = False
        index = h.leaf_index(i)
        if h._grading_violators(index, leaves).size:
            res["grading"] = False
        if h._rule_vi_violators(index, leaves).size:
            res["rule_vi"] = False
        if closure_violations(h, i).size:
            res["closure_idempotent"] = False
        if i > 0:
            prev = h.leaves(i - 1)
            anc = h.ancestor_in(leaves, i - 1)
            if not np.isin(anc, prev).all():
                res["nested"] = False
    L = h.latest
    total = h.leaves(0).size + sum(
        int(np.count_nonzero(h.born == i)) for i in range(1, L + 1))
    if total > 2 * h.leaves(L).size:
        res["complexity"] = False
    return res
