"""Additive multilevel preconditioners for the test and trial spaces.

For the lowest-order part the preconditioner is

    G0 g = sum_i sum_{j in J_i} h_{i,j}^{4s} g(psi_{i,j}) / ||psi_{i,j}||^2 psi_{i,j}

over the nested bilinear spaces of the hierarchy (s = 1/2 gives the weight
h^2).  g(psi_{i,j}) is obtained by restricting the fine functional level by
level with the transposed prolongations; the result is accumulated back from
coarse to fine.  Higher-order dofs that do not sit on mesh vertices get the
diagonal scaling h_x^2 / ||phi_j||^2.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .errors import CapacityError, InvalidArgument, InvalidState
from .space import SpaceSpec, bubble_split, build_dofs, prolongation


@dataclass
class LevelData:
    dofs: object
    J: np.ndarray          # selected free indices on this level
    h: np.ndarray          # support spatial diameter per selected node
    norm: np.ndarray       # L2(Q) norm per selected node
    P: sp.csr_matrix | None  # prolongation from the previous level


@dataclass
class LevelNodeSet:
    levels: list = field(default_factory=list)

    @property
    def sizes(self):
        return [lv.J.size for lv in self.levels]


def _level_data(mesh, i, spec):
    cache = mesh.__dict__.setdefault("_level_cache", {})
    key = (i, spec)
    if key in cache:
        return cache[key]
    d = build_dofs(mesh, i, spec)
    if i == 0:
        J = np.arange(d.n)
        P = None
    else:
        new = mesh.born[d.cells] == i
        S = d.support_cells().tocsr()
        touched = np.asarray(S[np.flatnonzero(new)].sum(axis=0)).ravel() > 0
        J = np.flatnonzero(touched)
        P = prolongation(build_dofs(mesh, i - 1, spec), d).tocsr()
    h = d.support_x_diameter()[J]
    norm = np.sqrt(d.mass_diagonal()[J])
    cache[key] = LevelData(d, J, h, norm, P)
    return cache[key]


def build_level_sets(mesh, spec: SpaceSpec, L=None) -> LevelNodeSet:
    """Per-level selections J_i of the bilinear space of ``spec``'s masks."""
    if L is None:
        L = mesh.latest
    low = spec.with_degree(1, 1)
    return LevelNodeSet([_level_data(mesh, i, low) for i in range(L + 1)])


class MultilevelPreconditioner:
    """G_h (test side) or K_h (trial side) on the latest partition."""

    def __init__(self, mesh, spec: SpaceSpec, scale=1.0, s=0.5):
        if not (0.0 < s < 0.75):
            raise InvalidArgument("fractional exponent must lie in (0, 3/4)")
        self.mesh, self.spec, self.scale, self.s = mesh, spec, float(scale), s
        self.partition = mesh.latest
        self._n_partitions = mesh.n_partitions
        self.kind = "G_h" if spec.terminal_zero else "K_h"
        self.dofs = build_dofs(mesh, self.partition, spec)
        self.levels = build_level_sets(mesh, spec, self.partition)
        self.weights = []
        for lv in self.levels.levels:
            w = np.zeros(lv.dofs.n)
            w[lv.J] = lv.h ** (4 * s) / lv.norm ** 2
            self.weights.append(w)
        if (spec.p_t, spec.p_x) == (1, 1):
            self.split = None
            self.embed = None
            self.bubble = np.zeros(0, dtype=np.int64)
            self.bubble_w = np.zeros(0)
        else:
            self.split = bubble_split(self.dofs, check_degree=False)
            self.embed = self.split.embed.tocsr()
            self.embed_T = self.embed.T.tocsr()
            self.bubble = self.split.bubble
            self.bubble_w = self.split.h_x ** 2 / self.split.norm ** 2
        self.n = self.dofs.n

    def _check(self, g):
        if self.mesh.n_partitions != self._n_partitions:
            raise InvalidState("preconditioner was built before the latest refinement")
        g = np.asarray(g, dtype=float)
        if g.shape[0] != self.n:
            raise InvalidArgument("functional has the wrong length")
        return g

    def multilevel(self, r):
        """Apply the additive multilevel part to a functional on bilinear dofs."""
        lv = self.levels.levels
        L = len(lv) - 1
        rs = [None] * (L + 1)
        rs[L] = r
        for i in range(L, 0, -1):
            rs[i - 1] = lv[i].P.T @ rs[i]
        y = self.weights[0][:, None] * rs[0] if rs[0].ndim == 2 else self.weights[0] * rs[0]
        for i in range(1, L + 1):
            w = self.weights[i]
            y = lv[i].P @ y + (w[:, None] * rs[i] if rs[i].ndim == 2 else w * rs[i])
        return y

    def apply(self, g):
        g = self._check(g)
        if self.embed is None:
            return self.scale * self.multilevel(g)
        out = self.scale * (self.embed @ self.multilevel(self.embed_T @ g))
        if g.ndim == 2:
            out[self.bubble] += self.bubble_w[:, None] * g[self.bubble]
        else:
            out[self.bubble] += self.bubble_w * g[self.bubble]
        return out

    __call__ = apply

    def dense(self):
        """Dense matrix of the operator (small problems only)."""
        return self.apply(np.eye(self.n))

    def multilevel_dense(self):
        n0 = self.levels.levels[-1].dofs.n
        return self.multilevel(np.eye(n0))


def apply_G(handle: MultilevelPreconditioner, g):
    return handle.apply(g)


def apply_K(handle: MultilevelPreconditioner, g):
    return handle.apply(g)


def spectral_check(handle_or_matrix, gram, max_dofs=3000):
    """Extreme eigenvalues and condition number of G R (R the Gram matrix).

    ``handle_or_matrix`` is a preconditioner handle or a dense matrix G.
    """
    R = np.asarray(getattr(gram, "matrix", gram))
    n = R.shape[0]
    if n == 0:
        raise InvalidArgument("empty space")
    if n > max_dofs:
        raise CapacityError(f"{n} dofs exceed the oracle cap {max_dofs}")
    if isinstance(handle_or_matrix, np.ndarray):
        G = handle_or_matrix
    else:
        G = handle_or_matrix.dense()
    C = sla.cholesky(0.5 * (R + R.T), lower=True)
    S = C.T @ G @ C
    lam = sla.eigvalsh(0.5 * (S + S.T))
    return float(lam[0]), float(lam[-1]), float(lam[-1] / lam[0])
