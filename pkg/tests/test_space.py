import numpy as np
import pytest

from conftest import corner_refined, middle_refined
from stfem.mesh import build_initial, close_mesh
from stfem.space import SpaceSpec, bubble_split, build_dofs, prolongation, trace_t0


def test_counts_on_tensor_mesh():
    h = build_initial(1.0, (0.0, 1.0), 1, 1)
    assert build_dofs(h, 0, SpaceSpec.trial(1, 1)).n == 0
    h = build_initial(1.0, (0.0, 1.0), 4, 2)
    U = build_dofs(h, 0, SpaceSpec.trial(1, 1))
    V = build_dofs(h, 0, SpaceSpec.test(1, 1))
    assert U.n_all == 15 and U.n == 5
    assert V.n == 4


@pytest.mark.parametrize("p", [(1, 1), (2, 3), (3, 4)])
def test_polynomial_reproduction(p, rng):
    h = middle_refined()
    D = build_dofs(h, h.latest, SpaceSpec(p[0], p[1], lateral_zero=False))
    t, x = rng.uniform(0, 1, 40), rng.uniform(0, 1, 40)
    for a in range(p[0] + 1):
        for b in range(p[1] + 1):
            g = lambda t, x: t ** a * x ** b
            c = D.interpolate(g, all_dofs=True)
            assert np.allclose(D.eval(c, t, x, all_dofs=True), g(t, x), atol=1e-12)


def test_eval_txy_and_zero(rng):
    h = corner_refined(steps=2)
    D = build_dofs(h, h.latest, SpaceSpec.trial(1, 1))
    t, x = rng.uniform(0, 1, 30), rng.uniform(0, 1, 30)
    c = D.interpolate(lambda t, x: t * x * (1 - x))
    # t*x*(1-x) is not in the (1,1) space; only check zero and bilinear reproduction
    assert np.allclose(D.eval(np.zeros(D.n), t, x), 0.0)
    D2 = build_dofs(h, h.latest, SpaceSpec(1, 1, lateral_zero=False))
    c = D2.interpolate(lambda t, x: t * x, all_dofs=True)
    assert np.allclose(D2.eval(c, t, x, all_dofs=True), t * x, atol=1e-13)


def _one_sided(D, c, pos, t, x):
    """Evaluate using the polynomial of the cell at ``pos`` (exact face coordinates)."""
    t0, t1, x0, x1 = D.cell_geometry()
    tau = (t - t0[pos]) / (t1[pos] - t0[pos])
    xi = (x - x0[pos]) / (x1[pos] - x0[pos])
    return D.basis_on_cells(pos, tau, xi) @ c


@pytest.mark.parametrize("p", [(1, 1), (3, 4)])
def test_continuity_across_hanging_faces(p, rng):
    h = corner_refined(steps=2)
    D = build_dofs(h, h.latest, SpaceSpec.trial(*p))
    c = rng.standard_normal(D.n)
    t0, t1, x0, x1 = D.cell_geometry()
    npts = p[0] * p[1] + 5
    worst = 0.0
    for k in range(D.cells.size):
        if x1[k] < 1.0:
            tt = rng.uniform(t0[k], t1[k], npts)
            xx = np.full(npts, x1[k])
            other, _, _ = D.locate(tt, xx + 1e-9)
            a = _one_sided(D, c, np.full(npts, k), tt, xx)
            worst = max(worst, np.abs(a - _one_sided(D, c, other, tt, xx)).max())
        if t1[k] < 1.0:
            xx = rng.uniform(x0[k], x1[k], npts)
            tt = np.full(npts, t1[k])
            other, _, _ = D.locate(tt + 1e-9, xx)
            a = _one_sided(D, c, np.full(npts, k), tt, xx)
            worst = max(worst, np.abs(a - _one_sided(D, c, other, tt, xx)).max())
    assert worst < 1e-12


def test_masks():
    h = corner_refined(steps=1)
    U = build_dofs(h, h.latest, SpaceSpec.trial(2, 3))
    V = build_dofs(h, h.latest, SpaceSpec.test(2, 3))
    xs = U.node_x[U.free_nodes]
    assert not np.isin(xs, [0.0, 1.0]).any()
    assert not (V.node_t[V.free_nodes] == 1.0).any()
    assert (U.node_t[U.free_nodes] == 1.0).any()


def test_trace(rng):
    h = corner_refined(steps=2)
    U = build_dofs(h, h.latest, SpaceSpec.trial(1, 3))
    tr, g0 = trace_t0(U)
    c = U.interpolate(lambda t, x: x * (1 - x) * (1 + t))
    xs = rng.uniform(0, 1, 20)
    assert np.allclose(tr.eval(g0 @ c, xs), xs * (1 - xs), atol=1e-13)
    c = rng.standard_normal(U.n)
    assert np.allclose(tr.eval(g0 @ c, xs), U.eval(c, np.zeros(20), xs), atol=1e-12)
    c[U.node_t[U.free_nodes] == 0] = 0.0
    assert np.allclose(g0 @ c, 0.0)


def test_bubble_split(rng):
    h = corner_refined(steps=1)
    V = build_dofs(h, h.latest, SpaceSpec.test(3, 4))
    bs = bubble_split(V)
    assert bs.vertex.size == bs.vertex_dofs.n
    assert bs.vertex.size + bs.bubble.size == V.n
    c = np.zeros(V.n)
    c[bs.bubble] = rng.standard_normal(bs.bubble.size)
    low = bs.vertex_dofs
    vt, vx = low.free_t, low.free_x
    assert np.abs(V.eval(c, vt, vx)).max() < 1e-13


def test_prolongation(rng):
    h = build_initial(1.0, (0.0, 1.0), 4, 2)
    close_mesh(h, [int(h.leaves()[3])])
    close_mesh(h, h.leaves())
    spec = SpaceSpec.trial(1, 3)
    D0, D1, D2 = (build_dofs(h, i, spec) for i in range(3))
    c = rng.standard_normal(D0.n)
    P01, P12, P02 = prolongation(D0, D1), prolongation(D1, D2), prolongation(D0, D2)
    t, x = rng.uniform(0, 1, 100), rng.uniform(0, 1, 100)
    assert np.allclose(D2.eval(P02 @ c, t, x), D0.eval(c, t, x), atol=1e-12)
    assert np.allclose(P12 @ (P01 @ c), P02 @ c, atol=1e-13)
    g = lambda t, x: t * x * (1 - x)
    assert np.allclose(P02 @ D0.interpolate(g), D2.interpolate(g), atol=1e-13)
