import numpy as np
import pytest
import scipy.linalg as sla
from scipy import integrate

from conftest import corner_refined
from stfem.errors import CapacityError, InvalidArgument
from stfem.forms import assemble_form, cell_blocks
from stfem.fracnorm import (GramMatrix, gram, localized_seminorm_sq, slobodeckij_gram,
                            slobodeckij_seminorm_sq, weighted_terms)
from stfem.mesh import build_initial, patches
from stfem.space import SpaceSpec, block_diagonal, build_dofs


def unit(p_t=1, p_x=1, n_t=1, n_x=1):
    h = build_initial(1.0, (0.0, 1.0), n_t, n_x)
    return build_dofs(h, 0, SpaceSpec(p_t, p_x, lateral_zero=False))


def test_slobodeckij_elementary():
    D = unit()
    one = D.interpolate(lambda t, x: 1 + 0 * t, all_dofs=True)
    assert abs(slobodeckij_seminorm_sq(D, one, all_dofs=True)) < 1e-14
    for a in (1.0, 2.5):
        c = D.interpolate(lambda t, x: a * t + 0 * x, all_dofs=True)
        assert abs(slobodeckij_seminorm_sq(D, c, all_dofs=True) - a * a) < 1e-9 * a * a


def test_slobodeckij_hat_against_adaptive_quadrature():
    D = unit(n_t=2)
    hat = lambda t: 1 - abs(2 * t - 1)
    c = D.interpolate(lambda t, x: hat(t) + 0 * x, all_dofs=True)
    got = slobodeckij_seminorm_sq(D, c, all_dofs=True)
    f = lambda s, t: ((hat(t) - hat(s)) / (t - s)) ** 2 if t != s else 4.0
    ref = 0.0
    for a0, a1 in ((0, 0.5), (0.5, 1)):
        for b0, b1 in ((0, 0.5), (0.5, 1)):
            ref += integrate.dblquad(f, a0, a1, b0, b1, epsabs=1e-13, epsrel=1e-13)[0]
    assert abs(got - ref) < 1e-8


def test_slobodeckij_on_graded_mesh():
    h = corner_refined(steps=2)
    D = build_dofs(h, h.latest, SpaceSpec(1, 1, lateral_zero=False))
    c = D.interpolate(lambda t, x: t * (1 + x), all_dofs=True)
    assert abs(slobodeckij_seminorm_sq(D, c, all_dofs=True) - 7 / 3) < 1e-9


def test_weighted_terms():
    D = unit()
    c = D.interpolate(lambda t, x: 1 - t + 0 * x, all_dofs=True)
    assert abs(weighted_terms(D, c, "T", all_dofs=True) - 0.5) < 1e-9
    c = D.interpolate(lambda t, x: t + 0 * x, all_dofs=True)
    assert abs(weighted_terms(D, c, "t0", all_dofs=True) - 0.5) < 1e-9
    D2 = unit(p_t=2)
    c = D2.interpolate(lambda t, x: t * (1 - t) + 0 * x, all_dofs=True)
    assert abs(weighted_terms(D2, c, "T", all_dofs=True) - 1 / 12) < 1e-9
    c = D.interpolate(lambda t, x: 1 + 0 * t, all_dofs=True)
    with pytest.raises(InvalidArgument):
        weighted_terms(D, c, "T", all_dofs=True)


def test_two_by_two_gram():
    D = unit()
    R = slobodeckij_gram(D, all_dofs=True)
    C = np.stack([D.interpolate(lambda t, x: t + 0 * x, all_dofs=True),
                  D.interpolate(lambda t, x: 1 - t + 0 * x, all_dofs=True)], axis=1)
    assert np.allclose(C.T @ R @ C, [[1, -1], [-1, 1]], atol=1e-9)


def test_gram_properties_and_polarization(rng, tmp_path):
    h = corner_refined(steps=1)
    V = build_dofs(h, h.latest, SpaceSpec.test(1, 1))
    G = gram(V, "V")
    assert np.allclose(G.matrix, G.matrix.T)
    assert np.linalg.eigvalsh(G.matrix).min() > 0
    Kx = assemble_form(V, V, "dx").toarray()
    for _ in range(3):
        c = rng.standard_normal(V.n)
        parts = c @ Kx @ c + slobodeckij_seminorm_sq(V, c) + weighted_terms(V, c, "T")
        assert abs(G.quad(c) - parts) <= 1e-10 * parts
    W = gram(build_dofs(h, h.latest, SpaceSpec.trial(1, 1)), "W")
    assert W.tag == "W" and np.linalg.eigvalsh(W.matrix).min() > 0
    path = tmp_path / "g.bin"
    G.export(path)
    back = GramMatrix.load(path)
    assert np.array_equal(back.matrix, G.matrix)


def test_capacity_and_tag():
    D = unit(n_t=4, n_x=2)
    with pytest.raises(CapacityError):
        gram(D, "V", all_dofs=True, cap=3)
    with pytest.raises(InvalidArgument):
        gram(D, "X")


def test_localized_seminorm(rng):
    h = corner_refined(steps=1)
    D = build_dofs(h, h.latest, SpaceSpec(1, 1, lateral_zero=False))
    c = rng.standard_normal(D.n_all)
    full = slobodeckij_seminorm_sq(D, c, all_dofs=True)
    assert abs(localized_seminorm_sq(D, c, D.cells, all_dofs=True) - full) < 1e-12 * full
    one = D.interpolate(lambda t, x: 1 + 0 * t, all_dofs=True)
    assert abs(localized_seminorm_sq(D, one, D.cells[:5], all_dofs=True)) < 1e-12


def _localization_constant(h):
    D = build_dofs(h, h.latest, SpaceSpec(1, 1, lateral_zero=False))
    R = slobodeckij_gram(D, all_dofs=True)
    P = patches(h)
    blocks = cell_blocks(D, D, "mass") / h.h_t(D.cells)[:, None, None]
    T = D.cell_expansion(all_dofs=True)
    L = (T.T @ block_diagonal(blocks) @ T).toarray()
    for K in D.cells.tolist():
        L += slobodeckij_gram(D, all_dofs=True, cells=P.q_t[K])
    return sla.eigvalsh(R, L)[-1]


def test_temporal_localization_constant_is_stable():
    c0 = _localization_constant(build_initial(1.0, (0.0, 1.0), 4, 2))
    c1 = _localization_constant(corner_refined(steps=2))
    assert c1 <= 2 * c0
