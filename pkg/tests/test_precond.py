import numpy as np
import pytest

from conftest import corner_refined
from stfem.errors import CapacityError, InvalidState
from stfem.fracnorm import gram
from stfem.mesh import build_initial, close_mesh
from stfem.precond import MultilevelPreconditioner, apply_G, apply_K, build_level_sets, spectral_check
from stfem.space import SpaceSpec, bubble_split, build_dofs


@pytest.mark.parametrize("spec", [SpaceSpec.test(3, 4), SpaceSpec.trial(1, 3), SpaceSpec.trial(1, 1)])
def test_symmetric_positive_definite(spec, rng):
    h = corner_refined(steps=3)
    H = MultilevelPreconditioner(h, spec)
    assert np.all(H.apply(np.zeros(H.n)) == 0)
    for _ in range(5):
        y, z = rng.standard_normal(H.n), rng.standard_normal(H.n)
        a, b = y @ H.apply(z), z @ H.apply(y)
        assert abs(a - b) <= 1e-12 * (abs(a) + 1e-300) + 1e-14
        assert y @ H.apply(y) > 0
    assert np.linalg.eigvalsh(0.5 * (H.dense() + H.dense().T)).min() > 0


def test_single_level_matches_explicit():
    h = build_initial(1.0, (0.0, 1.0), 4, 2)
    spec = SpaceSpec.test(3, 4)
    G = MultilevelPreconditioner(h, spec)
    V = build_dofs(h, 0, spec)
    bs = bubble_split(V)
    low = bs.vertex_dofs
    D0 = np.diag(low.support_x_diameter() ** 2 / low.mass_diagonal())
    E = bs.embed.toarray()
    want = E @ D0 @ E.T
    want[bs.bubble, bs.bubble] += V.support_x_diameter()[bs.bubble] ** 2 / V.mass_diagonal()[bs.bubble]
    assert np.allclose(G.dense(), want, rtol=1e-13, atol=1e-15)
    K = MultilevelPreconditioner(h, SpaceSpec.trial(1, 1))
    U = build_dofs(h, 0, SpaceSpec.trial(1, 1))
    assert np.allclose(apply_K(K, np.eye(U.n)), np.diag(U.support_x_diameter() ** 2 / U.mass_diagonal()))


def test_scale_covariance(rng):
    h = corner_refined(steps=2)
    spec = SpaceSpec.test(3, 4)
    G1 = MultilevelPreconditioner(h, spec, scale=1.0)
    Ga = MultilevelPreconditioner(h, spec, scale=0.1)
    g = rng.standard_normal(G1.n)
    bub = np.zeros(G1.n)
    bub[G1.bubble] = G1.bubble_w * g[G1.bubble]
    ml = G1.apply(g) - bub
    assert np.allclose(apply_G(Ga, g), 0.1 * ml + bub, rtol=1e-13, atol=1e-15)


def test_level_sets():
    h = build_initial(1.0, (0.0, 1.0), 4, 2)
    close_mesh(h, h.leaves())
    close_mesh(h, h.leaves())
    spec = SpaceSpec.test(1, 1)
    ls = build_level_sets(h, spec)
    for i, lv in enumerate(ls.levels):
        assert lv.J.size == build_dofs(h, i, spec).n
    h = corner_refined(steps=6)
    ls = build_level_sets(h, spec)
    assert ls.sizes[0] == build_dofs(h, 0, spec).n
    assert max(ls.sizes[1:]) <= 8 * 8


def test_stale_handle():
    h = build_initial(1.0, (0.0, 1.0), 4, 2)
    G = MultilevelPreconditioner(h, SpaceSpec.test(3, 4))
    close_mesh(h, [int(h.leaves()[0])])
    with pytest.raises(InvalidState):
        G.apply(np.zeros(G.n))


def test_spectral_check_identity_and_cap():
    h = build_initial(1.0, (0.0, 1.0), 4, 2)
    close_mesh(h, h.leaves())
    V = build_dofs(h, h.latest, SpaceSpec.test(1, 1))
    R = gram(V, "V")
    lo, hi, kappa = spectral_check(np.linalg.inv(R.matrix), R)
    assert abs(kappa - 1) < 1e-10 and abs(lo - 1) < 1e-10
    G = MultilevelPreconditioner(h, V.spec)
    lo, hi, kappa = spectral_check(G, R)
    assert 0 < lo <= hi and kappa >= 1
    with pytest.raises(CapacityError):
        spectral_check(G, R, max_dofs=R.n - 1)
