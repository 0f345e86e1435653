import numpy as np
import pytest

from stfem.mesh import build_initial, close_mesh


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def corner_refined(n_t=4, n_x=2, steps=1, T=1.0, omega=(0.0, 1.0)):
    """Tensor mesh with the (t=0, x=a) corner cell refined ``steps`` times."""
    h = build_initial(T, omega, n_t, n_x)
    for _ in range(steps):
        L = h.leaves()
        t0, _ = h.t_bounds(L)
        x0, _ = h.x_bounds(L)
        k = np.flatnonzero((t0 == 0) & (x0 == omega[0]))[0]
        close_mesh(h, [int(L[k])])
    return h


def middle_refined():
    """4x2 mesh with an interior-in-time cell refined once (hanging nodes inside Q)."""
    h = build_initial(1.0, (0.0, 1.0), 4, 2)
    L = h.leaves()
    t0, _ = h.t_bounds(L)
    x0, _ = h.x_bounds(L)
    k = np.flatnonzero((t0 == 0.25) & (x0 == 0.0))[0]
    close_mesh(h, [int(L[k])])
    return h
