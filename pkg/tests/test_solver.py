import numpy as np
import pytest
import scipy.linalg as sla

from conftest import corner_refined
from stfem.adapt import smooth_problem
from stfem.errors import InvalidArgument, NumericalBreakdown
from stfem.forms import assemble_trace
from stfem.mesh import build_initial, close_mesh
from stfem.precond import MultilevelPreconditioner
from stfem.solver import LinearSystem, StopCriterion, build_system, pcg_solve
from stfem.space import SpaceSpec, build_dofs, prolongation


def make_system(h, f, u0, p=(1, 1), scale=1.0):
    U = build_dofs(h, h.latest, SpaceSpec.trial(*p))
    V = build_dofs(h, h.latest, SpaceSpec.test(p[0] + 2, p[1] + 3))
    G = MultilevelPreconditioner(h, V.spec, scale=scale)
    K = MultilevelPreconditioner(h, U.spec, scale=scale)
    return build_system(U, V, G, f, u0), K


def test_zero_data_gives_zero():
    h = corner_refined(steps=1)
    S, K = make_system(h, lambda t, x: 0 * t, lambda x: 0 * x)
    assert np.all(S.rhs == 0)
    res = pcg_solve(S, K)
    assert np.all(res.u == 0) and res.iterations == 0


def test_symmetry_and_dense_composition(rng):
    h = corner_refined(steps=1)
    P = smooth_problem()
    S, K = make_system(h, P.f, P.u0, p=(1, 3))
    for _ in range(10):
        u, w = rng.standard_normal(S.n), rng.standard_normal(S.n)
        a, b = u @ S.apply(w), w @ S.apply(u)
        assert abs(a - b) <= 1e-11 * max(abs(a), abs(b))
    g0, M0, _ = assemble_trace(S.trial)
    B = S.B.toarray()
    want = B.T @ S.G.dense() @ B + (g0.T @ M0 @ g0).toarray()
    assert np.allclose(S.dense(), want, rtol=1e-12, atol=1e-14)
    assert np.linalg.eigvalsh(0.5 * (want + want.T)).min() > 0


def test_dimension_mismatch():
    h = build_initial(1.0, (0.0, 1.0), 4, 2)
    U = build_dofs(h, 0, SpaceSpec.trial(1, 1))
    V = build_dofs(h, 0, SpaceSpec.test(3, 4))
    G = MultilevelPreconditioner(h, SpaceSpec.test(1, 1))
    with pytest.raises(InvalidArgument):
        build_system(U, V, G, lambda t, x: 0 * t, lambda x: 0 * x)


def test_two_by_two_finite_termination():
    A = np.array([[4.0, 1.0], [1.0, 3.0]])
    b = np.array([1.0, 2.0])
    res = pcg_solve(LinearSystem(A, b), lambda r: r, stop=StopCriterion(abs_tol=1e-28))
    assert res.iterations <= 2
    assert np.allclose(res.u, np.linalg.solve(A, b), atol=1e-14)


def test_breakdown_on_indefinite():
    A = np.diag([1.0, -1.0])
    with pytest.raises(NumericalBreakdown):
        pcg_solve(LinearSystem(A, np.array([1.0, 1.0])), lambda r: r, stop=StopCriterion(abs_tol=1e-30))


def test_tight_solve_reproduces_minimizer():
    h = build_initial(1.0, (0.0, 1.0), 4, 2)
    close_mesh(h, h.leaves())
    P = smooth_problem()
    S, K = make_system(h, P.f, P.u0)
    res = pcg_solve(S, K, stop=StopCriterion(eps=1e-10, max_iter=1000))
    assert res.converged
    # residual measured in the preconditioned dual norm r.K r
    r = S.rhs - S.apply(res.u)
    assert r @ K.apply(r) <= 1e-9
    A = S.dense()
    u_star = np.linalg.solve(A, S.rhs)
    e = u_star - res.u
    assert e @ A @ e <= 1e-9 * (u_star @ A @ u_star)


def test_error_decrease_and_alg_est():
    h = corner_refined(steps=2)
    P = smooth_problem()
    S, K = make_system(h, P.f, P.u0)
    A = S.dense()
    u_star = np.linalg.solve(A, S.rhs)
    Kd = K.dense()
    iterates = []

    class Recorder:
        def apply(self, r):
            iterates.append(r.copy())
            return K.apply(r)

    res = pcg_solve(S, Recorder(), stop=StopCriterion(eps=1e-8))
    # residuals r^n seen by the preconditioner reproduce alg_est exactly
    for r, a in zip(iterates, res.alg_est):
        assert abs(r @ Kd @ r - a * a) <= 1e-10 * max(a * a, 1e-300)
    # A-norm error of the iterates
    errs = []
    for r in iterates:
        e = np.linalg.solve(A, r)          # u* - u^n
        errs.append(e @ A @ e)
    assert all(b < a for a, b in zip(errs, errs[1:]))
    assert res.alg_est[-1] <= res.alg_est[0]
    # alg_est^2 is equivalent to the A-norm error squared with spectral constants of K A
    lam = sla.eigvals(Kd @ A).real
    for r, e2 in zip(iterates, errs):
        q = (r @ Kd @ r) / e2
        assert lam.min() * (1 - 1e-8) <= q <= lam.max() * (1 + 1e-8)
    # Lanczos estimate does not exceed the true condition number
    assert res.kappa <= lam.max() / lam.min() * (1 + 1e-8)
    del u_star


def test_warm_start_not_worse():
    h = build_initial(1.0, (0.0, 1.0), 4, 2)
    P = smooth_problem()
    S0, K0 = make_system(h, P.f, P.u0)
    r0 = pcg_solve(S0, K0)
    close_mesh(h, h.leaves())
    S1, K1 = make_system(h, P.f, P.u0)
    warm = (prolongation(S0.trial, S1.trial, all_dofs=True) @ S0.full(r0.u))[S1.trial.free]
    cold = pcg_solve(S1, K1)
    hot = pcg_solve(S1, K1, warm)
    assert hot.iterations <= cold.iterations


def test_trace_rows_ratio():
    h = corner_refined(steps=1)
    P = smooth_problem()
    S, K = make_system(h, P.f, P.u0)
    res = pcg_solve(S, K)
    rows = res.trace_rows()
    assert len(rows) == res.iterations + 1
    it, a, e, ratio = rows[-1]
    assert np.isclose(ratio, a * a / e) and ratio <= 0.01
    assert np.isclose(e, S.residual_sq(res.u), rtol=1e-10)
