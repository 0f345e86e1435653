"""Acceptance criteria 1-9.

Every test prints one ``PASS``/``FAIL`` line with the measured numbers and
then asserts the criterion literally.  Expensive runs are cached so that
criterion 9 can inspect every mesh produced by the other experiments.
"""
import functools
import math
import time

import numpy as np

from stfem import cli
from stfem.adapt import PROBLEMS, adaptive_loop
from stfem.forms import assemble_form
from stfem.fortin import annihilation_defect
from stfem.fracnorm import gram, slobodeckij_gram, slobodeckij_seminorm_sq, weighted_terms
from stfem.mesh import build_initial, check_invariants, close_mesh
from stfem.precond import MultilevelPreconditioner, spectral_check
from stfem.solver import StopCriterion, build_system, pcg_solve
from stfem.space import SpaceSpec, build_dofs

MESHES = []


def report(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}", flush=True)


@functools.lru_cache(maxsize=None)
def loop(name, refine, max_ndof, p=(1, 1), scale=1.0):
    r = adaptive_loop(PROBLEMS[name](), p=p, max_ndof=max_ndof, refine=refine, precond_scale=scale)
    MESHES.append((f"{name}/{refine}/p={p}/scale={scale}", r.mesh))
    return r


def table(r, max_ndof=None):
    return [{"ndof": rec.ndof, "eta": rec.eta} for rec in r.records
            if max_ndof is None or rec.ndof <= max_ndof]


# ---------------------------------------------------------------- 1
def test_criterion_1_fortin_annihilation(capsys):
    t0 = time.time()
    h = build_initial(1.0, (0.0, 1.0), 4, 2)
    L = h.leaves()
    tb, _ = h.t_bounds(L)
    xb, _ = h.x_bounds(L)
    coarse = close_mesh(h, [int(L[np.flatnonzero((tb == 0) & (xb == 0))[0]])])
    fine = close_mesh(h, h.leaves())
    MESHES.append(("fortin", h))
    rel = {p: float(annihilation_defect(h, coarse, fine, p)[0]) for p in ((1, 1), (1, 3))}
    dt = time.time() - t0
    ok = all(v <= 1e-11 for v in rel.values()) and dt < 30
    report(capsys, 1, ok, f"relative defects {rel}, {dt:.1f} s")
    assert ok


# ---------------------------------------------------------------- 2
def test_criterion_2_preconditioner_saturation(capsys):
    t0 = time.time()
    h = build_initial(1.0, (0.0, 1.0), 1, 1)
    spec = SpaceSpec.test(1, 1)
    kappas, dims = [], []
    for level in range(5):
        if level >= 2:
            V = build_dofs(h, h.latest, spec)
            R = gram(V, "V", cap=4096)
            G = MultilevelPreconditioner(h, spec)
            kappas.append(spectral_check(G, R, max_dofs=4096)[2])
            dims.append(V.n)
        if level < 4:
            close_mesh(h, h.leaves())
    MESHES.append(("spectral", h))
    ratios = [b / a for a, b in zip(kappas, kappas[1:])]
    dt = time.time() - t0
    ok = all(r <= 1.5 for r in ratios) and dt < 300
    report(capsys, 2, ok, f"dims {dims}, kappa {np.round(kappas, 3).tolist()}, step ratios "
                  f"{np.round(ratios, 3).tolist()}, {dt:.0f} s")
    assert ok


# ---------------------------------------------------------------- 3
def test_criterion_3_smooth_rates(capsys):
    t0 = time.time()
    r11 = loop("smooth", "uniform", 300_000)
    r13 = loop("smooth", "uniform", 200_000, p=(1, 3))
    s11 = cli.slope(table(r11, 200_000), "eta")
    etas13 = [rec.eta for rec in r13.records]
    try:
        s13 = cli.slope(table(r13), "eta")
    except Exception as exc:  # non-positive estimator values
        s13 = float("nan")
        with capsys.disabled():
            print(f"  p=(1,3) slope not computable: {exc}")
    dt = time.time() - t0
    ok11 = abs(s11 + 1 / 3) <= 0.08
    ok13 = abs(s13 + 1) <= 0.15
    report(capsys, 3, ok11 and ok13 and dt < 600,
           f"slope p=(1,1) {s11:.4f} (target -1/3 +- 0.08, {'ok' if ok11 else 'miss'}); "
           f"slope p=(1,3) {s13:.4f} (target -1 +- 0.15, {'ok' if ok13 else 'miss'}; "
           f"eta per level {['%.2e' % e for e in etas13]}), {dt:.0f} s")
    assert ok11 and ok13 and dt < 600


# ---------------------------------------------------------------- 4
def test_criterion_4_efficiency_index(capsys):
    res = {}
    for mode, budget in (("uniform", 300_000), ("adaptive", 30_000)):
        r = loop("smooth", mode, budget)
        idx = [rec.eta / rec.error_H1x for rec in r.records]
        base = idx[1]
        after = idx[2:]
        within = [base / 2 <= v <= 2 * base for v in after]
        res[mode] = (len(after) >= 4 and all(within[:4]), np.round(idx, 3).tolist())
    ok = all(v[0] for v in res.values())
    report(capsys, 4, ok, "; ".join(f"{m}: {'ok' if v[0] else 'miss'} indices {v[1]}" for m, v in res.items()))
    assert ok


# ---------------------------------------------------------------- 5
def test_criterion_5_rough_initial_data(capsys):
    ru = loop("rough_init", "uniform", 100_000)
    ra = loop("rough_init", "adaptive", 100_000)
    na = np.log([rec.ndof for rec in ra.records])
    ea = np.log([rec.eta for rec in ra.records])
    cmp = []
    for rec in ru.records:
        if rec.ndof >= 1000 and math.log(rec.ndof) <= na[-1]:
            cmp.append((rec.ndof, rec.eta, float(np.exp(np.interp(math.log(rec.ndof), na, ea)))))
    su = cli.slope(table(ru), "eta")
    sa = cli.slope(table(ra), "eta")
    ok = bool(cmp) and all(a <= u for _, u, a in cmp) and sa <= su - 0.05
    report(capsys, 5, ok, f"(ndof, uniform eta, adaptive eta) {[(n, round(u, 4), round(a, 4)) for n, u, a in cmp]}; "
                  f"slopes uniform {su:.4f}, adaptive {sa:.4f}")
    assert ok


# ---------------------------------------------------------------- 6
def _true_ratio(mesh, problem):
    U = build_dofs(mesh, mesh.latest, SpaceSpec.trial(1, 1))
    V = build_dofs(mesh, mesh.latest, SpaceSpec.test(3, 4))
    G = MultilevelPreconditioner(mesh, V.spec)
    K = MultilevelPreconditioner(mesh, U.spec)
    S = build_system(U, V, G, problem.f, problem.u0, lift_fn=problem.lift)
    u_star = np.linalg.solve(S.dense(), S.rhs)
    res = pcg_solve(S, K, stop=StopCriterion(eps=0.01))
    e = u_star - res.u
    Kd = K.dense()
    err = float(e @ np.linalg.solve(0.5 * (Kd + Kd.T), e))
    return U.n, err / S.residual_sq(res.u), res.alg_est[-1] ** 2 / res.eta_sq[-1]


def test_criterion_6_stopping_soundness(capsys):
    t0 = time.time()
    out = []
    for name, refine in (("smooth", "uniform"), ("rough_init", "adaptive"), ("fundamental", "adaptive")):
        levels = len(adaptive_loop(PROBLEMS[name](), max_ndof=2000, refine=refine).records)
        # rerun so that the latest partition is the finest one with <= 2000 dofs
        r = adaptive_loop(PROBLEMS[name](), max_ndof=2000, refine=refine, max_levels=levels)
        MESHES.append((f"crit6/{name}", r.mesh))
        n, ratio, est = _true_ratio(r.mesh, PROBLEMS[name]())
        out.append((name, n, ratio, est))
    dt = time.time() - t0
    ok = all(r <= 0.02 for _, _, r, _ in out) and dt < 120
    report(capsys, 6, ok, "; ".join(f"{nm} ndof {n}: true ratio {r:.2e} (alg_est^2/eta^2 {e:.2e})"
                            for nm, n, r, e in out) + f", {dt:.0f} s")
    assert ok


# ---------------------------------------------------------------- 7
def test_criterion_7_pcg_iterations(capsys):
    ru = loop("rough_init", "uniform", 100_000)
    its = [rec.pcg_iters for rec in ru.records]
    ratios = [b / a for a, b in zip(its, its[1:])]
    ok = all(r <= 1.5 for r in ratios)
    a1 = loop("rough_init", "adaptive", 20_000)
    a01 = loop("rough_init", "adaptive", 20_000, scale=0.1)
    pairs = list(zip([r.pcg_iters for r in a1.records], [r.pcg_iters for r in a01.records]))
    worst = max(b / a for a, b in pairs if a > 0)
    report(capsys, 7, ok, f"uniform iterations {its}, ratios {np.round(ratios, 3).tolist()}; "
                  f"recorded only: adaptive (scale 1.0, scale 0.1) iterations {pairs}, "
                  f"max ratio {worst:.3f} ({'within' if worst <= 1.2 else 'above'} 1.2)")
    assert ok


# ---------------------------------------------------------------- 8
def test_criterion_8_oracle_self_tests(capsys):
    t0 = time.time()
    h = build_initial(1.0, (0.0, 1.0), 1, 1)
    D = build_dofs(h, 0, SpaceSpec(1, 1, lateral_zero=False))
    s = slobodeckij_seminorm_sq(D, D.interpolate(lambda t, x: t + 0 * x, all_dofs=True), all_dofs=True)
    w = weighted_terms(D, D.interpolate(lambda t, x: 1 - t + 0 * x, all_dofs=True), "T", all_dofs=True)
    rng = np.random.default_rng(2024)
    worst = -np.inf
    violations = 0
    for k in range(200):
        T = float(rng.uniform(0.1, 2.0))
        a = float(rng.uniform(-1, 1))
        b = a + float(rng.uniform(0.1, 2.0))
        p = (int(rng.integers(1, 4)), int(rng.integers(1, 5)))
        mesh = build_initial(T, (a, b), 1, 1)
        Dk = build_dofs(mesh, 0, SpaceSpec(*p, lateral_zero=False))
        c = rng.standard_normal(Dk.n_all)
        M = assemble_form(Dk, Dk, "mass", True, True).toarray()
        Kx = assemble_form(Dk, Dk, "dx", True, True).toarray()
        R = slobodeckij_gram(Dk, all_dofs=True)
        one = np.ones(Dk.n_all)
        area = T * (b - a)
        mean = (one @ M @ c) / area
        lhs = c @ M @ c - area * mean ** 2
        rhs = (b - a) ** 2 / math.pi ** 2 * (c @ Kx @ c) + T * (c @ R @ c)
        worst = max(worst, lhs / rhs)
        violations += lhs > rhs * (1 + 1e-12)
    dt = time.time() - t0
    ok = abs(s - 1) <= 1e-9 and abs(w - 0.5) <= 1e-9 and violations == 0 and dt < 60
    report(capsys, 8, ok, f"slobodeckij(t) = {s:.12f}, weighted(1-t) = {w:.12f}, Poincare violations "
                  f"{violations}/200 (max lhs/rhs {worst:.4f}), {dt:.1f} s")
    assert ok


# ---------------------------------------------------------------- 9
def test_criterion_9_mesh_invariants(capsys):
    # make sure the experiment runs exist even when this test runs alone
    loop("smooth", "uniform", 300_000)
    loop("smooth", "adaptive", 30_000)
    loop("rough_init", "uniform", 100_000)
    loop("rough_init", "adaptive", 100_000)
    loop("rough_init", "adaptive", 20_000, scale=0.1)
    loop("fundamental", "adaptive", 20_000)
    bad = []
    for name, mesh in MESHES:
        res = check_invariants(mesh)
        if not all(res.values()):
            bad.append((name, {k: v for k, v in res.items() if not v}))
    ok = not bad
    report(capsys, 9, ok, f"{len(MESHES)} hierarchies checked, failures: {bad}")
    assert ok
