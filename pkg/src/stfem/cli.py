"""Command-line driver for the heat-equation experiments.

    stfem --experiment smooth --refine uniform --max-ndof 10000 --out runs/smooth
    stfem --config run.cfg --theta 0.3
    stfem slope runs/smooth/table.csv eta --k 4
"""
from __future__ import annotations

import argparse
import csv
import os
import sys
import traceback
from dataclasses import dataclass, fields

EXPERIMENTS = ("smooth", "rough_init", "fundamental", "precond_study")
HEADER = ["level", "ndof", "eta", "error_H1x", "pcg_iters", "alg_est", "osc"]
TRACE_HEADER = ["iter", "alg_est", "eta_sq", "ratio"]


class UsageError(Exception):
    pass


@dataclass
class ExperimentConfig:
    experiment: str = "smooth"
    p_t: int = 1
    p_x: int = 1
    refine: str = "adaptive"
    theta: float = 0.5
    eps: float = 0.01
    precond_scale: float = 1.0
    max_ndof: int = 10_000
    marking: str | None = None
    out: str = "out"
    dump_mesh: bool = False
    trace_solver: bool = False
    workers: int | None = None
    seed: int = 0

    def validate(self):
        if self.experiment not in EXPERIMENTS:
            raise UsageError(f"experiment: unknown value {self.experiment!r} (choose from {', '.join(EXPERIMENTS)})")
        if self.p_t < 1:
            raise UsageError(f"p_t: must be >= 1, got {self.p_t}")
        if self.p_x not in (1, 3):
            raise UsageError(f"p_x: must be 1 or 3, got {self.p_x}")
        if self.refine not in ("uniform", "adaptive"):
            raise UsageError(f"refine: must be 'uniform' or 'adaptive', got {self.refine!r}")
        if not (0.0 < self.theta <= 1.0):
            raise UsageError(f"theta: must lie in (0, 1], got {self.theta}")
        if not (0.0 < self.eps < 1.0):
            raise UsageError(f"eps: must lie in (0, 1), got {self.eps}")
        if not (self.precond_scale > 0.0):
            raise UsageError(f"precond_scale: must be positive, got {self.precond_scale}")
        if self.max_ndof < 1:
            raise UsageError(f"max_ndof: must be positive, got {self.max_ndof}")
        if self.marking not in (None, "signed", "clipped"):
            raise UsageError(f"marking: must be 'signed' or 'clipped', got {self.marking!r}")
        if self.workers is not None and self.workers < 1:
            raise UsageError(f"workers: must be positive, got {self.workers}")
        return self


_FIELD_TYPES = {"p_t": int, "p_x": int, "theta": float, "eps": float, "precond_scale": float,
                "max_ndof": lambda s: int(float(s)), "workers": int, "seed": int}
_BOOL = {"dump_mesh", "trace_solver"}
_ALIASES = {"pt": "p_t", "px": "p_x"}


def _key(name):
    k = name.strip().replace("-", "_")
    return _ALIASES.get(k, k)


def _convert(key, value):
    if key in _BOOL:
        if isinstance(value, bool):
            return value
        v = str(value).strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"{key}: expected a boolean, got {value!r}")
    conv = _FIELD_TYPES.get(key)
    if conv is None or value is None:
        return value
    try:
        return conv(value)
    except (TypeError, ValueError):
        raise UsageError(f"{key}: cannot parse {value!r}") from None


def read_config(path):
    """Flat key=value file; '#' starts a comment."""
    out = {}
    names = {f.name for f in fields(ExperimentConfig)}
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{n}: expected key=value")
            k, v = line.split("=", 1)
            k = _key(k)
            if k not in names:
                raise UsageError(f"{path}:{n}: unknown key {k!r}")
            out[k] = _convert(k, v.strip())
    return out


def _run_parser():
    ap = argparse.ArgumentParser(prog="stfem", description="Adaptive space-time FEM for the 1D heat equation.")
    ap.add_argument("--config", help="key=value configuration file (flags override it)")
    ap.add_argument("--experiment", choices=EXPERIMENTS)
    ap.add_argument("--pt", type=int, dest="p_t")
    ap.add_argument("--px", type=int, dest="p_x")
    ap.add_argument("--refine", choices=("uniform", "adaptive"))
    ap.add_argument("--theta", type=float)
    ap.add_argument("--eps", type=float)
    ap.add_argument("--precond-scale", type=float, dest="precond_scale")
    ap.add_argument("--max-ndof", type=lambda s: int(float(s)), dest="max_ndof")
    ap.add_argument("--marking", choices=("signed", "clipped"))
    ap.add_argument("--out")
    ap.add_argument("--dump-mesh", action="store_true", default=None, dest="dump_mesh")
    ap.add_argument("--trace-solver", action="store_true", default=None, dest="trace_solver")
    ap.add_argument("--workers", type=int)
    ap.add_argument("--seed", type=int)
    return ap


def _slope_parser():
    ap = argparse.ArgumentParser(prog="stfem slope", description="Log-log slope of a table column versus ndof.")
    ap.add_argument("csv")
    ap.add_argument("column")
    ap.add_argument("--k", type=int, default=4, help="number of trailing rows (default 4)")
    return ap


def build_config(argv):
    ns = _run_parser().parse_args(argv)
    values = {}
    if ns.config:
        try:
            values.update(read_config(ns.config))
        except OSError as exc:
            raise UsageError(f"config: {exc}") from None
    for f in fields(ExperimentConfig):
        v = getattr(ns, f.name, None)
        if v is not None:
            values[f.name] = v
    return ExperimentConfig(**values).validate()


# ------------------------------------------------------------ output
def _fmt(v):
    if isinstance(v, float):
        return repr(float(v))
    return str(v)


def write_table(path, records):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HEADER)
        for r in records:
            w.writerow([_fmt(v) for v in (int(r.level), int(r.ndof), float(r.eta), float(r.error_H1x),
                                          int(r.pcg_iters), float(r.alg_est), float(r.osc))])


def read_table(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return rows


def slope(path_or_rows, column, k=4):
    """Least-squares slope of log(column) against log(ndof) over the last k rows."""
    import numpy as np

    from .errors import InvalidArgument, InvalidData

    rows = read_table(path_or_rows) if isinstance(path_or_rows, (str, os.PathLike)) else list(path_or_rows)
    if k < 2:
        raise InvalidArgument("k must be at least 2")
    if len(rows) < k:
        raise InvalidArgument(f"need at least {k} rows, got {len(rows)}")
    rows = rows[-k:]
    try:
        n = np.array([float(r["ndof"]) for r in rows])
        y = np.array([float(r[column]) for r in rows])
    except KeyError as exc:
        raise InvalidArgument(f"unknown column {exc}") from None
    except ValueError as exc:
        raise InvalidData(f"column {column!r}: {exc}") from None
    if (n <= 0).any() or (y <= 0).any() or not np.isfinite(y).all():
        raise InvalidData(f"column {column!r} has non-positive or non-finite entries")
    A = np.stack([np.log(n), np.ones(k)], axis=1)
    coef, *_ = np.linalg.lstsq(A, np.log(y), rcond=None)
    return float(coef[0])


# ------------------------------------------------------------ run
def _set_workers(n):
    if n:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(n)


def _run_one(cfg, problem_name, out, scale, trace_rows):
    from .adapt import PROBLEMS, adaptive_loop
    from .mesh import dump_mesh

    def on_level(mesh, rec, res):
        if cfg.dump_mesh:
            with open(os.path.join(out, f"mesh_L{rec.level}.txt"), "w") as fh:
                dump_mesh(mesh, mesh.latest, fh)
        if cfg.trace_solver:
            trace_rows.extend(res.trace_rows())

    return adaptive_loop(PROBLEMS[problem_name](), theta=cfg.theta, eps=cfg.eps, p=(cfg.p_t, cfg.p_x),
                         max_ndof=cfg.max_ndof, refine=cfg.refine, marking=cfg.marking,
                         precond_scale=scale, on_level=on_level)


def _write_trace(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        for it, a, e, r in rows:
            w.writerow([int(it), _fmt(float(a)), _fmt(float(e)), _fmt(float(r))])


def run(cfg: ExperimentConfig):
    """Run one experiment; returns the loop result(s)."""
    os.makedirs(cfg.out, exist_ok=True)
    trace = []
    if cfg.experiment == "precond_study":
        results = {}
        for scale in (1.0, 0.1):
            sub = os.path.join(cfg.out, f"scale_{scale}")
            os.makedirs(sub, exist_ok=True)
            res = _run_one(cfg, "rough_init", sub, scale, trace)
            write_table(os.path.join(sub, "table.csv"), res.records)
            results[scale] = res
        with open(os.path.join(cfg.out, "precond_study.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["scale", "level", "ndof", "pcg_iters", "kappa"])
            for scale, res in results.items():
                for r in res.records:
                    w.writerow([_fmt(scale), r.level, r.ndof, r.pcg_iters, _fmt(float(r.kappa))])
        write_table(os.path.join(cfg.out, "table.csv"), results[cfg.precond_scale if cfg.precond_scale in results else 1.0].records)
        out = results
    else:
        out = _run_one(cfg, cfg.experiment, cfg.out, cfg.precond_scale, trace)
        write_table(os.path.join(cfg.out, "table.csv"), out.records)
    if cfg.trace_solver:
        _write_trace(os.path.join(cfg.out, "solver_trace.csv"), trace)
    return out


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    if argv and argv[0] == "slope":
        ns = _slope_parser().parse_args(argv[1:])
        from .errors import InvalidArgument, InvalidData
        try:
            print(repr(slope(ns.csv, ns.column, ns.k)))
        except (InvalidArgument, InvalidData, OSError) as exc:
            print(f"stfem slope: error: {exc}", file=sys.stderr)
            return 2
        return 0
    try:
        cfg = build_config(argv)
    except UsageError as exc:
        print(f"stfem: error: {exc}", file=sys.stderr)
        return 2
    _set_workers(cfg.workers)
    from .errors import NumericalBreakdown
    try:
        run(cfg)
    except NumericalBreakdown:
        traceback.print_exc()
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
