"""Command-line front end: ``python -m forcedvi {simulate,converge,ensemble,plot}``.

Runs are configured by one JSON document (``--config``); every key is
optional and unknown keys are rejected.  Example::

    {
      "benchmark": {"name": "van_der_pol", "eps": 0.5, "rho": 0.02, "lam": 0.8,
                    "q0": [-0.5, -0.25], "v0": [0.0, 4.0], "t_end": 1.0},
      "integrator": {"family": "lobatto", "stages": 3},
      "methods": [{"family": "alpha", "alpha": 0.5}, {"family": "lobatto", "stages": 3}],
      "h": 0.01,
      "ladder": {"h_max": 0.25, "h_min": 0.001, "points": 8},
      "reference": {"kind": "doubled", "h_ref": null, "cross_check": true},
      "ensemble": {"samples": 25, "box": [-4, 4], "sample_velocities": false},
      "solver": {"newton_tol": 1e-12, "max_iters": 50, "mode": "full"},
      "seed": 0
    }

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from . import experiments as ex
from .continuous import StateTangent
from .discrete import SolverConfig, integrate
from .errors import ConfigError, ForcedVIError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


# ---------------------------------------------------------------------------
# configuration


@dataclass
class MethodConfig:
    family: str = "alpha"
    alpha: float = 0.5
    stages: int = 3


@dataclass
class RunConfig:
    benchmark: str = "van_der_pol"
    bench_params: dict = field(default_factory=dict)
    q0: list | None = None
    v0: list | None = None
    t_end: float | None = None
    integrator: MethodConfig = field(default_factory=MethodConfig)
    integrator_given: bool = False
    methods: list = field(default_factory=list)
    h: float = 0.01
    steps: list | None = None
    h_max: float = 0.25
    h_min: float = 1e-3
    points: int = 8
    ladder_given: bool = False
    reference: str = "doubled"
    h_ref: float | None = None
    cross_check: bool = True
    samples: int = 25
    box: tuple = (-4.0, 4.0)
    sample_velocities: bool = False
    solver: SolverConfig = field(default_factory=SolverConfig)
    seed: int = 0


def _keys(obj, allowed, path):
    if not isinstance(obj, dict):
        raise ConfigError(path or "config", "must be a JSON object")
    for k in obj:
        if k not in allowed:
            raise ConfigError(f"{path}.{k}" if path else k, "unknown key")


def _num(obj, key, path, positive=False, lo=None, hi=None):
    v = obj[key]
    p = f"{path}.{key}" if path else key
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise ConfigError(p, "must be a finite number")
    if positive and not v > 0:
        raise ConfigError(p, "must be positive")
    if lo is not None and v < lo or hi is not None and v > hi:
        raise ConfigError(p, f"must lie in [{lo}, {hi}]")
    return float(v)


def _int(obj, key, path, lo=None):
    v = obj[key]
    p = f"{path}.{key}" if path else key
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(p, "must be an integer")
    if lo is not None and v < lo:
        raise ConfigError(p, f"must be >= {lo}")
    return int(v)


def _bool(obj, key, path):
    v = obj[key]
    if not isinstance(v, bool):
        raise ConfigError(f"{path}.{key}", "must be true or false")
    return v


def _vec(obj, key, path):
    v = obj[key]
    p = f"{path}.{key}"
    if not isinstance(v, list) or not v or not all(
        isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x) for x in v
    ):
        raise ConfigError(p, "must be a non-empty list of finite numbers")
    return [float(x) for x in v]


def _matrix(obj, key, path):
    v = obj[key]
    p = f"{path}.{key}"
    try:
        a = np.array(v, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ConfigError(p, "must be a number or a square matrix") from exc
    if a.ndim == 0:
        a = a.reshape(1, 1)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or not np.all(np.isfinite(a)):
        raise ConfigError(p, "must be a number or a square matrix")
    return a.tolist()


def _method(obj, path) -> MethodConfig:
    _keys(obj, {"family", "alpha", "stages"}, path)
    m = MethodConfig()
    if "family" in obj:
        if obj["family"] not in ("alpha", "lobatto"):
            raise ConfigError(f"{path}.family", "must be 'alpha' or 'lobatto'")
        m.family = obj["family"]
    if "alpha" in obj:
        m.alpha = _num(obj, "alpha", path, lo=0.0, hi=1.0)
    if "stages" in obj:
        s = obj["stages"]
        if isinstance(s, bool) or not isinstance(s, int) or not 2 <= s <= 5:
            raise ConfigError(f"{path}.stages", "stages must be in 2..5")
        m.stages = s
    return m


def parse_config(doc: dict) -> RunConfig:
    """Validate a configuration document.

    Raises:
        ConfigError: naming the offending field path.
    """
    _keys(doc, {"benchmark", "integrator", "methods", "h", "ladder", "reference", "ensemble", "solver", "seed"}, "")
    cfg = RunConfig()
    if "benchmark" in doc:
        b = doc["benchmark"]
        _keys(b, {"name", "eps", "rho", "lam", "M", "D", "K", "q0", "v0", "t_end"}, "benchmark")
        name = b.get("name", "van_der_pol")
        if name not in ("van_der_pol", "damped_linear"):
            raise ConfigError("benchmark.name", "must be 'van_der_pol' or 'damped_linear'")
        cfg.benchmark = name
        own = {"van_der_pol": ("eps", "rho", "lam"), "damped_linear": ("M", "D", "K")}[name]
        for k in ("eps", "rho", "lam", "M", "D", "K"):
            if k in b and k not in own:
                raise ConfigError(f"benchmark.{k}", f"not a parameter of {name}")
        for k in own:
            if k in b:
                cfg.bench_params[k] = _num(b, k, "benchmark") if name == "van_der_pol" else _matrix(b, k, "benchmark")
        if "q0" in b:
            cfg.q0 = _vec(b, "q0", "benchmark")
        if "v0" in b:
            cfg.v0 = _vec(b, "v0", "benchmark")
        if "t_end" in b:
            cfg.t_end = _num(b, "t_end", "benchmark", positive=True)
    if "integrator" in doc:
        cfg.integrator = _method(doc["integrator"], "integrator")
        cfg.integrator_given = True
    if "methods" in doc:
        if not isinstance(doc["methods"], list) or not doc["methods"]:
            raise ConfigError("methods", "must be a non-empty list")
        cfg.methods = [_method(m, f"methods[{i}]") for i, m in enumerate(doc["methods"])]
    if "h" in doc:
        cfg.h = _num(doc, "h", "", positive=True)
    if "ladder" in doc:
        lad = doc["ladder"]
        _keys(lad, {"h_max", "h_min", "points", "steps"}, "ladder")
        cfg.ladder_given = True
        if "steps" in lad:
            st = lad["steps"]
            if not isinstance(st, list) or not st or not all(isinstance(x, int) and not isinstance(x, bool) and x >= 1 for x in st):
                raise ConfigError("ladder.steps", "must be a non-empty list of positive integers")
            cfg.steps = list(st)
        if "h_max" in lad:
            cfg.h_max = _num(lad, "h_max", "ladder", positive=True)
        if "h_min" in lad:
            cfg.h_min = _num(lad, "h_min", "ladder", positive=True)
        if "points" in lad:
            cfg.points = _int(lad, "points", "ladder", lo=2)
        if cfg.h_min >= cfg.h_max:
            raise ConfigError("ladder.h_min", "must be smaller than ladder.h_max")
    if "reference" in doc:
        r = doc["reference"]
        _keys(r, {"kind", "h_ref", "cross_check"}, "reference")
        if "kind" in r:
            if r["kind"] not in ("doubled", "classical"):
                raise ConfigError("reference.kind", "must be 'doubled' or 'classical'")
            cfg.reference = r["kind"]
        if "h_ref" in r and r["h_ref"] is not None:
            cfg.h_ref = _num(r, "h_ref", "reference", positive=True)
        if "cross_check" in r:
            cfg.cross_check = _bool(r, "cross_check", "reference")
    if "ensemble" in doc:
        e = doc["ensemble"]
        _keys(e, {"samples", "box", "sample_velocities"}, "ensemble")
        if "samples" in e:
            cfg.samples = _int(e, "samples", "ensemble", lo=1)
        if "box" in e:
            box = _vec(e, "box", "ensemble")
            if len(box) != 2 or not box[0] < box[1]:
                raise ConfigError("ensemble.box", "must be [low, high] with low < high")
            cfg.box = tuple(box)
        if "sample_velocities" in e:
            cfg.sample_velocities = _bool(e, "sample_velocities", "ensemble")
    if "solver" in doc:
        s = doc["solver"]
        _keys(s, {"newton_tol", "max_iters", "mode"}, "solver")
        kw = {}
        if "newton_tol" in s:
            kw["newton_tol"] = _num(s, "newton_tol", "solver", positive=True)
        if "max_iters" in s:
            kw["max_iters"] = _int(s, "max_iters", "solver", lo=1)
        if "mode" in s:
            if s["mode"] not in ("full", "fast"):
                raise ConfigError("solver.mode", "must be 'full' or 'fast'")
            kw["mode"] = s["mode"]
        try:
            cfg.solver = SolverConfig(**kw)
        except ValueError as exc:
            raise ConfigError("solver", str(exc)) from exc
    if "seed" in doc:
        cfg.seed = _seed(doc["seed"], "seed")
    return cfg


def _seed(v, path) -> int:
    if isinstance(v, bool) or not isinstance(v, int) or not 0 <= v < 2**64:
        raise ConfigError(path, "must be an unsigned 64-bit integer")
    return int(v)


def load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path) as f:
            doc = json.load(f)
    except FileNotFoundError as exc:
        raise ConfigError("--config", f"no such file {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError("--config", f"invalid JSON ({exc.msg} at line {exc.lineno})") from exc
    return parse_config(doc)


def build_benchmark(cfg: RunConfig) -> ex.Benchmark:
    try:
        if cfg.benchmark == "van_der_pol":
            b = ex.benchmark_van_der_pol(**cfg.bench_params)
        else:
            p = {k: cfg.bench_params.get(k, [[1.0]] if k != "D" else [[0.2]]) for k in ("M", "D", "K")}
            b = ex.benchmark_damped_linear(p["M"], p["D"], p["K"])
    except ForcedVIError as exc:
        raise ConfigError("benchmark", str(exc)) from exc
    except ValueError as exc:
        raise ConfigError("benchmark", str(exc)) from exc
    n = b.system.dim
    for key, val in (("q0", cfg.q0), ("v0", cfg.v0)):
        if val is not None and len(val) != n:
            raise ConfigError(f"benchmark.{key}", f"must have {n} entries")
    q0 = cfg.q0 if cfg.q0 is not None else b.initial.q
    v0 = cfg.v0 if cfg.v0 is not None else b.initial.v
    t_end = cfg.t_end if cfg.t_end is not None else b.t_end
    return ex.Benchmark(b.name, b.system, StateTangent(q0, v0), t_end, b.params,
                        b.exact if cfg.q0 is None and cfg.v0 is None and cfg.t_end is None else None)


def _steps(cfg: RunConfig, t_end: float, h_range: tuple[float, float] | None = None) -> tuple[int, ...]:
    if cfg.steps:
        return tuple(cfg.steps)
    if h_range is not None and not cfg.ladder_given:
        return tuple(ex.default_ladder(t_end, *h_range))
    return tuple(ex.default_ladder(t_end, cfg.h_max, cfg.h_min, cfg.points))


# ---------------------------------------------------------------------------
# commands


def _say(args, line: str) -> None:
    if not args.quiet:
        print(line, flush=True)


def _fmtv(v) -> str:
    return "[" + ",".join(ex.fmt(float(x)) for x in np.atleast_1d(v)) + "]"


def cmd_simulate(cfg: RunConfig, args) -> int:
    bench = build_benchmark(cfg)
    N = max(1, int(round(bench.t_end / cfg.h)))
    h = bench.t_end / N
    m = cfg.integrator
    Ld = ex.make_integrator(bench.system, m.family, m.stages, m.alpha)
    rec = integrate(Ld, bench.initial, N, h, cfg.solver)
    path = os.path.join(args.out, "trajectory.csv")
    ex.write_trajectory_csv(rec, path)
    _say(
        args,
        f"method={Ld.name} steps={N} h={ex.fmt(h)} q={_fmtv(rec.q[-1])} p={_fmtv(rec.p[-1])} "
        f"E={ex.fmt(float(rec.energy[-1]))} max_identity_defect={ex.fmt(rec.max_identity_defect)}",
    )
    return EXIT_OK


def cmd_converge(cfg: RunConfig, args) -> int:
    bench = build_benchmark(cfg)
    steps = _steps(cfg, bench.t_end)
    methods = cfg.methods or [cfg.integrator]
    h_ref = cfg.h_ref if cfg.h_ref is not None else min(bench.t_end / N for N in steps) / 4
    ref = ex.compute_reference(bench, cfg.reference, h_ref, cfg.cross_check, cfg=cfg.solver)
    studies = []
    for m in methods:
        spec = ex.ConvergenceSpec(m.family, m.stages, m.alpha, steps, cfg.reference, h_ref, cfg.cross_check, cfg.solver)
        st = ex.run_convergence(bench, spec, ref)
        studies.append(st)
        _say(args, f"method={st.method} slope={ex.fmt(st.slope)} r2={ex.fmt(st.r2)}")
    ex.write_convergence_csv(studies, os.path.join(args.out, "convergence.csv"))
    return EXIT_OK


def cmd_ensemble(cfg: RunConfig, args) -> int:
    bench = build_benchmark(cfg)
    steps = _steps(cfg, bench.t_end, ex.ENSEMBLE_H_RANGE)
    m = cfg.integrator if cfg.integrator_given else MethodConfig("lobatto", 0.5, 3)
    spec = ex.EnsembleSpec(
        samples=cfg.samples,
        seed=cfg.seed,
        box=cfg.box,
        sample_velocities=cfg.sample_velocities,
        family=m.family,
        stages=m.stages,
        alpha=m.alpha,
        steps=steps,
        reference="classical",
        h_ref=cfg.h_ref if cfg.h_ref is not None else 1e-3,
        solver=cfg.solver,
    )
    st = ex.run_ensemble(bench, spec)
    ex.write_ensemble_csv(st, os.path.join(args.out, "ensemble.csv"))
    finite = st.slopes[np.isfinite(st.slopes)]
    lo = ex.fmt(float(finite.min())) if finite.size else "nan"
    hi = ex.fmt(float(finite.max())) if finite.size else "nan"
    _say(args, f"samples={cfg.samples} seed={cfg.seed} slope_min={lo} slope_max={hi} failures={len(st.failures)}")
    return EXIT_OK


def _read_csv(path: str) -> tuple[list[str], list[list[str]]]:
    if not os.path.isfile(path):
        raise ConfigError("plot", f"no such file {path}")
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if len(rows) < 2:
        raise ConfigError("plot", f"{path} has no data rows")
    return rows[0], rows[1:]


_PLOT_TEMPLATE = '''"""Error plots generated by forcedvi; run with: python {name}"""
import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

CONVERGENCE = {conv!r}
ENSEMBLE = {ens!r}
TRAJECTORY = {traj!r}

panels = [k for k, v in (("state", CONVERGENCE or ENSEMBLE), ("energy", CONVERGENCE or ENSEMBLE), ("trajectory", TRAJECTORY)) if v]
fig, axes = plt.subplots(1, max(1, len(panels)), figsize=(5 * max(1, len(panels)), 4), squeeze=False)
axes = dict(zip(panels, axes[0]))
for column, key in (("err_state_inf", "state"), ("err_energy", "energy")):
    if key not in axes:
        continue
    ax = axes[key]
    for method, series in sorted(CONVERGENCE.items()):
        hs = [r["h"] for r in series]
        ax.loglog(hs, [r[column] for r in series], "o-", label=method)
    if ENSEMBLE:
        hs = sorted({{r["h"] for r in ENSEMBLE}})
        vals = [[r[column] for r in ENSEMBLE if r["h"] == h] for h in hs]
        ax.loglog(hs, [sum(v) / len(v) for v in vals], "k-", label="ensemble mean")
        ax.loglog(hs, [max(v) for v in vals], "k--", label="ensemble max")
        ax.loglog(hs, [min(v) for v in vals], "k:", label="ensemble min")
    ax.set_xlabel("h")
    ax.set_ylabel("state error" if key == "state" else "energy error")
    ax.legend()
if "trajectory" in axes:
    ax = axes["trajectory"]
    ax.plot(TRAJECTORY["t"], TRAJECTORY["E"])
    ax.set_xlabel("t")
    ax.set_ylabel("energy")
fig.tight_layout()
fig.savefig({png!r}, dpi=150)
'''


def cmd_plot(args) -> int:
    if not args.csv:
        raise ConfigError("plot", "need at least one CSV path")
    conv: dict = {}
    ens: list = []
    traj: dict = {}
    for path in args.csv:
        head, rows = _read_csv(path)
        try:
            if tuple(head) == ex.CONVERGENCE_COLUMNS:
                for r in rows:
                    conv.setdefault(r[0], []).append(
                        {"h": float(r[2]), "err_state_inf": float(r[3]), "err_energy": float(r[4])}
                    )
            elif tuple(head) == ex.ENSEMBLE_COLUMNS:
                ens += [{"h": float(r[2]), "err_state_inf": float(r[3]), "err_energy": float(r[4])} for r in rows]
            elif head[:1] == ["t"] and head[-3:] == ["E", "identity_defect", "newton_iters"]:
                traj = {"t": [float(r[0]) for r in rows], "E": [float(r[-3]) for r in rows]}
            else:
                raise ConfigError("plot", f"{path} does not match a known CSV schema")
        except (ValueError, IndexError) as exc:
            raise ConfigError("plot", f"{path} has malformed rows") from exc
    os.makedirs(args.out, exist_ok=True)
    script = os.path.join(args.out, "plot_errors.py")
    text = _PLOT_TEMPLATE.format(name="plot_errors.py", conv=conv, ens=ens, traj=traj, png="errors.png")
    ex.atomic_write(script, text)
    _say(args, f"wrote {script}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--out", default=".", help="output directory (default: current)")
    common.add_argument("--seed", type=int, default=None, help="RNG seed (unsigned 64-bit), overrides the config")
    common.add_argument("--quiet", action="store_true", help="suppress stdout summaries")

    p = argparse.ArgumentParser(prog="forcedvi", description="Variational integrators for forced Lagrangian systems.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="integrate one trajectory -> trajectory.csv")
    sub.add_parser("converge", parents=[common], help="step-size ladder and fitted order -> convergence.csv")
    sub.add_parser("ensemble", parents=[common], help="random initial data sweep -> ensemble.csv")
    pl = sub.add_parser("plot", parents=[common], help="emit a matplotlib script for CSV outputs")
    pl.add_argument("csv", nargs="*", help="CSV files written by the other commands")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_CONFIG
    try:
        if args.command == "plot":
            return cmd_plot(args)
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = _seed(args.seed, "--seed")
        handler = {"simulate": cmd_simulate, "converge": cmd_converge, "ensemble": cmd_ensemble}[args.command]
        return handler(cfg, args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ForcedVIError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
