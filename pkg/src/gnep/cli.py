"""Command-line front end: config ingestion, batch runs, persistence and plot tables.

    gnep solve    --config cfg.yaml --out runs/mc
    gnep mpc      --config cfg.yaml --solver ptp --out runs/ptp
    gnep analyze  --config cfg.yaml --out runs/an
    gnep plotdata --out runs/mc
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import alcore as alc
from . import analysis as an
from . import baselines as bl
from . import mpc as mp
from . import newton as nt
from . import scenarios as sc

FORMAT_VERSION = 1
SOLVERS = ("algames", "ibr", "penalty", "ptp")
RECORDS = "records.jsonl"
SUMMARY = "summary.json"
TIMINGS = "timings.jsonl"
MPC_RUNS = "mpc_runs.jsonl"
MPC_TICKS = "mpc_ticks.jsonl"
ANALYSIS = "analysis.json"
CONFIG_COPY = "config.yaml"

log = logging.getLogger("gnep")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ExperimentConfig:
    scenario: str = "ramp_merging"
    scenario_params: dict = field(default_factory=dict)
    solver: dict = field(default_factory=dict)
    baseline: str = "algames"
    penalty_rho: float = 1.0
    ibr_rounds: int = 20
    samples: int = 1
    perturb: bool = True
    seed: int = 0
    output: str = "runs/default"
    mpc: dict = field(default_factory=dict)
    analysis: dict = field(default_factory=dict)

    def solver_options(self) -> nt.SolverOptions:
        return nt.SolverOptions(**self.solver)

    def build_scenario(self) -> sc.Scenario:
        return sc.build(self.scenario, **self.scenario_params)

    def mpc_config(self) -> mp.MpcConfig:
        kw = dict(self.mpc)
        kw["controller"] = mp.PREDICT_THEN_PLAN if self.baseline == "ptp" else mp.ALGAMES
        return mp.MpcConfig(solver=self.solver_options(), **kw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["format_version"] = FORMAT_VERSION
        return d


_SECTIONS = {
    "scenario": None,
    "solver": None,
    "baseline": None,
    "samples": None,
    "perturb": None,
    "seed": None,
    "output": None,
    "mpc": None,
    "analysis": None,
    "format_version": None,
}


def _key_lines(text: str) -> dict:
    """Map dotted key paths of a YAML mapping to 1-based line numbers."""
    out = {}

    def walk(node, prefix):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                path = f"{prefix}{k.value}"
                out[path] = k.start_mark.line + 1
                walk(v, path + ".")

    try:
        walk(yaml.compose(text), "")
    except yaml.YAMLError:
        pass
    return out


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    """Parse and validate a YAML experiment config; errors name the line and field."""
    try:
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{source}:{mark.line + 1}:{mark.column + 1}" if mark else source
        raise ConfigError(f"{where}: {getattr(exc, 'problem', exc)}") from None
    lines = _key_lines(text)

    def fail(path, msg):
        key = path
        while key not in lines and "." in key:
            key = key.rsplit(".", 1)[0]
        ln = lines.get(key)
        raise ConfigError(f"{source}:{ln if ln else '?'}: field '{path}': {msg}")

    if not isinstance(raw, dict):
        raise ConfigError(f"{source}:1: top level must be a mapping")
    for k in raw:
        if k not in _SECTIONS:
            fail(k, "unknown field")
    fv = raw.get("format_version", FORMAT_VERSION)
    if fv != FORMAT_VERSION:
        fail("format_version", f"unsupported version {fv!r}")
    cfg = ExperimentConfig()
    scen = raw.get("scenario", {"name": cfg.scenario})
    if isinstance(scen, str):
        scen = {"name": scen}
    if not isinstance(scen, dict) or "name" not in scen:
        fail("scenario", "expected a name or a mapping with 'name'")
    if scen["name"] not in sc.SCENARIOS:
        fail("scenario.name", f"unknown scenario {scen['name']!r}; choose from {sorted(sc.SCENARIOS)}")
    cfg.scenario = scen["name"]
    cfg.scenario_params = dict(scen.get("params") or {})
    try:
        cfg.build_scenario()
    except (TypeError, ValueError) as exc:
        fail("scenario.params", str(exc))
    solver = raw.get("solver") or {}
    if not isinstance(solver, dict):
        fail("solver", "expected a mapping")
    known = {f.name for f in dataclasses.fields(nt.SolverOptions)}
    for k in solver:
        if k not in known:
            fail(f"solver.{k}", "unknown solver option")
    cfg.solver = dict(solver)
    try:
        cfg.solver_options()
    except (TypeError, ValueError) as exc:
        fail("solver", str(exc))
    base = raw.get("baseline", cfg.baseline)
    if isinstance(base, dict):
        cfg.penalty_rho = float(base.get("rho_fixed", cfg.penalty_rho))
        cfg.ibr_rounds = int(base.get("max_rounds", cfg.ibr_rounds))
        base = base.get("name", "algames")
    if base not in SOLVERS:
        fail("baseline", f"expected one of {SOLVERS}")
    cfg.baseline = base
    if not cfg.penalty_rho > 0:
        fail("baseline.rho_fixed", "must be positive")
    samples = raw.get("samples", cfg.samples)
    if not isinstance(samples, int) or isinstance(samples, bool) or samples < 1:
        fail("samples", "sample count must be an integer >= 1")
    cfg.samples = samples
    cfg.perturb = bool(raw.get("perturb", cfg.perturb))
    seed = raw.get("seed", cfg.seed)
    if not isinstance(seed, int) or seed < 0:
        fail("seed", "must be a nonnegative integer")
    cfg.seed = seed
    cfg.output = str(raw.get("output", cfg.output))
    cfg.mpc = dict(raw.get("mpc") or {})
    try:
        cfg.mpc_config()
    except (TypeError, ValueError) as exc:
        fail("mpc", str(exc))
    cfg.analysis = dict(raw.get("analysis") or {})
    return cfg


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    return parse_config(p.read_text(), str(p))


def dump_config(cfg: ExperimentConfig) -> str:
    d = {
        "format_version": FORMAT_VERSION,
        "scenario": {"name": cfg.scenario, "params": cfg.scenario_params},
        "solver": cfg.solver,
        "baseline": {"name": cfg.baseline, "rho_fixed": cfg.penalty_rho, "max_rounds": cfg.ibr_rounds},
        "samples": cfg.samples,
        "perturb": cfg.perturb,
        "seed": cfg.seed,
        "output": cfg.output,
        "mpc": cfg.mpc,
        "analysis": cfg.analysis,
    }
    return yaml.safe_dump(d, sort_keys=True)


# ---------------------------------------------------------------------------
# output helpers


def fmt(v) -> str:
    """Round-trip decimal text for a number."""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _plain(v):
    if isinstance(v, dict):
        return {str(k): _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if isinstance(v, np.ndarray):
        return _plain(v.tolist())
    if isinstance(v, (np.bool_, bool)):
        return bool(v)
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, (np.floating, float)):
        f = float(v)
        return f if np.isfinite(f) else repr(f)
    return v


def dumps(obj) -> str:
    return json.dumps(_plain(obj), sort_keys=True, allow_nan=False)


def write_jsonl(path: Path, rows) -> None:
    with open(path, "w") as fh:
        for r in rows:
            fh.write(dumps(r) + "\n")


def read_jsonl(path: Path) -> list:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(x) if isinstance(x, (int, float, np.number, bool)) else x for x in r])
    path.write_text(buf.getvalue())


def read_csv(path: Path) -> tuple:
    with open(path) as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def digest(x) -> str:
    text = ",".join(fmt(v) for v in np.asarray(x, float).ravel())
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def worker_count(requested: Optional[int]) -> int:
    env = os.environ.get("GNEP_WORKERS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"GNEP_WORKERS must be an integer, got {env!r}") from None
    else:
        n = requested if requested else 1
    return max(1, n)


def _pmap(fn, items, workers: int) -> list:
    if workers <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


# ---------------------------------------------------------------------------
# solve / Monte Carlo


def initial_state(cfg: ExperimentConfig, s: sc.Scenario, index: int) -> np.ndarray:
    if not cfg.perturb:
        return s.x0.copy()
    return sc.sample_initial_state(s, cfg.seed + index)


def _solve_sample(args) -> tuple:
    cfg, index = args
    s = cfg.build_scenario()
    opts = cfg.solver_options()
    try:
        x0 = initial_state(cfg, s, index)
    except sc.SamplingExhausted as exc:
        rec = {"index": index, "seed": cfg.seed + index, "status": "SamplingExhausted", "error": str(exc)}
        return rec, 0.0
    p = s.problem.replace(x0=x0)
    t0 = time.perf_counter()
    if cfg.baseline == "algames":
        pt, rep = nt.solve(p, opts=opts)
    elif cfg.baseline == "penalty":
        pt, rep = bl.penalty_solve(p, bl.PenaltyOptions(cfg.penalty_rho, opts))
    elif cfg.baseline == "ibr":
        pt, ibr = bl.ibr_solve(p, opts, cfg.ibr_rounds)
        res = bl.game_residual(p, pt)
        viol = nt._violation(alc.Layout(p), alc.evaluate(alc.Layout(p), alc.Layout(p).pack(pt),
                                                          alc.AlState.initial(p.constraint_meta.size)).C)
        status = nt.CONVERGED if ibr.converged else nt.MAX_ITERS
        rep = nt.SolveReport(status, ibr.rounds, 0, res, viol, [], [], ibr.linear_solves, None)
    else:
        ego = s.ego if s.ego is not None else p.M - 1
        plan = bl.predict_then_plan_step(p, x0, bl.PredictThenPlanOptions(ego=ego, solver=opts))
        pt, rep = plan.point, plan.report
    wall = time.perf_counter() - t0
    rec = {
        "index": index,
        "seed": cfg.seed + index,
        "x0_digest": digest(x0),
        "status": rep.status,
        "residual_l1": rep.final_residual_l1,
        "max_violation": rep.max_constraint_violation,
        "inner_iters": rep.inner_iters_total,
        "outer_iters": rep.outer_iters,
        "linear_solves": rep.linear_solves,
        "trace": [t[0] for t in rep.trace],
    }
    return rec, wall


def aggregate(records: list) -> dict:
    """Aggregate statistics recomputable from the per-sample rows."""
    n = len(records)
    conv = [r for r in records if r.get("status") == nt.CONVERGED]
    iters = sorted(r["inner_iters"] for r in conv)
    q = {}
    if iters:
        for name, level in (("p10", 0.1), ("p50", 0.5), ("p90", 0.9)):
            q[name] = float(np.quantile(np.array(iters, float), level))
    viols = [r["max_violation"] for r in records if "max_violation" in r]
    return {
        "format_version": FORMAT_VERSION,
        "samples": n,
        "converged": len(conv),
        "convergence_rate": len(conv) / n if n else 0.0,
        "inner_iter_quantiles": q,
        "max_violation_worst": max(viols) if viols else None,
        "satisfied_1e-3": sum(1 for v in viols if v <= 1e-3),
    }


def run_solve(cfg: ExperimentConfig, out: Path, workers: int = 1) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_COPY).write_text(dump_config(cfg))
    results = _pmap(_solve_sample, [(cfg, i) for i in range(cfg.samples)], workers)
    results.sort(key=lambda r: r[0]["index"])
    recs = [dict(r, format_version=FORMAT_VERSION) for r, _ in results]
    write_jsonl(out / RECORDS, recs)
    write_jsonl(out / TIMINGS, [{"index": r["index"], "wall_time": w} for r, w in results])
    summ = aggregate(recs)
    (out / SUMMARY).write_text(dumps(summ) + "\n")
    return summ


# ---------------------------------------------------------------------------
# MPC


def _mpc_sample(args) -> tuple:
    cfg, index = args
    s = cfg.build_scenario()
    mcfg = cfg.mpc_config()
    x0 = initial_state(cfg, s, index) if index > 0 or cfg.perturb else s.x0
    lg = mp.mpc_run(s, mcfg, cfg.seed + index, x0)
    run = {
        "index": index,
        "seed": cfg.seed + index,
        "x0_digest": digest(x0),
        "controller": mcfg.controller,
        "rank": lg.ranks.get("ego"),
        "degraded_ticks": int(sum(lg.degraded)),
        "fallback_ticks": int(sum(any(f) for f in lg.fallback)),
        "min_pair_distance": float(min(lg.min_pair_distance)),
        "min_boundary_clearance": float(min(lg.min_boundary_clearance)),
    }
    ticks = []
    for k in range(lg.ticks):
        ticks.append({
            "run": index,
            "tick": k,
            "x": lg.states[k],
            "u": lg.controls[k],
            "status": lg.status[k],
            "inner_iters": lg.inner_iters[k],
            "residual_l1": lg.residuals[k],
            "max_violation": lg.violations[k],
            "degraded": lg.degraded[k],
            "fallback": lg.fallback[k],
            "min_pair_distance": lg.min_pair_distance[k],
            "min_boundary_clearance": lg.min_boundary_clearance[k],
        })
    return run, ticks, lg.wall_times


def rank_histogram(runs: list, M: int) -> list:
    counts = {r: 0 for r in range(1, M + 1)}
    for run in runs:
        if run.get("rank") is not None:
            counts[run["rank"]] += 1
    return [(r, counts[r]) for r in sorted(counts)]


def run_mpc(cfg: ExperimentConfig, out: Path, workers: int = 1) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_COPY).write_text(dump_config(cfg))
    s = cfg.build_scenario()
    results = _pmap(_mpc_sample, [(cfg, i) for i in range(cfg.samples)], workers)
    results.sort(key=lambda r: r[0]["index"])
    runs = [dict(r, format_version=FORMAT_VERSION) for r, _, _ in results]
    write_jsonl(out / MPC_RUNS, runs)
    write_jsonl(out / MPC_TICKS, [dict(t, format_version=FORMAT_VERSION) for _, ts, _ in results for t in ts])
    write_jsonl(out / TIMINGS, [{"index": r["index"], "tick_wall_times": w} for r, _, w in results])
    hist = rank_histogram(runs, s.problem.M)
    write_csv(out / "ranks.csv", ["rank", "count"], hist)
    summ = {"format_version": FORMAT_VERSION, "runs": len(runs), "rank_histogram": {str(r): c for r, c in hist}}
    (out / SUMMARY).write_text(dumps(summ) + "\n")
    return summ


# ---------------------------------------------------------------------------
# analysis


def run_analysis(cfg: ExperimentConfig, out: Path, workers: int = 1) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_COPY).write_text(dump_config(cfg))
    s = cfg.build_scenario()
    opts = cfg.solver_options()
    acfg = dict(cfg.analysis)
    p = s.problem
    pt, rep = nt.solve(p, opts=opts)
    if not rep.converged:
        raise an.NotConverged(f"nominal solve did not converge ({rep.status}); analysis needs an equilibrium")
    kkt = an.build_augmented_kkt(p, pt, rep.al, rep, float(acfg.get("active_tol", an.ACTIVE_TOL)))
    basis = an.kkt_nullspace(kkt, float(acfg.get("svd_tol", an.SVD_TOL)))
    nne = an.nne_check(p, rep)
    n_dirs = int(acfg.get("perturbations", 10))
    rng = np.random.default_rng(cfg.seed)
    points = [pt.primal(p)]
    proj = []
    for i in range(min(n_dirs, basis.shape[1]) if basis.shape[1] else 0):
        d = basis @ rng.normal(size=basis.shape[1])
        r = an.perturb_and_project(p, pt, rep.al, d, opts=opts, kkt=kkt)
        proj.append({"index": i, "converged": r.ok, "drift": r.drift, "inner_iters": r.report.inner_iters_total})
        if r.ok:
            points.append(r.point.primal(p))
    eig = []
    if len(points) >= 2:
        ev, _ = an.pca_of_equilibria(points)
        eig = ev.tolist()
    result = {
        "format_version": FORMAT_VERSION,
        "scenario": s.name,
        "rows": kkt.H.shape[0],
        "cols": kkt.H.shape[1],
        "active_rows": int(kkt.active.size),
        "active_shared_rows": kkt.n_a,
        "nullspace_dim": int(basis.shape[1]),
        "nullspace_residual": float(np.abs(kkt.H @ basis).max()) if basis.size else 0.0,
        "nne": {"is_nne": nne.is_nne, "max_multiplier_gap": nne.max_multiplier_gap, "updates": nne.updates},
        "projections": proj,
        "pca_eigenvalues": eig,
        "pca_total_variance": float(np.var(np.array(points), axis=0, ddof=1).sum()) if len(points) >= 2 else 0.0,
    }
    K = int(acfg.get("multistart", 0))
    if K >= 2:
        mparams = dict(acfg.get("multistart_scenario_params", {}))
        ms_s = sc.build(cfg.scenario, **{**cfg.scenario_params, **mparams}) if mparams else s
        cl = an.multistart_cluster(ms_s.problem, K, cfg.seed, opts)
        result["multistart"] = {"samples": K, "clusters": cl.count, "failed": cl.failed,
                                "labels": cl.labels.tolist()}
    (out / ANALYSIS).write_text(dumps(result) + "\n")
    write_csv(out / "eigenvalues.csv", ["index", "eigenvalue"], list(enumerate(eig)))
    return result


# ---------------------------------------------------------------------------
# plot tables

VIOLATION_BINS = np.logspace(-8, 0, 33)


def _hist_rows(values, edges):
    counts, _ = np.histogram(np.asarray(values, float), bins=edges)
    return [(edges[i], edges[i + 1], int(c)) for i, c in enumerate(counts)]


def emit_plots_data(run_dir: Path) -> list:
    """Write per-figure CSV tables from whatever a run directory contains."""
    run_dir = Path(run_dir)
    if not run_dir.is_dir() or not any(run_dir.iterdir()):
        raise FileNotFoundError(f"run directory {run_dir} is empty or missing")
    written = []
    if (run_dir / RECORDS).exists():
        recs = read_jsonl(run_dir / RECORDS)
        v = [max(r["max_violation"], VIOLATION_BINS[0]) for r in recs if "max_violation" in r]
        write_csv(run_dir / "hist_violation.csv", ["lo", "hi", "count"], _hist_rows(v, VIOLATION_BINS))
        its = [r["inner_iters"] for r in recs if "inner_iters" in r]
        top = max(its) if its else 1
        write_csv(run_dir / "hist_iterations.csv", ["lo", "hi", "count"],
                  _hist_rows(its, np.arange(0, top + 2, max(1, (top + 1) // 20 or 1))))
        rows = [(r["index"], k, g) for r in recs for k, g in enumerate(r.get("trace", []))]
        write_csv(run_dir / "convergence.csv", ["sample", "iteration", "residual_l1"], rows)
        written += ["hist_violation.csv", "hist_iterations.csv", "convergence.csv"]
    if (run_dir / TIMINGS).exists():
        tm = read_jsonl(run_dir / TIMINGS)
        w = [t["wall_time"] for t in tm if "wall_time" in t]
        if w:
            edges = np.linspace(0.0, max(w) * 1.0001 + 1e-12, 21)
            write_csv(run_dir / "hist_time.csv", ["lo", "hi", "count"], _hist_rows(w, edges))
            written.append("hist_time.csv")
    if (run_dir / MPC_RUNS).exists():
        runs = read_jsonl(run_dir / MPC_RUNS)
        M = max([r["rank"] for r in runs if r.get("rank")] + [1])
        cfg = run_dir / CONFIG_COPY
        if cfg.exists():
            M = max(M, load_config(cfg).build_scenario().problem.M)
        write_csv(run_dir / "rank_bars.csv", ["rank", "count"], rank_histogram(runs, M))
        written.append("rank_bars.csv")
    if (run_dir / ANALYSIS).exists():
        res = json.loads((run_dir / ANALYSIS).read_text())
        eig = res.get("pca_eigenvalues", [])
        tot = sum(eig) if eig else 0.0
        write_csv(run_dir / "eigen_bars.csv", ["index", "eigenvalue", "fraction"],
                  [(i, e, e / tot if tot > 0 else 0.0) for i, e in enumerate(eig)])
        written.append("eigen_bars.csv")
    if not written:
        raise FileNotFoundError(f"nothing to tabulate in {run_dir}")
    return written


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gnep", description="Dynamic game solver experiments")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="verb", required=True)
    for verb in ("solve", "mc", "mpc", "analyze", "plotdata"):
        sp_ = sub.add_parser(verb)
        sp_.add_argument("--config", type=Path)
        sp_.add_argument("--seed", type=int)
        sp_.add_argument("--out", type=Path)
        sp_.add_argument("--workers", type=int, default=None)
        sp_.add_argument("--solver", choices=SOLVERS)
    return ap


def _resolve(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be nonnegative")
        cfg.seed = args.seed
    if args.solver:
        cfg.baseline = args.solver
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.verb == "plotdata":
            if args.out is None:
                raise ConfigError("plotdata needs --out <run dir>")
            for name in emit_plots_data(args.out):
                print(args.out / name)
            return 0
        cfg = _resolve(args)
        out = args.out if args.out is not None else Path(cfg.output)
        workers = worker_count(args.workers)
        if args.verb in ("solve", "mc"):
            summ = run_solve(cfg, out, workers)
        elif args.verb == "mpc":
            summ = run_mpc(cfg, out, workers)
        else:
            summ = run_analysis(cfg, out, workers)
        print(dumps(summ))
        return 0
    except (ConfigError, FileNotFoundError, an.NotConverged, sc.SamplingExhausted) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
