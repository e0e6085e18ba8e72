"""Command-line experiment driver.

Subcommands::

    levyspde simulate   --config run.yaml [--seed S] [--replicas R] [--jobs J] [--out DIR] [--force]
    levyspde verify     CHECK --config run.yaml ...
    levyspde converge   --config run.yaml [--ladder 64,128,256] [--reference-steps 4096]
    levyspde coercivity --config run.yaml

Exit codes: 0 success or pass, 2 validation failure or failed check,
3 vacuous check, 4 solver failure.  A run manifest written by ``simulate``
can be passed back as ``--config`` to reproduce the run byte for byte.

Replica ``r`` always draws its noise from ``replica_seed(master_seed, r)``
and replicas are solved in fixed chunks of :data:`CHUNK` in one batch, so
outputs do not depend on ``--jobs``.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .coefficients import check_coercivity, check_partial_moment
from .config import ExperimentConfig
from .exceptions import ConfigError, HypothesisViolation, LevySPDEError, SolverError
from .field import Field, write_field_csv
from .levy_noise import TimeGrid, replica_seed, sample_path
from .solver import (SolverConfig, _require_heat, fractional_forcing, mild_solution_oracle, solve_linear_batch,
                     solve_localized, solve_picard)
from .verify import (check_apriori, check_levy_system, check_nested, check_quadratic_variation,
                     check_sup_estimate, check_t_independence, convergence_study, write_reports_csv)

log = logging.getLogger("levyspde")

CHUNK = 8
ENSEMBLE_CSV_VERSION = "levyspde-ensemble-summary-csv v1"
COERCIVITY_CSV_VERSION = "levyspde-coercivity-csv v1"
CHECKS = ("quadratic-variation", "levy-system", "apriori", "sup-estimate", "t-independence")
APRIORI_SCALES = (1.0, 2.0, 10.0)
T_MULTIPLES = (1, 2, 4)

EXIT_OK, EXIT_FAIL, EXIT_VACUOUS, EXIT_SOLVER = 0, 2, 3, 4


class _Setup:
    """Everything a subcommand builds from a resolved config."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        r = cfg.resolved
        self.grid = cfg.grid()
        self.time_grid = cfg.time_grid()
        self.noise, self.drifts = cfg.noise()
        self.coeffs = cfg.coefficients(self.grid)
        self.u0, self.f, self.g = cfg.data(self.grid)
        self.solver = SolverConfig(self.grid, self.time_grid, theta=r["time"]["theta"])
        self.seed = r["run"]["seed"]
        self.replicas = r["run"]["replicas"]

    def seeds(self, count=None):
        return [replica_seed(self.seed, i) for i in range(self.replicas if count is None else count)]

    def paths(self, time_grid=None, count=None):
        tg = self.time_grid if time_grid is None else time_grid
        return [sample_path(self.noise, tg, s) for s in self.seeds(count)]

    def with_time_grid(self, tg):
        return SolverConfig(self.grid, tg, theta=self.solver.theta, tol=self.solver.tol,
                            max_iter=self.solver.max_iter)


# ---------------------------------------------------------------------------
# simulate


def _chunks(n):
    return [list(range(i, min(i + CHUNK, n))) for i in range(0, n, CHUNK)]


def _run_chunk(resolved, base_dir, replicas):
    """Solve one chunk of replicas; returns ``[(r, values, jump_counts, meta)]``."""
    s = _Setup(ExperimentConfig(resolved, Path(base_dir)))
    mode = resolved["run"]["mode"]
    paths = [sample_path(s.noise, s.time_grid, replica_seed(s.seed, r)) for r in replicas]
    if mode == "linear":
        sols = solve_linear_batch(s.solver, s.coeffs, s.f, s.g, s.u0, paths)
        metas = [{} for _ in sols]
    elif mode == "localized":
        nz = resolved["noise"]
        sols = [solve_localized(s.solver, s.coeffs, s.f, s.g, s.u0, p, nz["N0"], nz["truncation"]) for p in paths]
        metas = [{"first_large_jump_time": sol.meta["first_large_jump_time"],
                  "removed_jumps": len(sol.meta["removed_jumps"])} for sol in sols]
    else:
        nl = resolved["nonlinear"]
        forcing = fractional_forcing(s.grid, nl["alpha"], nl["beta"], s.noise.weights, nl["channel"], nl["eps"])
        sols = [solve_picard(s.solver, s.coeffs, forcing, s.u0, p) for p in paths]
        metas = [{"max_ratio": sol.meta["max_ratio"], "final_distance": sol.meta["final_distance"],
                  "picard_window": sol.meta["picard_window"]} for sol in sols]
    return [(r, sol.values, sol.jump_counts, m) for r, sol, m in zip(replicas, sols, metas)]


def _validate(s: _Setup, force):
    """Coercivity (or its partial-moment form) on the lattice; raises on failure unless forced."""
    r = s.cfg.resolved
    delta, K = r["checks"]["delta"], r["checks"]["K"]
    n0 = r["noise"]["N0"]
    check_paths = s.paths() if s.coeffs.path_dependent else [None]
    for p in check_paths:
        try:
            if n0 > 0:
                rep = check_partial_moment(s.noise, s.coeffs, delta, n0, s.grid, s.time_grid, K, p)
            else:
                rep = check_coercivity(s.coeffs, s.noise.weights, delta, K, s.grid, s.time_grid, p)
        except HypothesisViolation as exc:
            msg = str(exc)
        else:
            if rep.passed:
                continue
            msg = f"coercivity check failed: delta_min={rep.delta_min!r} (need {delta}), K_max={rep.K_max!r} (need {K})"
        if not force:
            raise HypothesisViolation(msg)
        log.warning("%s; continuing because of --force", msg)
        return


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _map_chunks(resolved, base_dir, n, jobs):
    chunks = _chunks(n)
    if jobs <= 1 or len(chunks) <= 1:
        for c in chunks:
            yield from _run_chunk(resolved, base_dir, c)
        return
    with ProcessPoolExecutor(max_workers=min(jobs, len(chunks))) as pool:
        futures = [pool.submit(_run_chunk, resolved, base_dir, c) for c in chunks]
        for fut in futures:
            yield from fut.result()


def cmd_simulate(cfg: ExperimentConfig, jobs, force):
    s = _Setup(cfg)
    _validate(s, force)
    r = cfg.resolved
    out = Path(r["run"]["out"])
    out.mkdir(parents=True, exist_ok=True)
    mode = r["run"]["mode"]
    if mode == "picard" and (s.f is not None or s.g is not None):
        log.warning("picard mode uses the fractional forcing; data.f and data.g are ignored")
    files = ["summary.csv"]
    summary = out / "summary.csv"
    meta_rows = []
    # the parent process is the only writer
    with open(summary, "w", newline="") as fh:
        fh.write(f"# {ENSEMBLE_CSV_VERSION} mode={mode}\n")
        writer = csv.writer(fh)
        writer.writerow(["replica", "time", "l2_norm", "h1_norm", "jump_count"])
        for rep, values, counts, meta in _map_chunks(r, str(cfg.base_dir), s.replicas, jobs):
            l2 = np.sqrt(s.grid.sobolev_sq_each(values, 0))
            h1 = np.sqrt(s.grid.sobolev_sq_each(values, 1))
            jc = np.concatenate([[0], counts])
            for t, a, b, c in zip(s.time_grid.nodes, l2, h1, jc):
                writer.writerow([rep, repr(float(t)), repr(float(a)), repr(float(b)), int(c)])
            if meta:
                meta_rows.append((rep, meta))
            if r["run"]["dump_fields"]:
                (out / "fields").mkdir(exist_ok=True)
                name = f"fields/final_r{rep:05d}.csv"
                with open(out / name, "w") as ff:
                    write_field_csv(Field(s.grid, values[-1]), ff)
                files.append(name)
    if meta_rows:
        keys = list(meta_rows[0][1])
        with open(out / "replica_meta.csv", "w", newline="") as fh:
            fh.write(f"# levyspde-replica-meta-csv v1 mode={mode}\n")
            writer = csv.writer(fh)
            writer.writerow(["replica"] + keys)
            for rep, meta in meta_rows:
                writer.writerow([rep] + [repr(meta[k]) for k in keys])
        files.append("replica_meta.csv")
    manifest = {
        "tool": "levyspde",
        "version": __version__,
        "command": "simulate",
        "config": cfg.json_ready(),
        "config_sha256": cfg.sha256,
        "master_seed": s.seed,
        "replica_seeds": s.seeds(),
        "outputs": {name: _sha256(out / name) for name in files},
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {len(files)} output file(s) and manifest.json to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# verify


def _combined_exit(reports):
    verdicts = [r.verdict for r in reports]
    if not verdicts or all(v == "vacuous" for v in verdicts):
        return EXIT_VACUOUS
    if any(v == "fail" for v in verdicts):
        return EXIT_FAIL
    return EXIT_OK


def _scaled(x, c):
    if x is None:
        return None
    if isinstance(x, list):
        return [_scaled(v, c) for v in x]
    return x * c


def _check_reports(s: _Setup, check):
    tg = s.time_grid
    if check == "quadratic-variation":
        reports = []
        for k, trip in enumerate(s.noise.triplets):
            if not math.isfinite(trip.weight):
                log.warning("channel %d has infinite second moment; skipped", k)
                continue
            rep = check_quadratic_variation(trip, tg, s.seeds())
            rep.name = f"quadratic-variation ch={k}"
            reports.append(rep)
        return reports
    if check == "levy-system":
        paths = s.paths()
        reports = []
        for k, trip in enumerate(s.noise.triplets):
            if not math.isfinite(trip.c_hat):
                log.warning("channel %d has infinite c_hat; skipped", k)
                continue
            gk = None if s.g is None else s.g[k]
            rep = check_levy_system(gk, paths, k, s.grid)
            rep.name = f"levy-system ch={k}"
            reports.append(rep)
        return reports
    if check == "apriori":
        paths = s.paths()
        reports = []
        for c in APRIORI_SCALES:
            f, g, u0 = _scaled(s.f, c), _scaled(s.g, c), _scaled(s.u0, c)
            sols = solve_linear_batch(s.solver, s.coeffs, f, g, u0, paths)
            rep = check_apriori(sols, f, g, u0, s.noise.weights)
            rep.name = f"apriori scale={c:g}"
            reports.append(rep)
        base = reports[0].ratio
        spread = max(abs(r.ratio - base) for r in reports) / base if base else 0.0
        if base and spread > 1e-10:
            for r in reports:
                r.verdict = "fail"
        for r in reports:
            r.extra["scale_spread"] = spread
        return reports
    if check == "sup-estimate":
        sols = solve_linear_batch(s.solver, s.coeffs, s.f, s.g, s.u0, s.paths())
        return [check_sup_estimate(sols, s.f, s.g, s.u0, s.noise.weights)]
    if check == "t-independence":
        runs = {}
        for m in T_MULTIPLES:
            tgm = TimeGrid(tg.T * m, tg.n_steps * m)
            sols = solve_linear_batch(s.with_time_grid(tgm), s.coeffs, s.f, s.g, s.u0, s.paths(tgm))
            runs[tgm.T] = (sols, s.f, s.g, s.u0)
        rep = check_t_independence(s.coeffs, runs, s.noise.weights)
        return list(rep.extra["per_T"].values()) + [rep]
    raise ConfigError(f"unknown check {check!r}; expected one of {', '.join(CHECKS)}")


def cmd_verify(cfg: ExperimentConfig, check):
    if check not in CHECKS:
        raise ConfigError(f"unknown check {check!r}; expected one of {', '.join(CHECKS)}")
    s = _Setup(cfg)
    reports = _check_reports(s, check)
    buf = io.StringIO()
    write_reports_csv(reports, buf)
    sys.stdout.write(buf.getvalue())
    out = Path(cfg.resolved["run"]["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / f"verify_{check}.csv").write_text(buf.getvalue())
    return _combined_exit(reports)


# ---------------------------------------------------------------------------
# converge


def cmd_converge(cfg: ExperimentConfig, ladder=None, reference_steps=None):
    s = _Setup(cfg)
    conv = cfg.resolved["converge"]
    steps = sorted(ladder or conv["ladder"])
    if len(steps) < 3:
        raise ConfigError(f"converge.ladder: a fit needs at least 3 resolutions, got {len(steps)}")
    ref_steps = reference_steps or conv["reference_steps"] or 16 * steps[-1]
    try:
        check_nested(steps, ref_steps)
    except ValueError as exc:
        raise ConfigError(f"converge.ladder: {exc}") from None
    fine_tg = TimeGrid(s.time_grid.T, ref_steps)
    paths = s.paths(fine_tg)
    try:
        _require_heat(s.coeffs, s.grid)
    except HypothesisViolation:
        reference = solve_linear_batch(s.with_time_grid(fine_tg), s.coeffs, s.f, s.g, s.u0, paths)
        kind = "self-reference"
    else:
        reference = [mild_solution_oracle(s.u0, s.g, p, s.grid, s.f) for p in paths]
        kind = "mild-oracle"

    def solve(coarse):
        return solve_linear_batch(s.with_time_grid(coarse[0].grid), s.coeffs, s.f, s.g, s.u0, coarse)

    table = convergence_study(solve, reference, paths, steps)
    out = Path(cfg.resolved["run"]["out"])
    out.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    table.write_csv(buf)
    (out / "convergence.csv").write_text(buf.getvalue())
    sys.stdout.write(buf.getvalue())
    print(f"reference={kind} steps={ref_steps} order={table.order:.4f} r2={table.r_squared:.4f}")
    return EXIT_OK if table.r_squared >= 0.9 else EXIT_FAIL


# ---------------------------------------------------------------------------
# coercivity


def cmd_coercivity(cfg: ExperimentConfig):
    s = _Setup(cfg)
    r = cfg.resolved
    delta, K, n0 = r["checks"]["delta"], r["checks"]["K"], r["noise"]["N0"]
    check_paths = s.paths() if s.coeffs.path_dependent else [None]
    reports = []
    for p in check_paths:
        if n0 > 0:
            reports.append(check_partial_moment(s.noise, s.coeffs, delta, n0, s.grid, s.time_grid, K, p))
        else:
            reports.append(check_coercivity(s.coeffs, s.noise.weights, delta, K, s.grid, s.time_grid, p))
    worst = min(reports, key=lambda x: (x.passed, x.delta_min, -x.K_max))
    buf = io.StringIO()
    buf.write(f"# {COERCIVITY_CSV_VERSION} partial_moment_n0={n0}\n")
    writer = csv.writer(buf)
    writer.writerow(["quantity", "value"])
    for key, value in worst.rows():
        writer.writerow([key, repr(value) if isinstance(value, float) else value])
    sys.stdout.write(buf.getvalue())
    out = Path(r["run"]["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "coercivity.csv").write_text(buf.getvalue())
    return EXIT_OK if worst.passed else EXIT_FAIL


# ---------------------------------------------------------------------------
# entry point


def _global_flags(p, suppress):
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    p.add_argument("--config", metavar="PATH", help="experiment config (YAML) or a run manifest", **kw)
    p.add_argument("--seed", type=int, metavar="U64", help="master seed", **kw)
    p.add_argument("--replicas", type=int, metavar="N", help="number of replicas", **kw)
    p.add_argument("--jobs", type=int, metavar="N", help="worker processes (default: logical cores)", **kw)
    p.add_argument("--out", metavar="DIR", help="output directory", **kw)
    p.add_argument("--force", action="store_true", help="run despite failed assumption checks", **kw)
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging", **kw)


def build_parser():
    parser = argparse.ArgumentParser(prog="levyspde", description="Simulate and check linear SPDEs driven by Lévy noise.")
    parser.add_argument("--version", action="version", version=f"levyspde {__version__}")
    _global_flags(parser, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("simulate", help="solve R replicas and write summaries and a manifest")
    _global_flags(p, suppress=True)
    p = sub.add_parser("verify", help="run one empirical check")
    p.add_argument("check", help=f"one of: {', '.join(CHECKS)}")
    _global_flags(p, suppress=True)
    p = sub.add_parser("converge", help="temporal convergence study on a nested ladder")
    p.add_argument("--ladder", help="comma-separated step counts, e.g. 64,128,256")
    p.add_argument("--reference-steps", type=int, help="step count of the reference solution")
    _global_flags(p, suppress=True)
    p = sub.add_parser("coercivity", help="check coercivity on the coefficient lattice")
    _global_flags(p, suppress=True)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    opt = vars(args)
    logging.basicConfig(level=logging.DEBUG if opt.get("verbose") else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    if "config" not in opt:
        print("error: --config is required", file=sys.stderr)
        return EXIT_FAIL
    try:
        cfg = ExperimentConfig.from_file(opt["config"])
        cfg = cfg.with_overrides(seed=opt.get("seed"), replicas=opt.get("replicas"), out=opt.get("out"))
        jobs = opt.get("jobs") or cfg.resolved["run"]["jobs"] or os.cpu_count() or 1
        if args.command == "simulate":
            return cmd_simulate(cfg, jobs, opt.get("force", False))
        if args.command == "verify":
            return cmd_verify(cfg, args.check)
        if args.command == "converge":
            ladder = None
            if args.ladder:
                try:
                    ladder = [int(x) for x in args.ladder.split(",") if x.strip()]
                except ValueError:
                    raise ConfigError(f"--ladder: expected integers, got {args.ladder!r}") from None
            return cmd_converge(cfg, ladder, args.reference_steps)
        return cmd_coercivity(cfg)
    except (ConfigError, HypothesisViolation, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except SolverError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except LevySPDEError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
