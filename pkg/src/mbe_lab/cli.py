"""Command-line entry point ``mbe-lab``.

Exit codes: 0 success, 1 error or failed verification, 2 blow-up detected.
Every run writes ``<out>/<run_id>/meta.json``; its ``config`` entry is the
fully resolved configuration and can be passed back through ``--config``.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig, parse_config
from .diagnostics import (
    DETERMINISTIC_PROBES,
    ENERGY_PROBES,
    STOCHASTIC_PROBES,
    RunRecord,
    Status,
    _json_default,
    default_coarsening_window,
    fit_coarsening_exponent,
    gronwall_check,
)
from .errors import DegenerateFit, EnsembleError, MBELabError
from .semigroup import log_samples, verify_decay
from .solver import SolverConfig, picard_iterate, solve_deterministic
from .spectral import write_snapshot, x0_norm
from .stochastic import EnsembleJob, Functional, default_workers, mc_ensemble, solve_stochastic

EXIT_OK, EXIT_FAIL, EXIT_BLOWUP = 0, 1, 2

# sections whose required keys each subcommand needs
REQUIRED = {
    "run-deterministic": ("grid", "solver"),
    "run-stochastic": ("grid", "solver", "noise"),
    "mc-moments": ("grid", "solver", "noise"),
    "verify-decay": (),
    "verify-gronwall": ("grid", "solver"),
    "verify-picard": ("grid",),
    "coarsening-study": ("grid", "solver"),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # usage errors share the generic failure code; 2 is reserved for blow-up
        self.print_usage(sys.stderr)
        self.exit(EXIT_FAIL, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mbe-lab", description="Pseudospectral MBE simulator and verification lab.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in REQUIRED:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=name != "verify-decay", type=Path,
                        help="config file, or a meta.json written by an earlier run")
        sp.add_argument("--seed", type=int, help="override noise.seed and init.seed")
        sp.add_argument("--workers", type=int, default=None,
                        help="ensemble worker processes (default: $MBE_LAB_THREADS or 1)")
        sp.add_argument("--out", type=Path, help="output root (default: output.dir)")
    return p


def read_config_text(path: Path) -> str:
    text = path.read_text()
    if text.lstrip().startswith("{"):
        return json.loads(text)["config"]
    return text


class RunDir:
    """Single-owner output directory ``<root>/<run_id>``."""

    def __init__(self, cfg: ExperimentConfig, command: str, out: Path | None):
        self.cfg = cfg
        self.command = command
        self.path = (out if out is not None else cfg.output_dir) / cfg.run_id
        self.path.mkdir(parents=True, exist_ok=True)
        self.meta: dict = {"subcommand": command, "config": cfg.to_text()}

    def file(self, name: str) -> Path:
        return self.path / name

    def write_rows(self, name: str, header, rows) -> None:
        with open(self.file(name), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([_cell(v) for v in row])

    def write_fields(self, record: RunRecord) -> None:
        if not record.snapshots and not record.fields:
            return
        d = self.file("fields")
        d.mkdir(exist_ok=True)
        for t, name, f in record.snapshots:
            write_snapshot(d / f"{name}_t{t:.6g}.mbef", f)
        for name, f in record.fields.items():
            if name == "u" or record.metadata.get("noise") is not None:
                write_snapshot(d / f"{name}_final.mbef", f)

    def finish(self, status: str, **extra) -> None:
        self.meta.update(extra)
        self.meta["status"] = status
        with open(self.file("meta.json"), "w") as fh:
            json.dump(self.meta, fh, indent=2, sort_keys=True, default=_json_default)
            fh.write("\n")


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    return v


def _verdict(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True, default=_json_default))


# ---------------------------------------------------------------------------
# Subcommands; each returns an exit code


def _single_run(cfg: ExperimentConfig, run: RunDir, stochastic: bool) -> int:
    u0 = cfg.init.build(cfg.grid)
    if stochastic:
        rec = solve_stochastic(u0, cfg.model, cfg.noise, cfg.solver, cfg.probes or STOCHASTIC_PROBES)
    else:
        rec = solve_deterministic(u0, cfg.model, cfg.solver, cfg.probes or DETERMINISTIC_PROBES)
    rec.write_csv(run.file("data.csv"))
    run.write_fields(rec)
    run.meta["run"] = rec.metadata
    run.finish(rec.status_text)
    return EXIT_BLOWUP if rec.status is Status.BLOWUP else EXIT_OK


def cmd_run_deterministic(cfg, run, workers):
    return _single_run(cfg, run, stochastic=False)


def cmd_run_stochastic(cfg, run, workers):
    return _single_run(cfg, run, stochastic=True)


def _ensemble(cfg: ExperimentConfig, probes, workers, functionals=(), keep=False):
    job = EnsembleJob(cfg.init.build(cfg.grid), cfg.model, cfg.noise, cfg.solver, tuple(probes),
                      tuple(functionals))
    return mc_ensemble(job, cfg.values["ensemble.n_samples"], workers, keep_records=keep)


def _ensemble_failure(run: RunDir, exc: EnsembleError) -> int:
    failures = [{"index": i, "seed": s, "message": m} for i, s, m in exc.failures]
    run.finish("error", failures=failures)
    print(f"ensemble failed: {exc}", file=sys.stderr)
    return EXIT_BLOWUP if any(m.startswith("blowup") for _, _, m in exc.failures) else EXIT_FAIL


def cmd_mc_moments(cfg, run, workers):
    probes = cfg.probes or STOCHASTIC_PROBES
    functionals = []
    if "z.l2" in probes:
        functionals.append(Functional("z.l2", "sup", 2))
    if "z.grad_l4" in probes:
        functionals.append(Functional("z.grad_l4", "integral", 4))
    try:
        stats = _ensemble(cfg, probes, workers, functionals)
    except EnsembleError as exc:
        return _ensemble_failure(run, exc)
    header = ["t"] + [f"{p}_{k}" for p in probes for k in ("mean", "stderr")]
    cols = [stats.times] + [a for p in probes for a in (stats.mean(p), stats.stderr(p))]
    run.write_rows("data.csv", header, zip(*cols))
    summary = {name: dict(zip(("mean", "stderr"), stats.functional(name))) for name in stats.functional_samples}
    run.finish("completed", n_samples=stats.n_samples, seeds=stats.seeds, functionals=summary)
    return EXIT_OK


def cmd_verify_decay(cfg, run, workers):
    d = cfg.section("decay")
    checks = verify_decay(t_samples=log_samples(d["t_min"], d["t_max"], d["samples"]), tolerance=d["tolerance"])
    rows = [c.row() for c in checks]
    run.write_rows("data.csv", list(rows[0]), [r.values() for r in rows])
    passed = all(c.passed for c in checks)
    run.finish("completed", n_fits=len(checks), n_failed=sum(not c.passed for c in checks), all_pass=passed)
    _verdict({"pass": passed, "n_fits": len(checks)})
    return EXIT_OK if passed else EXIT_FAIL


def cmd_verify_gronwall(cfg, run, workers):
    probes = ("C", "x0", *ENERGY_PROBES)
    if cfg.noise is None:
        u0 = cfg.init.build(cfg.grid)
        records = [solve_deterministic(u0, cfg.model, cfg.solver, probes)]
        seeds = [None]
    else:
        try:
            stats = _ensemble(cfg, STOCHASTIC_PROBES, workers, keep=True)
        except EnsembleError as exc:
            return _ensemble_failure(run, exc)
        records, seeds = stats.records, stats.seeds
    rows, verdicts = [], []
    for i, (rec, seed) in enumerate(zip(records, seeds)):
        if rec.status is not Status.COMPLETED:
            run.finish(rec.status_text, sample=i)
            return EXIT_BLOWUP
        chk = gronwall_check(rec)
        rows += [(i, t, m, e, m_) for t, m, e, m_ in zip(chk.times, chk.m_series, chk.envelope, chk.margin)]
        v = {"sample": i, "seed": seed, **chk.verdict()}
        verdicts.append(v)
        _verdict(v)
    run.write_rows("data.csv", ["sample", "t", "M", "envelope", "margin"], rows)
    passed = all(v["pass"] for v in verdicts)
    run.finish("completed", verdicts=verdicts, all_pass=passed)
    return EXIT_OK if passed else EXIT_FAIL


def cmd_verify_picard(cfg, run, workers):
    p = cfg.section("picard")
    u0 = cfg.init.build(cfg.grid)
    rows, reports = [], []
    for j in range(p["halvings"] + 1):
        horizon = p["horizon"] / 2**j
        rep = picard_iterate(u0, cfg.model, horizon, p["n_time_nodes"], p["tol"], p["max_iter"])
        entry = {"horizon": horizon, "converged": rep.converged, "iterates": rep.iterates,
                 "ratios": rep.ratios, "predicted_T": rep.predicted_T, "message": rep.message}
        if rep.converged:
            h = horizon / p["n_time_nodes"]
            ref = solve_deterministic(u0, cfg.model, SolverConfig(dt=h / 64, t_end=horizon), ("x0",))
            err = x0_norm(rep.final - ref.fields["u"])
            entry.update(etd_error=err, error_over_h=err / h)
        reports.append(entry)
        rows += [(horizon, k + 1, dist, rep.ratios[k - 1] if k else float("nan"))
                 for k, dist in enumerate(rep.distances)]
    run.write_rows("data.csv", ["horizon", "iteration", "distance", "ratio"], rows)
    first = reports[0]
    r = first["ratios"]
    contraction = first["converged"] and all(x < 0.5 for x in r) and all(b <= a for a, b in zip(r, r[1:]))
    passed = contraction and all(e["converged"] for e in reports)
    run.finish("completed", horizons=reports, monotone_contraction=contraction, all_pass=passed)
    _verdict({"pass": passed, "monotone_contraction": contraction,
              "horizons": [e["horizon"] for e in reports]})
    return EXIT_OK if passed else EXIT_FAIL


def cmd_coarsening_study(cfg, run, workers):
    c = cfg.section("coarsening")
    if cfg.noise is None:
        rec = solve_deterministic(cfg.init.build(cfg.grid), cfg.model, cfg.solver, ("C",))
        rec.metadata["dt"] = cfg.solver.dt
        stderr = np.zeros_like(rec.times)
        extra = {"n_samples": 1}
    else:
        try:
            stats = _ensemble(cfg, ("C",), workers)
        except EnsembleError as exc:
            return _ensemble_failure(run, exc)
        rec = stats.mean_record({"dt": cfg.solver.dt})
        stderr = stats.stderr("C")
        extra = {"n_samples": stats.n_samples, "seeds": stats.seeds}
    if rec.status is Status.BLOWUP:
        run.finish(rec.status_text)
        return EXIT_BLOWUP
    run.write_rows("data.csv", ["t", "C_mean", "C_stderr"], zip(rec.times, rec["C"], stderr))
    lo = c["t_min"] if c["t_min"] is not None else default_coarsening_window(rec)[0]
    window = (lo, c["t_max"])
    try:
        fit = fit_coarsening_exponent(rec, window)
    except DegenerateFit as exc:
        # flat deterministic start: no roughening is the expected outcome
        verdict = {"pass": cfg.noise is None, "coarsening": False, "reason": str(exc), "window": window}
    else:
        ok = abs(fit.exponent - 0.5) <= 0.05
        verdict = {"pass": ok, "coarsening": True, "exponent": fit.exponent,
                   "r_squared": fit.r_squared, "window": window}
    run.finish("completed", verdict=verdict, **extra)
    _verdict(verdict)
    return EXIT_OK if verdict["pass"] else EXIT_FAIL


COMMANDS = {
    "run-deterministic": cmd_run_deterministic,
    "run-stochastic": cmd_run_stochastic,
    "mc-moments": cmd_mc_moments,
    "verify-decay": cmd_verify_decay,
    "verify-gronwall": cmd_verify_gronwall,
    "verify-picard": cmd_verify_picard,
    "coarsening-study": cmd_coarsening_study,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        text = read_config_text(args.config) if args.config else ""
        cfg = parse_config(text, REQUIRED[args.command])
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
    except (OSError, ValueError, KeyError, MBELabError) as exc:
        print(f"mbe-lab: configuration error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    workers = args.workers if args.workers is not None else default_workers()
    run = RunDir(cfg, args.command, args.out)
    run.meta["seed"] = args.seed
    try:
        return COMMANDS[args.command](cfg, run, workers)
    except Exception as exc:
        run.finish("error", error=f"{type(exc).__name__}: {exc}")
        print(f"mbe-lab: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
