"""Command-line entry point.

``robinstokes <subcommand> --config exp.toml [--out DIR] [--threads N] [--seed S]``

Artifacts go to ``DIR/<config hash>/``. Exit status is 0 on success, 1 on a
solver failure and 2 on a configuration error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, parse_config, serialize_config
from .forward import MeasurementTrace, SolverError, verify_energy_estimate
from .inversion import add_noise, gauss_newton_solve, synthetic_trace
from .manufactured import convergence_table, temporal_table
from .mesh import refine
from .parameters import sample_K
from .sensitivity import assemble_jacobian
from .stability import estimate_constant, hypothesis_check, identifiability_scan

log = logging.getLogger("robinstokes")

SUBCOMMANDS = ("forward", "sensitivity", "invert", "probe-stability", "check-hypotheses", "convergence")


class _JsonFormatter(logging.Formatter):
    def format(self, record):
        entry = {
            "time": round(record.created, 3),
            "level": record.levelname,
            "logger": record.name,
            "message": record.getMessage(),
        }
        if record.exc_info:
            entry["exception"] = self.formatException(record.exc_info)
        return json.dumps(entry)


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else str(x)
    return obj


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n")


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


# -- subcommands ---------------------------------------------------------------


def cmd_forward(cfg: ExperimentConfig, out: Path, threads: int) -> dict:
    model = cfg.build_model()
    q = cfg.resolve_coefficient(model.basis)
    traj = model.solve(q, keep_factors=False)
    tr = model.trace_of(traj.velocity)
    tr.to_csv(out / "trace.csv", model.grid.times, model.trace_op.labels(model.spaces))
    denom = model.l2_norm_u0() + model.boundary_data_norm(model.data.g, "inlet") + model.boundary_data_norm(model.data.kappa, "outlet")
    summary = {
        "coefficient": q.coeffs,
        "trace_norm": tr.norm(),
        "l2h1_norm": model.l2h1_norm(traj),
        "data_norm": denom,
        "data_bound_M1": model.data_bound(),
        "n_params": model.n_params,
        "n_free_velocity": model.spaces.n_free,
        "n_pressure": model.spaces.n_pressure,
    }
    write_json(out / "forward.json", summary)
    return summary


def cmd_sensitivity(cfg: ExperimentConfig, out: Path, threads: int) -> dict:
    model = cfg.build_model()
    q = cfg.resolve_coefficient(model.basis)
    J = assemble_jacobian(model, q, threads=threads)
    sv = np.linalg.svd(J.whitened(), compute_uv=False)
    report = {"coefficient": q.coeffs, "gram": J.report(), "gram_eigenvalues": J.gram_eigenvalues(), "singular_values": sv}
    write_json(out / "sensitivity.json", report)
    n1, ntr, M = J.columns.shape
    rows = [[float(t), lab] + list(J.columns[n, i]) for n, t in enumerate(model.grid.times) for i, lab in enumerate(model.trace_op.labels(model.spaces))]
    write_csv(out / "jacobian.csv", ["t", "component"] + [f"d{j}" for j in range(M)], rows)
    return report


def cmd_invert(cfg: ExperimentConfig, out: Path, threads: int) -> dict:
    model = cfg.build_model()
    K = cfg.admissible_set()
    inv = cfg.inversion
    q_true = None
    if inv.data_csv:
        times, vals = MeasurementTrace.read_csv(inv.data_csv)
        if vals.shape != (model.grid.n_steps + 1, model.trace_op.size) or not np.allclose(times, model.grid.times):
            raise ConfigError("inversion.data_csv: trace does not match the configured time grid and window")
        measured = MeasurementTrace(vals, model.grid.weights, model.trace_op.gram)
    else:
        q_true = cfg.resolve_coefficient(model.basis)
        measured = synthetic_trace(model, q_true, crime_free=inv.crime_free)
    measured = add_noise(measured, inv.noise, inv.seed)
    q0 = cfg.resolve_coefficient(model.basis, inv.q_init, inv.seed)
    res = gauss_newton_solve(model, measured, K, q0, reg=inv.reg, max_iter=inv.max_iter)
    report = res.to_dict()
    report["noise"] = inv.noise
    if q_true is not None:
        report["q_true"] = q_true.coeffs
        report["relative_linf_error"] = float(np.max(np.abs(res.q.coeffs - q_true.coeffs)) / np.max(np.abs(q_true.coeffs)))
    write_json(out / "inversion.json", report)
    write_csv(
        out / "iterations.csv",
        ["iter", "misfit", "step_norm", "damping", "grad_norm"],
        [[h["iter"], h["misfit"], h["step_norm"], h["damping"], h["grad_norm"]] for h in res.history],
    )
    return report


def cmd_probe(cfg: ExperimentConfig, out: Path, threads: int) -> dict:
    model = cfg.build_model()
    K = cfg.admissible_set()
    pr = cfg.probe
    rep = estimate_constant(model, K, pr.n_pairs, pr.seed, pr.small_scale, threads=threads)
    scan = identifiability_scan(model, K, pr.n_pairs, pr.seed + 1, rep.C_emp, pr.tolerance, threads=threads)
    report = rep.to_dict()
    report["identifiability"] = {k: scan[k] for k in ("n_pairs", "min_trace_distance", "violations", "holds", "tolerance")}
    write_json(out / "stability.json", report)
    write_csv(
        out / "pairs.csv",
        ["pair", "kind", "parameter_distance", "trace_distance", "ratio", "predicted_ratio"],
        zip(range(rep.n_pairs), rep.kinds, rep.parameter_distances, rep.trace_distances, rep.ratios, rep.predicted_ratios),
    )
    return report


def cmd_hypotheses(cfg: ExperimentConfig, out: Path, threads: int) -> dict:
    model = cfg.build_model()
    K = cfg.admissible_set()
    h = cfg.hypotheses
    samples = sample_K(K, model.basis, h.n_samples, h.seed)
    report = hypothesis_check(model, samples, K, seed=h.seed, n_pairs=h.n_pairs, threads=threads)
    energy = verify_energy_estimate(model, samples)
    report["energy"] = energy
    write_json(out / "hypotheses.json", report)
    return report


def cmd_convergence(cfg: ExperimentConfig, out: Path, threads: int) -> dict:
    cv = cfg.convergence
    window = tuple(cfg.measurement.interval)
    base = cfg.convergence_mesh()
    space = convergence_table(base, cfg.time.T, cv.n_t0, cv.levels, cfg.manufactured(), cv.coeffs, window=window)
    fine = base
    for _ in range(cv.temporal_refinements):
        fine = refine(fine)
    temporal = temporal_table(fine, cfg.time.T, cv.temporal_steps, cfg.manufactured(temporal=True), cv.coeffs, window=window)
    keys = ("l2l2", "l2h1", "trace")
    write_csv(
        out / "convergence.csv",
        ["level", "h", "n_t", *keys, *(f"rate_{k}" for k in keys)],
        [
            [r["level"], r["h"], r["n_t"], *(r[k] for k in keys), *((space["rates"][k][i - 1] if i else "") for k in keys)]
            for i, r in enumerate(space["rows"])
        ],
    )
    write_csv(
        out / "temporal.csv",
        ["n_t", "dt", *keys, *(f"rate_{k}" for k in keys)],
        [
            [r["n_t"], r["dt"], *(r[k] for k in keys), *((temporal["rates"][k][i - 1] if i else "") for k in keys)]
            for i, r in enumerate(temporal["rows"])
        ],
    )
    report = {"spatial": space, "temporal": temporal}
    write_json(out / "convergence.json", report)
    return report


COMMANDS = {
    "forward": cmd_forward,
    "sensitivity": cmd_sensitivity,
    "invert": cmd_invert,
    "probe-stability": cmd_probe,
    "check-hypotheses": cmd_hypotheses,
    "convergence": cmd_convergence,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="robinstokes", description="Robin coefficient identification for unsteady Stokes flow")
    sub = p.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}")
    sub.required = True
    for name in SUBCOMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="TOML experiment file")
        s.add_argument("--out", default="runs", help="parent directory for artifacts (default: runs)")
        s.add_argument("--threads", type=int, default=1, help="worker threads for independent solves")
        s.add_argument("--seed", type=int, default=None, help="override every seed in the config")
    return p


def _setup_logging(out: Path | None):
    log.setLevel(logging.INFO)
    for h in list(log.handlers):
        log.removeHandler(h)
        h.close()
    err = logging.StreamHandler(sys.stderr)
    err.setFormatter(_JsonFormatter())
    log.addHandler(err)
    if out is not None:
        fh = logging.FileHandler(out / "run.log", mode="a")
        fh.setFormatter(_JsonFormatter())
        log.addHandler(fh)
    log.propagate = False


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 2
    _setup_logging(None)
    try:
        if args.threads < 1:
            raise ConfigError("--threads: must be at least 1")
        if args.seed is not None and args.seed < 0:
            raise ConfigError("--seed: must be nonnegative")
        cfg = parse_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return 2
    out = Path(args.out) / cfg.hash()
    existed = out.exists()
    out.mkdir(parents=True, exist_ok=True)
    _setup_logging(out)
    if existed:
        log.warning("output directory %s exists; overwriting", out)
    (out / "config.toml").write_text(serialize_config(cfg))
    start = time.perf_counter()
    log.info("%s started (config hash %s, threads %d)", args.command, cfg.hash(), args.threads)
    try:
        mesh = cfg.build_mesh()
        (out / "mesh.json").write_text(mesh.to_json())
        COMMANDS[args.command](cfg, out, args.threads)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return 2
    except (SolverError, np.linalg.LinAlgError, FloatingPointError, RuntimeError, ValueError) as exc:
        log.exception("solver error: %s", exc)
        return 1
    log.info("%s finished in %.2f s; artifacts in %s", args.command, time.perf_counter() - start, out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
