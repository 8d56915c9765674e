"""Command-line runner: ``foliated-averaging <subcommand> [options]``.

Every run writes its CSV/JSON artifacts plus ``manifest.json`` into ``--out``.
On failure, whatever was computed is flushed, a ``FAILED`` marker holding the
error is written, and the exit status is 1.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import math
import os
import subprocess
import sys
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .averaging import build_Q_table, estimate_eta0, integrate_averaged, lp_norm, stacked_driver
from .bihari import SWEEP_HEADER, sweep, sweep_rows
from .config import ConfigError, RunConfig, load_config
from .foliation import assert_leaf_tangency
from .harness import ExperimentConfig, RateFitResult, decompose_errors, run_rate_experiment
from .io import sha256_file, write_csv
from .levy import sample_levy_path, validate_hypothesis1
from .marcus import MarcusProblem, integrate
from .rng import RandomStreams

SUBCOMMANDS = ("simulate", "estimate-q", "eta0", "rate", "decompose", "bihari", "validate")


def _observable(name: str, system):
    if name == "pi_K":
        return None
    if name == "u_squared":
        n = system.chart.leaf_dim
        return lambda x: np.sum(x[..., :n] ** 2, axis=-1)
    raise ConfigError(f"unknown observable {name!r} (pi_K or u_squared)")


def _version() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True,
                             text=True, cwd=Path(__file__).parent, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    command: str
    config: dict
    defaults_applied: list
    seed: int
    version: str
    started: str
    finished: str = ""
    status: str = "running"
    outputs: dict = field(default_factory=dict)
    threads: int = 1
    error: str = ""

    def add(self, path: Path, root: Path):
        self.outputs[str(path.relative_to(root))] = sha256_file(path)

    def write(self, root: Path) -> Path:
        path = root / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def verify_manifest(path) -> dict[str, bool]:
    """Recompute the hash of every output listed in a manifest."""
    path = Path(path)
    data = json.loads(path.read_text(encoding="utf-8"))
    root = path.parent
    return {name: (root / name).exists() and sha256_file(root / name) == digest
            for name, digest in data["outputs"].items()}


@dataclass
class PartialResults:
    """Rows computed so far, flushed to ``path`` if the run fails."""

    path: Path | None = None
    header: tuple = ()
    rows: list = field(default_factory=list)

    def flush(self) -> Path | None:
        if self.path is None or not self.rows:
            return None
        return write_csv(self.path, self.header, self.rows)


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n", encoding="utf-8")
    return path


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def resolve_threads(flag: int | None, config_value: int | None = None) -> int:
    """``--threads`` beats ``FOLIATED_THREADS`` beats the config beats the core count."""
    if flag is not None:
        return max(1, flag)
    env = os.environ.get("FOLIATED_THREADS")
    if env:
        return max(1, int(env))
    if config_value:
        return config_value
    return os.cpu_count() or 1


# ---------------------------------------------------------------------------
# subcommands; each returns a list of written paths and an optional summary


def cmd_rate(cfg: RunConfig, exp: ExperimentConfig, out: Path, args, partial: PartialResults):
    partial.path, partial.header = out / "rate_results.csv", RateFitResult.CSV_HEADER

    def on_eps(e, samples):
        if samples is not None:
            lp, se = lp_norm([s.sup_error for s in samples], exp.p)
            frac = float(np.mean([s.truncation_cause != "horizon" for s in samples]))
            partial.rows.append((e, exp.p, exp.T, exp.n_paths, lp, se, frac, math.nan))

    if args.synthetic:
        res = run_rate_experiment(exp, error_injector=lambda e: 3.0 * e**0.25)
    else:
        res = run_rate_experiment(exp, on_eps=on_eps)
    paths = [res.to_csv(out / "rate_results.csv")]
    summary = res.summary()
    summary["synthetic"] = bool(args.synthetic)
    summary["seed"] = exp.seed
    summary["monotone_violations_4sigma"] = res.monotone_violations(4.0)
    paths.append(_write_json(out / "summary.json", summary))
    return paths


def cmd_estimate_q(cfg: RunConfig, exp: ExperimentConfig, out: Path, args, partial):
    s = cfg.section("estimate_q")
    system = exp.build_system()
    obs = _observable(s["observable"], system)
    table = build_Q_table(system, s["v_grid"], s["horizon"], s["replications"], RandomStreams(exp.seed),
                          h=obs, step=exp.numerics.leaf_h, burn_in=exp.numerics.burn_in,
                          ode_steps=exp.numerics.ode_steps)
    paths = [table.to_csv(out / "q_table.csv")]
    summary = {"observable": s["observable"], "seed": exp.seed, "v": list(table.v), "Q": list(table.Q),
               "std_error": list(table.std_error)}
    if system.closed_form_Q is not None and obs is None:
        summary["closed_form"] = [float(np.asarray(system.closed_form_Q(v))) for v in table.v]
    paths.append(_write_json(out / "summary.json", summary))
    return paths


def cmd_eta0(cfg: RunConfig, exp: ExperimentConfig, out: Path, args, partial):
    s = cfg.section("eta0")
    system = exp.build_system()
    est = estimate_eta0(system, _observable(s["observable"], system), s["v"], exp.eta0_times,
                        exp.eta0_replications, exp.p, RandomStreams(exp.seed), step=exp.numerics.leaf_h,
                        ode_steps=exp.numerics.ode_steps)
    paths = [write_csv(out / "eta0.csv", ("t", "lp_error", "std_error"),
                       zip(est.times, est.lp_errors, est.std_errors))]
    paths.append(_write_json(out / "summary.json", {
        "fitted_form": est.fitted_form, "params": est.params, "Q": est.Q_value, "note": est.note,
        "seed": exp.seed}))
    return paths


def cmd_simulate(cfg: RunConfig, exp: ExperimentConfig, out: Path, args, partial):
    s = cfg.section("simulate")
    eps = float(args.eps[0]) if args.eps else s["eps"]
    system = exp.build_system()
    streams = RandomStreams(exp.seed)
    i = s["path_index"]
    zp = sample_levy_path(system.nu, exp.T / eps, streams.generator(i, "Z"))
    ztp = sample_levy_path(system.nu_prime, exp.T, streams.generator(i, "Ztilde"))
    driver, _ = stacked_driver(zp, ztp, eps)
    prob = MarcusProblem(system.perturbed_drift(eps), system.perturbed_jump(eps), system.initial_point, driver,
                         exp.T / eps, exp.numerics.h, exp.numerics.ode_steps)
    x = integrate(prob, exit_region=system.chart.in_U)
    w = integrate_averaged(system, None if exp.q_table is None else _qtable(exp), system.chart.project(
        system.initial_point), exp.T, ztp, exp.numerics.h, exp.numerics.ode_steps)
    paths = [x.to_csv(out / "perturbed_path.csv"), w.to_csv(out / "averaged_path.csv")]
    paths.append(_write_json(out / "summary.json", {
        "eps": eps, "T": exp.T, "path_index": i, "seed": exp.seed, "jumps_Z": len(zp), "jumps_Ztilde": len(ztp),
        "exit_time_fast_clock": float(x.exit_time), "exit_time_averaged": float(w.exit_time)}))
    return paths


def _qtable(exp):
    from .averaging import QTable

    return QTable.from_csv(exp.q_table)


def cmd_decompose(cfg: RunConfig, exp: ExperimentConfig, out: Path, args, partial):
    s = cfg.section("decompose")
    eps = float(args.eps[0]) if args.eps else s["eps"]
    n = args.paths if args.paths is not None else s["n_paths"]
    system = exp.build_system()
    q = None if exp.q_table is None else _qtable(exp)
    rows = decompose_errors(system, eps, exp.T, exp.p, RandomStreams(exp.seed), range(n), exp.numerics, exp.c, q)
    paths = [write_csv(out / "decomposition.csv",
                       ("path_index", "A1", "A2", "A3", "total", "residual", "triangle_holds"),
                       ((d.path_index, d.A1, d.A2, d.A3, d.total, d.residual, d.triangle_holds) for d in rows))]
    violations = sum(not d.triangle_holds for d in rows)
    paths.append(_write_json(out / "summary.json", {"eps": eps, "T": exp.T, "c": exp.c, "n_paths": n,
                                                    "violations": violations, "seed": exp.seed}))
    return paths


def cmd_bihari(cfg: RunConfig, exp: ExperimentConfig, out: Path, args, partial):
    s = cfg.section("bihari")
    reports = sweep(s["p_values"], s["eps_T"], c=s["c"], T=s["T"], m=s["m"], k=s["k"])
    paths = [write_csv(out / "bihari_sweep.csv", SWEEP_HEADER, sweep_rows(reports))]
    fitted = [r.fitted_C for r in reports]
    paths.append(_write_json(out / "summary.json", {
        "all_dominant": all(r.holds for r in reports), "fitted_C_min": min(fitted), "fitted_C_max": max(fitted),
        "fitted_C_ratio": max(fitted) / min(fitted)}))
    return paths


def cmd_validate(cfg: RunConfig, exp: ExperimentConfig, out: Path, args, partial):
    system = exp.build_system()
    rep = validate_hypothesis1(system.nu, system.nu_prime, exp.p)
    tan = assert_leaf_tangency(system.fields, system.chart, 1000, RandomStreams(exp.seed).generator(0, "sample"))
    report = {"hypothesis1": rep.as_dict(), "tangency": {"samples": tan.samples, "max_violation":
                                                         tan.max_violation}, "system": system.name,
              "passed": rep.passed}
    paths = [_write_json(out / "validate.json", report)]
    if not rep.passed:
        raise RuntimeError("moment hypothesis fails: " + json.dumps(rep.as_dict()))
    return paths


COMMANDS = {
    "simulate": cmd_simulate,
    "estimate-q": cmd_estimate_q,
    "eta0": cmd_eta0,
    "rate": cmd_rate,
    "decompose": cmd_decompose,
    "bihari": cmd_bihari,
    "validate": cmd_validate,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="foliated-averaging", description=__doc__.splitlines()[0])
    ap.add_argument("subcommand", choices=SUBCOMMANDS)
    ap.add_argument("--config", help="INI config file (defaults when omitted)")
    ap.add_argument("--seed", type=int, help="global seed (overrides the config)")
    ap.add_argument("--out", default="runs/out", help="output directory")
    ap.add_argument("--threads", type=int, help="worker threads")
    ap.add_argument("--paths", type=int, help="paths per eps (overrides the config)")
    ap.add_argument("--eps", type=lambda s: [float(x) for x in s.split(",") if x.strip()],
                    help="comma-separated eps list (overrides the config)")
    ap.add_argument("--synthetic", action="store_true", help="rate: use the injected curve 3 eps^0.25")
    return ap


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    e = cfg.values["experiment"]
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        e["seed"] = args.seed
    if args.paths is not None:
        e["n_paths"] = args.paths
    if args.eps and args.subcommand == "rate":
        e["eps_grid"] = tuple(args.eps)
    cfg.values["numerics"]["threads"] = resolve_threads(args.threads, cfg.values["numerics"]["threads"])
    return cfg


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    marker = out / "FAILED"
    if marker.exists():
        marker.unlink()
    started = _now()
    manifest = None
    partial = PartialResults()
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        exp = cfg.experiment()
        manifest = RunManifest(args.subcommand, cfg.snapshot(), cfg.defaults_applied, exp.seed, _version(),
                               started, threads=exp.numerics.threads)
        paths = COMMANDS[args.subcommand](cfg, exp, out, args, partial)
        for p in paths:
            manifest.add(Path(p), out)
        manifest.status = "ok"
    except Exception as exc:  # noqa: BLE001 - reported through the failure marker
        flushed = partial.flush()
        if flushed is not None and manifest is not None:
            manifest.add(flushed, out)
        marker.write_text(f"{type(exc).__name__}: {exc}\n\n{traceback.format_exc()}", encoding="utf-8")
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        if manifest is not None:
            manifest.status = "failed"
            manifest.error = f"{type(exc).__name__}: {exc}"
            manifest.finished = _now()
            manifest.write(out)
        return 1
    manifest.finished = _now()
    manifest.write(out)
    print(json.dumps({"status": "ok", "out": str(out), "outputs": manifest.outputs}, indent=2))
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
