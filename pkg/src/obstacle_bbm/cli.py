"""Command line: ``obstacle-bbm run|validate|report``.

Exit status 0 on success, 1 when an experiment's own check fails, 2 on
configuration or I/O errors. Failures print a JSON object to stderr.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import platform
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

from .bbm import ConfigError
from .config import ConfigFault, ExperimentConfig, parse_config
from .env import SnapshotError, snapshot
from .experiments import REPORT_COLUMNS, Outcome, run_experiment
from .geometry import write_witness_csv
from .parallel import default_workers
from .rng import derive

EXIT_OK, EXIT_CHECK_FAILED, EXIT_ERROR = 0, 1, 2


def _fail(kind: str, message: str, **extra) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message, **extra}, sort_keys=True) + "\n")
    return EXIT_ERROR


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return format(v, ".17g")
    if hasattr(v, "item"):
        return _cell(v.item())
    return str(v)


def _write_csv(path: Path, header: list[str], rows) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_cell(v) for v in r])


def _fresh_dir(base: Path, experiment: str) -> Path:
    base.mkdir(parents=True, exist_ok=True)
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S")
    for i in range(1000):
        cand = base / (f"{experiment}-{stamp}" + (f"-{i}" if i else ""))
        try:
            cand.mkdir()
            return cand
        except FileExistsError:
            continue
    raise OSError(f"could not create a fresh run directory under {base}")


def apply_seed_override(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    doc = cfg.model_dump(mode="json")
    doc["environment"]["master_seed"] = seed % 2**64
    doc["sim"]["seeds"] = [derive(seed, i) for i in (1, 2, 3)]
    doc["estimator"]["seed"] = derive(seed, 4)
    return ExperimentConfig.model_validate(doc)


def write_artifacts(cfg: ExperimentConfig, outcome: Outcome, run_dir: Path, wall: float) -> dict:
    """Write report, tables, snapshots, resolved config and manifest; returns the manifest."""
    h = cfg.params_hash()
    rows = [[{**r, "params_hash": h}.get(c) for c in REPORT_COLUMNS] for r in outcome.rows]
    files = []
    _write_csv(run_dir / "report.csv", REPORT_COLUMNS, rows)
    files.append("report.csv")
    for name, (header, table) in outcome.tables.items():
        _write_csv(run_dir / f"{name}.csv", header, table)
        files.append(f"{name}.csv")
    for name, cert in outcome.certificates.items():
        write_witness_csv(cert, run_dir / f"{name}.csv")
        files.append(f"{name}.csv")
    for name, env, half in outcome.environments:
        lo = [-half] * env.d
        snapshot(env, (lo, [half] * env.d), run_dir / f"{name}.jsonl")
        files.append(f"{name}.jsonl")
    (run_dir / "config.resolved.json").write_text(cfg.to_json(), encoding="utf-8")
    files.append("config.resolved.json")
    digests = {f: hashlib.sha256((run_dir / f).read_bytes()).hexdigest() for f in sorted(files)}
    manifest = {
        "experiment": cfg.experiment,
        "params_hash": h,
        "seeds": {"environment": cfg.environment.master_seed, "sim": cfg.sim.seeds,
                  "estimator": cfg.estimator.seed},
        "passed": outcome.passed,
        "wall_time_s": round(wall, 3),
        "created_utc": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "versions": _versions(),
        "files": digests,
    }
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


def _versions() -> dict:
    import numba
    import numpy
    import pydantic
    import scipy

    from . import __version__

    return {"obstacle_bbm": __version__, "python": platform.python_version(), "numpy": numpy.__version__,
            "scipy": scipy.__version__, "numba": numba.__version__, "pydantic": pydantic.__version__}


def _load(path: str) -> ExperimentConfig:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise ConfigFault("$", f"cannot read config: {exc.strerror}") from None
    return parse_config(raw)


def cmd_run(args) -> int:
    try:
        cfg = _load(args.config)
        if args.seed_override is not None:
            cfg = apply_seed_override(cfg, args.seed_override)
        if args.out is not None:
            cfg = cfg.model_copy(update={"output_dir": args.out})
    except ConfigFault as exc:
        return _fail("config", exc.message, path=exc.path)
    workers = args.workers if args.workers is not None else default_workers()
    try:
        run_dir = _fresh_dir(Path(cfg.output_dir), cfg.experiment)
    except OSError as exc:
        return _fail("io", f"cannot create output directory: {exc}", path=cfg.output_dir)
    t0 = time.perf_counter()
    try:
        outcome = run_experiment(cfg, workers)
    except (ConfigError, ValueError, SnapshotError) as exc:
        return _fail("config", str(exc))
    except OSError as exc:
        return _fail("io", str(exc))
    try:
        write_artifacts(cfg, outcome, run_dir, time.perf_counter() - t0)
    except OSError as exc:
        return _fail("io", f"cannot write artifacts: {exc}", path=str(run_dir))
    sys.stdout.write(json.dumps({"run_dir": str(run_dir), "passed": outcome.passed}) + "\n")
    return EXIT_OK if outcome.passed else EXIT_CHECK_FAILED


def cmd_validate(args) -> int:
    try:
        cfg = _load(args.config)
    except ConfigFault as exc:
        return _fail("config", exc.message, path=exc.path)
    sys.stdout.write(cfg.to_json())
    return EXIT_OK


def cmd_report(args) -> int:
    try:
        with open(args.csv, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        return _fail("io", f"cannot read report: {exc.strerror}", path=args.csv)
    if not rows:
        return EXIT_OK

    def short(v: str) -> str:
        try:
            f = float(v)
        except ValueError:
            return v
        return v if v.lstrip("-").isdigit() else format(f, ".6g")

    table = [rows[0]] + [[short(v) for v in r] for r in rows[1:]]
    widths = [max(len(r[i]) if i < len(r) else 0 for r in table) for i in range(len(table[0]))]
    for r in table:
        sys.stdout.write("  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip() + "\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="obstacle-bbm", description="Branching Brownian motion among traps.")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("config")
    r.add_argument("--seed-override", type=int, default=None)
    r.add_argument("--workers", type=int, default=None)
    r.add_argument("--out", default=None, help="parent directory for the run directory")
    r.set_defaults(func=cmd_run)
    v = sub.add_parser("validate", help="check a config and print it with defaults filled in")
    v.add_argument("config")
    v.set_defaults(func=cmd_validate)
    rep = sub.add_parser("report", help="pretty-print a report CSV")
    rep.add_argument("csv")
    rep.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
