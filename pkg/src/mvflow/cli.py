"""Command-line runner: ``mvflow <experiment> --config run.json``.

Exit codes: 0 success, 1 invalid configuration, 2 numerical failure
(too many diverged replicas). A manifest is written in every case where
the output directory can be created.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

from . import __version__
from .config import EXPERIMENTS, SimConfig, load_config
from .errors import CapabilityError, ConfigurationError, NumericalFailure
from .experiments import RUNNERS, RunOutput

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mvflow", description="Mean-field stochastic flow experiments.")
    parser.add_argument("experiment", choices=EXPERIMENTS)
    parser.add_argument("--config", required=True, help="JSON run configuration")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--out", default=None, help="override the output directory")
    parser.add_argument("--threads", type=int, default=None, help="worker threads (results do not depend on it)")
    return parser


def write_outputs(out_dir: Path, cfg: SimConfig | None, result: RunOutput, status: str, wall: float) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    inventory = {}
    for name in sorted(result.files):
        data = result.files[name].encode()
        (out_dir / name).write_bytes(data)
        inventory[name] = {"sha256": hashlib.sha256(data).hexdigest(), "bytes": len(data)}
    manifest = {
        "version": __version__,
        "status": status,
        "config": cfg.to_dict() if cfg is not None else None,
        "errors": result.errors,
        "summary": result.summary,
        "wall_clock_seconds": wall,
        "files": inventory,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return manifest


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    start = time.perf_counter()
    try:
        cfg = load_config(args.config, seed=args.seed, out=args.out, threads=args.threads, experiment=args.experiment)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out_dir = Path(cfg.out)
    try:
        result = RUNNERS[cfg.experiment](cfg)
    except (ConfigurationError, CapabilityError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        failed = RunOutput(errors={"config": {"errors": 1}})
        write_outputs(out_dir, cfg, failed, f"invalid: {exc}", time.perf_counter() - start)
        return EXIT_CONFIG
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        failed = RunOutput(errors={"flow": {"numerical_failure": 1}})
        write_outputs(out_dir, cfg, failed, f"numerical failure: {exc}", time.perf_counter() - start)
        return EXIT_NUMERICAL
    write_outputs(out_dir, cfg, result, "ok", time.perf_counter() - start)
    print(f"{cfg.experiment}: wrote {len(result.files)} files to {out_dir}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
