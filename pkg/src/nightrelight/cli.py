"""Command-line entry point: ``solo run``, ``solo batch`` and ``solo illuminants build``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .illuminants import build_illuminant_db
from .pipeline import PipelineConfig, PipelineError, batch, run


def _config(args) -> PipelineConfig:
    cfg = PipelineConfig.from_file(args.config, args.profile) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg = cfg.updated({"seed": args.seed})
    if args.ablate:
        cfg = cfg.ablate(args.ablate)
    return cfg


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("-c", "--config", help="TOML or JSON pipeline config")
    p.add_argument("--profile", help="config profile applied on top of [defaults]")
    p.add_argument("-o", "--out", required=True, help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--ablate", default="", help="comma list of component sets to switch off: geometric,lights,isp")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="solo", description="Relight daytime street scenes as night.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="relight one scene")
    p.add_argument("scene", help="scene JSON")
    _common(p)
    p.add_argument("--dump-intermediates", action="store_true")

    p = sub.add_parser("batch", help="relight many scenes")
    p.add_argument("scenes", nargs="+", help="scene JSON files")
    _common(p)
    p.add_argument("-j", "--workers", type=int, default=1)

    p = sub.add_parser("illuminants", help="illuminant database tools")
    isub = p.add_subparsers(dest="action", required=True)
    b = isub.add_parser("build", help="gray-card captures -> illuminant DB JSON")
    b.add_argument("captures", help="directory of .pgm + .json captures")
    b.add_argument("-o", "--out", required=True)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        if args.command == "run":
            res = run(_config(args), args.scene, args.out, dump_intermediates=args.dump_intermediates)
            print(json.dumps(res.manifest["stages"], indent=1))
        elif args.command == "batch":
            manifest = batch(_config(args), args.scenes, args.out, workers=args.workers)
            print(f"{len(manifest['scenes']) - manifest['n_failed']} ok, {manifest['n_failed']} failed")
            return 1 if manifest["n_failed"] else 0
        else:
            db = build_illuminant_db(args.captures)
            db.save(args.out)
            print(f"{sum(len(v) for v in db.values())} samples in {len(db)} categories -> {args.out}")
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
