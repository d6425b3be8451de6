"""Command-line entry point: ``wififlow <subcommand> [--key value ...]``."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import __version__
from .cluster import InfeasibleError, InvalidInputError
from .config import ConfigError, PipelineConfig, load_config
from .ingest import CorruptInputError
from .model import MalformedInputError, RegistryError
from .pipeline import STAGES, StageError, run_all, run_stage, run_synth
from .synthgen import ScenarioError

log = logging.getLogger("wififlow")

SUBCOMMANDS = ("synth", *STAGES, "all")
HELP = {
    "synth": "write a synthetic probe log with ground truth",
    "ingest": "parse and coalesce a probe log into sensor-level day trajectories",
    "preprocess": "merge to building level and filter",
    "cluster-time": "cluster calendar days per building",
    "cluster-person": "cluster day trajectories by stay-time features",
    "cluster-location": "transition matrices, Ward clustering and dominant flows",
    "report": "summarise all stage outputs in report.txt",
    "all": "run ingest through report",
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wififlow", description="Mobility analysis of WiFi probe logs.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        sp = sub.add_parser(name, help=HELP[name])
        sp.add_argument("--config", type=Path, help="flat key = value config file")
        sp.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
        for f in fields(PipelineConfig):
            key = PipelineConfig.key_of(f.name)
            if f.type in ("bool", bool):
                sp.add_argument(f"--{key}", dest=f.name, nargs="?", const="true", default=None,
                                metavar="BOOL")
            else:
                sp.add_argument(f"--{key}", dest=f.name, default=None, metavar=key.split("-")[-1].upper())
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(stream=sys.stderr, level=args.log_level,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    overrides = {f.name: getattr(args, f.name) for f in fields(PipelineConfig)}
    try:
        cfg = load_config(args.config, overrides)
        if args.command == "synth":
            print(run_synth(cfg))
        elif args.command == "all":
            run_all(cfg)
        else:
            run_stage(args.command, cfg)
    except (ConfigError, StageError, RegistryError, MalformedInputError, CorruptInputError,
            InfeasibleError, InvalidInputError, ScenarioError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        log.error("%s", msg)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
