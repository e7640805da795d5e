"""Command-line entry point: ``desknas <command> ...``.

On failure a single JSON line ``{"error": ..., "message": ..., "command": ...}``
goes to stderr and the exit code is nonzero (2 for bad input, 1 otherwise).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, RunConfig
from .genotype import GenotypeError
from .pipeline import (
    StageError,
    cmd_decode,
    cmd_evolve,
    cmd_random_baseline,
    cmd_report,
    cmd_retrain,
    cmd_search,
    config_of,
)
from .space import TemplateError


def parse_override(text: str) -> tuple[str, object]:
    """``key=value`` with a JSON value (bare words are taken as strings)."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def apply_overrides(d: dict, overrides: list[str]) -> RunConfig:
    d = json.loads(json.dumps(d))
    for item in overrides or []:
        key, value = parse_override(item)
        target = d
        *parents, leaf = key.split(".")
        for p in parents:
            target = target.setdefault(p, {})
        target[leaf] = value
    return RunConfig.from_dict(d)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="run config JSON file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field; dotted keys reach nested sections (dataset.height=32)")
    p.add_argument("--run-dir", help="run directory (default: the config's output_dir)")


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="desknas", description="Desk-scale differentiable and evolutionary "
                                                                 "architecture search for segmentation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("search", help="train the supernet and save architecture parameters")
    _common(p)

    p = sub.add_parser("decode", help="decode a genotype from a search run")
    p.add_argument("run_dir")
    p.add_argument("--mode", choices=["argmax", "topk", "normalized"])
    p.add_argument("--k", type=int)
    p.add_argument("--paths", choices=["all", "viterbi", "multipath"])

    p = sub.add_parser("retrain", help="train the decoded network from scratch and evaluate on the test split")
    p.add_argument("run_dir")
    p.add_argument("--genotype", help="genotype JSON (default: <run_dir>/genotype.json)")

    p = sub.add_parser("random-baseline", help="retrain uniformly sampled cells with the same budget")
    _common(p)
    p.add_argument("--n", type=int, help="number of sampled cells")

    p = sub.add_parser("evolve", help="run the evolutionary search")
    _common(p)
    p.add_argument("--resume", action="store_true", help="continue from the last complete generation")

    p = sub.add_parser("report", help="render figures for a run directory")
    p.add_argument("run_dir")

    sub.add_parser("defaults", help="print the default config as JSON")
    return parser


def _config_for(args) -> RunConfig:
    """Config file, else the run directory's manifest, else defaults; then overrides."""
    if args.config:
        try:
            base = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: not valid JSON ({exc})") from exc
    elif args.run_dir and (Path(args.run_dir) / "manifest.json").exists():
        base = config_of(args.run_dir).to_dict()
    else:
        base = {}
    return apply_overrides(base, args.overrides)


def run(argv: list[str] | None = None) -> dict:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command == "defaults":
        return RunConfig().to_dict()
    if args.command == "search":
        cfg = _config_for(args)
        return {"run_dir": str(cmd_search(cfg, args.run_dir))}
    if args.command == "decode":
        g = cmd_decode(args.run_dir, args.mode, args.k, args.paths)
        return {"run_dir": args.run_dir, "genotype": g.key()}
    if args.command == "retrain":
        report = cmd_retrain(args.run_dir, args.genotype)
        return {"run_dir": args.run_dir, "test_mean_iou": report.mean_iou}
    if args.command == "random-baseline":
        return cmd_random_baseline(_config_for(args), args.run_dir, args.n)
    if args.command == "evolve":
        return {"history": str(cmd_evolve(_config_for(args), args.run_dir, args.resume))}
    if args.command == "report":
        return {"figures": [str(p) for p in cmd_report(args.run_dir)]}
    raise AssertionError(args.command)


def main(argv: list[str] | None = None) -> int:
    command = None
    try:
        argv = sys.argv[1:] if argv is None else argv
        command = next((a for a in argv if not a.startswith("-")), None)
        out = run(argv)
    except (ConfigError, GenotypeError, TemplateError, StageError, FileNotFoundError, ValueError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "command": command}), file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "command": command}), file=sys.stderr)
        return 1
    print(json.dumps(out, default=str, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
