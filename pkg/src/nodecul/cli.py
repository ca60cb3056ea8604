"""Command-line entry point: ``nodecul <command> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import pipeline
from ._io import atomic_write_json
from .config import ExperimentConfig, load_config
from .datasets import load_planetoid, open_maybe_gz, planetoid_ind_to_raw, save_dataset
from .errors import (ConfigError, ContractError, DataError, InsufficientShadowsError, NumericError)
from .gnn import load_checkpoint

log = logging.getLogger("nodecul")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _ratios(text: str) -> tuple[float, ...]:
    try:
        vals = tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad ratio list {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty ratio list")
    return vals


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment INI file")
    common.add_argument("--seed", type=int, help="override the global seed")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="nodecul", description="Node-level contrastive unlearning for GNNs")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    ing = sub.add_parser("ingest", parents=[common], help="convert raw Planetoid files to a dataset directory")
    ing.add_argument("--content", type=Path)
    ing.add_argument("--cites", type=Path)
    ing.add_argument("--planetoid-dir", type=Path, help="directory with ind.<name>.* split files")
    ing.add_argument("--name", default="")

    for name, text in (("train", "train the original model"),
                       ("retrain", "train the reference model without the unlearning nodes"),
                       ("unlearn", "run contrastive unlearning on the original model"),
                       ("eval", "report accuracies of a checkpoint"),
                       ("mia", "membership inference against saved models"),
                       ("experiment", "full pipeline with summary table")):
        sp = sub.add_parser(name, parents=[common], help=text)
        if name != "train" and name != "eval":
            sp.add_argument("--ratio", type=_ratios, help="unlearning fraction(s), comma separated")
        if name in ("unlearn", "experiment"):
            sp.add_argument("--no-reconstruction", action="store_true", help="skip neighborhood reconstruction")
        if name in ("retrain", "experiment"):
            sp.add_argument("--retain-structure", action="store_true",
                            help="keep unlearning nodes in the retrain graph, without labels")
        if name in ("mia", "experiment"):
            sp.add_argument("--jobs", type=int, help="parallel shadow trainings")
        if name in ("eval", "mia"):
            sp.add_argument("--checkpoint", type=Path, action="append", help="model checkpoint(s)")
    return p


def _config(args) -> ExperimentConfig:
    if args.config is None:
        raise ConfigError("--config is required for this command")
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out is not None:
        cfg = replace(cfg, out=args.out)
    if getattr(args, "ratio", None):
        cfg = replace(cfg, ratios=args.ratio).with_ratio(args.ratio[0])
    if getattr(args, "no_reconstruction", False):
        cfg = replace(cfg, unlearn=replace(cfg.unlearn, reconstruction=False))
    if getattr(args, "retain_structure", False):
        cfg = replace(cfg, retain_structure=True)
    if getattr(args, "jobs", None):
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        cfg = replace(cfg, jobs=args.jobs)
    return cfg


def _single_ratio(cfg: ExperimentConfig) -> ExperimentConfig:
    if len(cfg.ratios) > 1:
        raise ConfigError("this command takes a single --ratio")
    return cfg


def cmd_ingest(args) -> int:
    if args.out is None:
        raise ConfigError("ingest needs --out")
    if args.planetoid_dir is not None:
        if not args.name:
            raise ConfigError("--planetoid-dir needs --name")
        content, cites = planetoid_ind_to_raw(args.planetoid_dir, args.name)
    elif args.content is not None and args.cites is not None:
        content, cites = open_maybe_gz(args.content), open_maybe_gz(args.cites)
    else:
        raise ConfigError("ingest needs --content and --cites, or --planetoid-dir and --name")
    graph = load_planetoid(content, cites)
    manifest = save_dataset(graph, args.out, args.name)
    print(json.dumps(manifest, indent=2, sort_keys=True))
    return EXIT_OK


def _setup(cfg):
    graph = pipeline.load_graph(cfg)
    p = pipeline.partition_for(cfg, graph)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return graph, p, out


def cmd_train(args) -> int:
    cfg = _config(args)
    graph, p, out = _setup(cfg)
    pipeline.save_partition(p, out / "partition.npz")
    model, _ = pipeline.stage_train(cfg, graph, p, out)
    print(json.dumps(pipeline.model_metrics(model, graph, p), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_retrain(args) -> int:
    cfg = _single_ratio(_config(args))
    graph, p, out = _setup(cfg)
    model, _ = pipeline.stage_retrain(cfg, graph, p, out)
    print(json.dumps(pipeline.model_metrics(model, graph, p), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_unlearn(args) -> int:
    cfg = _single_ratio(_config(args))
    graph, p, out = _setup(cfg)
    original = pipeline.require_checkpoint(out / "original.ckpt")
    model, report = pipeline.stage_unlearn(cfg, graph, p, original, out)
    summary = pipeline.model_metrics(model, graph, p)
    summary.update(rounds=report.rounds, condition_met=report.condition_met)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def _targets(args, out: Path) -> dict:
    if args.checkpoint:
        return {path.stem: load_checkpoint(path) for path in args.checkpoint}
    found = {}
    for name in ("original", "unlearned", "unlearned_norecon", "retrain"):
        path = out / f"{name}.ckpt"
        if path.is_file():
            found[name] = load_checkpoint(path)
    if not found:
        raise DataError(f"no checkpoints found in {out}")
    return found


def cmd_eval(args) -> int:
    cfg = _config(args)
    graph, p, out = _setup(cfg)
    report = {}
    for name, model in _targets(args, out).items():
        report[name] = pipeline.model_metrics(model, graph, p)
        atomic_write_json(out / f"eval_{name}.json", report[name])
    print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_mia(args) -> int:
    cfg = _single_ratio(_config(args))
    graph, p, out = _setup(cfg)
    results = pipeline.stage_mia(cfg, graph, p, _targets(args, out), out, jobs=cfg.jobs)
    print(json.dumps({k: r.summary() for k, r in results.items()}, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_experiment(args) -> int:
    cfg = _config(args)
    rows = pipeline.run_experiment(cfg, jobs=cfg.jobs)
    sys.stdout.write(pipeline.summary_csv(rows))
    return EXIT_OK


COMMANDS = {
    "ingest": cmd_ingest, "train": cmd_train, "retrain": cmd_retrain, "unlearn": cmd_unlearn,
    "eval": cmd_eval, "mia": cmd_mia, "experiment": cmd_experiment,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, InsufficientShadowsError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
