"""Command-line entry point.

Failures print one line ``error: <category>: <message>`` to stderr and exit
with status 1; the category is one of ``dualmix.errors.ERROR_CATEGORIES``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from dualmix import pipeline
from dualmix.config import load_config
from dualmix.errors import ConfigError, DualmixError, StorageError
from dualmix.synth import SynthSpec, synth


def _u64(text: str) -> int:
    try:
        value = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dualmix", description="Few-shot node classification with dual-level mixup.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic SBM dataset")
    p.add_argument("--config", help="JSON file with generator settings")
    p.add_argument("--out", required=True, help="dataset directory to write")
    p.add_argument("--seed", type=_u64)

    for name, text in (("train", "meta-train and evaluate"), ("verify", "train (or load) and report bounds")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config")
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--seed", type=_u64)
        if name == "verify":
            p.add_argument("--params", help="use these parameters instead of training")

    p = sub.add_parser("eval", help="evaluate saved parameters on test episodes")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=_u64)
    p.add_argument("--params", help="parameter file (default: <out>/params.npz)")

    p = sub.add_parser("dump-embeddings", help="write refined node embeddings as CSV")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--params", required=True)
    return parser


def _run_config(args):
    config = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        config = config.replace(seed=args.seed)
    return config


def _synth_spec(args) -> SynthSpec:
    raw = {}
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read synth config {args.config}: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("synth config must be a JSON object")
    if args.seed is not None:
        raw["seed"] = args.seed
    return SynthSpec.from_json(raw)


def dispatch(args) -> dict:
    if args.command == "synth":
        graph, split = synth(_synth_spec(args), args.out)
        return {"nodes": graph.n_nodes, "edges": graph.n_edges, "split": split.counts}
    config = _run_config(args)
    if args.command == "train":
        outcome = pipeline.run_train(config, args.data, args.out)
        return {"mean_acc": outcome.metrics.mean_acc, "macro_f1": outcome.metrics.macro_f1, "ci95": outcome.metrics.ci95}
    if args.command == "eval":
        params = args.params or Path(args.out) / pipeline.PARAMS_FILE
        metrics = pipeline.run_eval(config, params, args.data, args.out)
        return {"mean_acc": metrics.mean_acc, "macro_f1": metrics.macro_f1, "ci95": metrics.ci95}
    if args.command == "verify":
        report = pipeline.run_verify(config, args.data, args.out, args.params)
        return {"theorem1_bound": report.theorem1_bound, "theorem2_bound": report.theorem2_bound}
    if args.command == "dump-embeddings":
        path = pipeline.run_dump_embeddings(args.params, args.data, args.out, hops=config.l_hops)
        return {"embeddings": str(path)}
    raise ConfigError(f"unknown command {args.command}")


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        summary = dispatch(args)
    except DualmixError as exc:
        message = " ".join(str(exc).split())
        print(f"error: {exc.category}: {message}", file=sys.stderr)
        return 1
    except OSError as exc:
        message = " ".join(str(exc).split())
        print(f"error: {StorageError.category}: {message}", file=sys.stderr)
        return 1
    print(json.dumps(summary, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
