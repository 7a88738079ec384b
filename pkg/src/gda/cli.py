"""Command-line entry point: ``gda <subcommand> [--config PATH] [--seed N] [--out DIR]``."""

from __future__ import annotations

import argparse
import logging
import sys

from gda import bench
from gda import config as C
from gda.container import ContainerError
from gda.nets import NumericalError

log = logging.getLogger("gda")


def _gen_data(doc, args):
    s = bench.gen_data(doc)
    print(f"wrote {s['train']} train / {s['test']} test samples and {s['benchmark_entries']} benchmark entries")


def _train(doc, args):
    for name, rep in bench.train(doc).items():
        print(f"{name}: final_loss={rep.final_loss:.5f} heldout={rep.metric:.4f} "
              f"settled={rep.trailing_average_settled()} ({rep.wall_seconds:.1f}s)")


def _adapt(doc, args):
    path, table = bench.adapt(doc, args.method)
    methods = bench.METHODS if args.method == "all" else (args.method,)
    for m in methods:
        print(f"{m}: accuracy={table.get(m)['accuracy']:.4f}")
    print(f"results: {path}")


def _sweep_steps(doc, args):
    for (m, n), acc in bench.sweep_steps(doc).items():
        print(f"{m} steps={n}: {acc:.4f}")


def _sweep_augs(doc, args):
    for k, acc in bench.sweep_augs(doc).items():
        print(f"k={k}: {acc:.4f}")


def _entropy_report(doc, args):
    for key, s in bench.entropy_report(doc).items():
        if key.endswith("/all"):
            print(f"{key[:-4]}: median={s['median']:.4f} mean={s['mean']:.4f} n={s['n']}")


def _timing(doc, args):
    for name, sec in bench.timing(doc).items():
        print(f"{name}: {sec * 1000:.2f} ms/sample")


COMMANDS = {
    "gen-data": (_gen_data, "generate source sets and the shifted benchmark"),
    "train": (_train, "train denoiser, classifier and style encoder"),
    "adapt": (_adapt, "run an adaptation method over the benchmark"),
    "sweep-steps": (_sweep_steps, "accuracy vs executed reverse steps (gda, dda)"),
    "sweep-augs": (_sweep_augs, "accuracy vs augmentation count"),
    "entropy-report": (_entropy_report, "entropy distributions before and after adaptation"),
    "timing": (_timing, "per-sample wall time per method"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gda", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="run config JSON (default: packaged reference config)")
        p.add_argument("--seed", type=int, help="override master_seed")
        p.add_argument("--out", help="override output_dir")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "adapt":
            p.add_argument("--method", default="all", choices=bench.METHODS + ("all",))
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        doc = C.load(args.config, seed=args.seed, out=args.out)
    except C.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return bench.EXIT_CONFIG
    try:
        COMMANDS[args.command][0](doc, args)
    except (bench.MissingArtifact, ContainerError) as exc:
        print(f"missing or unreadable artifact: {exc}", file=sys.stderr)
        return bench.EXIT_MISSING
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return bench.EXIT_NUMERICAL
    return bench.EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
