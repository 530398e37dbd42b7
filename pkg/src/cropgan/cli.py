"""``cropgan`` command line.

Exit codes: 0 ok, 1 usage error, 2 missing or stale upstream artifact,
3 stage failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from typing import Sequence

from .pipeline import GAN_VARIANTS, ExperimentConfig, MissingDependency, Pipeline, StaleInput, parse_cell

EXIT_OK, EXIT_USAGE, EXIT_MISSING, EXIT_FAILED = 0, 1, 2, 3
VERBS = ("prepare", "train-landmarks", "crop", "train-gan", "generate", "train-classifier", "evaluate", "plot", "run-all")
CELL_VERBS = ("train-gan", "generate", "train-classifier", "evaluate")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="experiment YAML file")
    common.add_argument("--toy", action="store_true", help="desk-scale preset on a generated toy corpus")
    common.add_argument("--seed", type=int, metavar="N", help="override the global seed")
    common.add_argument("--out", metavar="DIR", help="override the output root")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="cropgan", description="Landmark-cropped GAN augmentation experiments.")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)
    for verb in VERBS:
        p = sub.add_parser(verb, parents=[common])
        if verb in CELL_VERBS:
            p.add_argument("--cell", metavar="VARIANT:FRACTION", help="run one cell (default: every applicable cell)")
        if verb in ("train-gan", "run-all"):
            p.add_argument("--resume", action="store_true", help="continue from the newest GAN snapshot")
    return parser


def load_config(args) -> ExperimentConfig:
    if args.config and args.toy:
        raise UsageError("--config and --toy are mutually exclusive")
    if args.config:
        cfg = ExperimentConfig.load(args.config)
    elif args.toy:
        cfg = ExperimentConfig.toy_preset()
    else:
        raise UsageError("pass --config PATH or --toy")
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out:
        cfg.output_root = args.out
    return cfg


def _cells(pipe: Pipeline, args, gan_only: bool) -> list[tuple[str, float]]:
    if getattr(args, "cell", None):
        try:
            cell = parse_cell(args.cell)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        if cell not in pipe.cells():
            raise UsageError(f"cell {args.cell} is not part of this experiment")
        if gan_only and cell[0] not in GAN_VARIANTS:
            raise UsageError(f"{args.verb} needs a GAN variant, got {cell[0]}")
        return [cell]
    return pipe.gan_cells() if gan_only else pipe.cells()


def dispatch(pipe: Pipeline, args) -> None:
    verb = args.verb
    if verb == "prepare":
        pipe.prepare()
    elif verb == "train-landmarks":
        pipe.train_landmarks()
    elif verb == "crop":
        pipe.crop()
    elif verb == "train-gan":
        for v, f in _cells(pipe, args, gan_only=True):
            pipe.train_gan(v, f, resume=args.resume)
    elif verb == "generate":
        for v, f in _cells(pipe, args, gan_only=True):
            pipe.generate(v, f)
    elif verb == "train-classifier":
        for v, f in _cells(pipe, args, gan_only=False):
            pipe.train_classifier(v, f)
    elif verb == "evaluate":
        for v, f in _cells(pipe, args, gan_only=False):
            pipe.evaluate(v, f)
        if not args.cell:
            pipe.summarize()
    elif verb == "plot":
        pipe.plot()
    elif verb == "run-all":
        pipe.run_all(resume=args.resume)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.INFO if args.verbose else logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    for handler in logging.getLogger().handlers:
        handler.setLevel(level)  # stage log files may lower the package level to INFO
    try:
        cfg = load_config(args)
        pipe = Pipeline(cfg)
        dispatch(pipe, args)
    except UsageError as exc:
        print(f"cropgan: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MissingDependency, StaleInput) as exc:
        print(f"cropgan: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except Exception as exc:  # noqa: BLE001 - any stage failure maps to one exit code
        logging.getLogger("cropgan").debug("stage failure", exc_info=True)
        print(f"cropgan: {args.verb} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
