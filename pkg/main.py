"""
Command-line entry point: preprocess, synth, pretrain, finetune, evaluate, sweep.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 training divergence.
"""
import argparse
import sys
from typing import List, Optional

from pydantic import ValidationError

from routers import commands
from utils.errors import ConfigError, DataError, TrainingDivergedError
from utils.logger import logger

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_DIVERGED = 3


class UsageParser(argparse.ArgumentParser):
    """argparse exits 2 on bad usage; this surface reserves 2 for data errors."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="YAML run config; flags override its keys")
    parser.add_argument("--seed", type=int, help="master seed (auto-chosen and recorded when omitted)")
    parser.add_argument("--threads", type=int, help="upper bound on torch worker threads")


def _pretrain_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--lambda1", type=float, help="MIP weight (default 1.0)")
    parser.add_argument("--lambda2", type=float, help="UAP weight (default 0.3)")
    parser.add_argument("--lambda3", type=float, help="SRD weight (default 0.5)")
    parser.add_argument("--lr", type=float)
    parser.add_argument("--batch-size", type=int)
    parser.add_argument("--srd-batch-size", type=int)
    parser.add_argument("--iterations", type=int, help="iterations per epoch")
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--checkpoint-every", type=int)
    parser.add_argument("--mask-proportion", type=float)
    parser.add_argument("--srd-unmasked", action="store_true", help="encode SRD users without masking")
    parser.add_argument("--grad-clip", type=float)
    parser.add_argument("--double", action="store_true", help="train in float64")
    parser.add_argument("--prefetch", type=int, help="batches prepared ahead of the optimizer (0 disables)")
    parser.add_argument("--num-layers", type=int)
    parser.add_argument("--num-heads", type=int)
    parser.add_argument("--hidden-dim", type=int)
    parser.add_argument("--max-len", type=int, help="wrapped sequence length, CLS and SEP included")
    parser.add_argument("--dropout", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = UsageParser(prog="uprec", description="User-aware pre-training for sequential recommendation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="raw files -> dataset artifact")
    _common(p)
    p.add_argument("--format", choices=["yelp", "tsv"])
    p.add_argument("--reviews", help="YELP review.json")
    p.add_argument("--users", help="YELP user.json")
    p.add_argument("--interactions", help="TSV: user, item, timestamp[, rating]")
    p.add_argument("--edges", help="TSV: user, user")
    p.add_argument("--attributes", help="TSV: user, n:<name>..., d:<name>...")
    p.add_argument("--k", type=int, help="k-core threshold (default 5)")
    p.add_argument("--cutoff", type=int, help="drop records before this epoch second")
    p.add_argument("--holdout-fraction", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=commands.cmd_preprocess)

    p = sub.add_parser("synth", help="planted-structure synthetic dataset artifact")
    _common(p)
    p.add_argument("--n-users", type=int)
    p.add_argument("--n-items", type=int)
    p.add_argument("--n-clusters", type=int)
    p.add_argument("--intra-prob", type=float)
    p.add_argument("--friend-intra-prob", type=float)
    p.add_argument("--attribute-noise", type=float)
    p.add_argument("--k", type=int, help="k-core threshold (default 5, 1 disables)")
    p.add_argument("--holdout-fraction", type=float, default=0.1)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=commands.cmd_synth)

    p = sub.add_parser("pretrain", help="joint MIP/UAP/SRD pre-training")
    _common(p)
    _pretrain_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.set_defaults(handler=commands.cmd_pretrain)

    p = sub.add_parser("finetune", help="seqrec or profile fine-tuning")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", help="checkpoint file (a directory with --all-checkpoints); omit to start from scratch")
    p.add_argument("--all-checkpoints", action="store_true", help="fine-tune every checkpoint in the directory, keep the best")
    p.add_argument("--task", default="seqrec", help="'seqrec' or an attribute name")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--n-neg", type=int)
    p.add_argument("--grad-clip", type=float)
    p.add_argument("--no-random-cut", action="store_true", help="train on full prefixes only")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=commands.cmd_finetune)

    p = sub.add_parser("evaluate", help="report metrics as one JSON line")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--task", required=True, choices=["seqrec", "srd", "sim", "profile", "random", "popularity"])
    p.add_argument("--target", choices=["test", "valid"], default="test")
    p.add_argument("--n-neg", type=int, default=99)
    p.add_argument("--by-length", action="store_true", help="also report per sequence-length group")
    p.add_argument("--sampling", choices=["uniform", "activity"], default="uniform", help="negative users for srd/sim")
    p.add_argument("--out", default="runs/eval_report.json")
    p.set_defaults(handler=commands.cmd_evaluate)

    p = sub.add_parser("sweep", help="batch-size / hidden-size grid")
    _common(p)
    _pretrain_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--batch-sizes", type=int, nargs="+")
    p.add_argument("--hidden-dims", type=int, nargs="+")
    p.add_argument("--n-neg", type=int)
    p.add_argument("--finetune-epochs", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=commands.cmd_sweep)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.handler(args)
        return EXIT_OK
    except TrainingDivergedError as e:
        logger.error(f"Training diverged: {e}", exc_info=True)
        if e.last_checkpoint:
            logger.error(f"Last good checkpoint: {e.last_checkpoint}")
        return EXIT_DIVERGED
    except DataError as e:
        logger.error(f"Data error: {e}", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except ValidationError as e:
        print(f"invalid configuration ({e.error_count()} errors):\n{e}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:
        # configuration is validated before any work starts, so what fails later is the input data
        logger.error(f"'{args.command}' failed: {e}", exc_info=True)
        print(f"error: {args.command} failed on its input data: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
