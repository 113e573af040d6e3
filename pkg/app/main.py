import argparse
import logging
import math
import sys
from typing import List, Optional

from app import __version__
from app.config import CONFIG, load_config, logger
from app.errors import EXIT_OK, exit_code_for
from app.routers import commands


def _int_list(text: str) -> List[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'")
    if not values:
        raise argparse.ArgumentTypeError("expected at least one integer")
    return values


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=0, help="Master seed every sub-seed derives from")
    p.add_argument("--threads", type=int, default=None, help="Worker threads (CLI > env:THREADS > config)")
    p.add_argument("--quiet", action="store_true", help="Only log warnings and errors")
    p.add_argument("--config", default=None, help="YAML configuration file (CLI > env:CONFIG_PATH > config.yaml)")
    return p


def _study_sizes(p: argparse.ArgumentParser) -> None:
    p.add_argument("--backends", type=int, default=None, help="Fleet size, holdout included")
    p.add_argument("--qubits", type=int, default=None)
    p.add_argument("--pools", type=int, default=None)
    p.add_argument("--circuits", type=int, default=None)
    p.add_argument("--out", required=True, help="Output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qforensics",
        description="Reconstruct hidden quantum-backend error maps from transpiled circuits",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    common = _common()

    p = sub.add_parser("gen-backends", parents=[common], help="Synthesize backends sharing one topology")
    p.add_argument("--count", type=int, default=5)
    p.add_argument("--qubits", type=int, default=27)
    p.add_argument("--topology", default="heavyhex-like", choices=["path", "ring", "grid", "heavyhex-like"])
    p.add_argument("--out", required=True)
    p.set_defaults(handler=commands.gen_backends)

    p = sub.add_parser("gen-dataset", parents=[common], help="Generate, transpile and featurize circuit pools")
    p.add_argument("--backend", required=True, help="Backend file")
    p.add_argument("--pools", type=int, default=20)
    p.add_argument("--circuits", type=int, default=1000)
    p.add_argument("--unlabeled", action="store_true", help="Write no labels or calibration (holdout datasets)")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=commands.gen_dataset)

    p = sub.add_parser("train", parents=[common], help="Train the node or edge regressor")
    p.add_argument("--kind", required=True, choices=["node", "edge"])
    p.add_argument("--data", required=True, nargs="+", help="Dataset directories")
    p.add_argument("--holdout", required=True, help="Backend id excluded from fitting")
    p.add_argument("--out", required=True, help="Checkpoint file")
    p.set_defaults(handler=commands.train_model)

    p = sub.add_parser("infer", parents=[common], help="Reconstruct a holdout error map")
    p.add_argument("--node", required=True, help="Node checkpoint")
    p.add_argument("--edge", required=True, help="Edge checkpoint")
    p.add_argument("--topology", required=True)
    p.add_argument("--pools", required=True, help="Directory of transpiled pools")
    p.add_argument("--out", required=True, help="Error map file")
    p.set_defaults(handler=commands.infer)

    p = sub.add_parser("evaluate", parents=[common], help="Compare a prediction with a reference map")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True, help="Error map, backend or calibration file")
    p.add_argument("--topology", default=None, help="Needed when --truth is a calibration table")
    p.add_argument("--top-k", type=int, default=10)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=commands.evaluate)

    p = sub.add_parser("audit", parents=[common], help="Flag reported calibration entries that disagree with a reconstruction")
    p.add_argument("--reported", required=True, help="Error map, backend or calibration file")
    p.add_argument("--reconstructed", required=True)
    p.add_argument("--topology", default=None)
    p.add_argument("--threshold", type=float, default=math.log(2.0), help="Log-ratio threshold (default ln 2)")
    p.add_argument("--top-k", type=int, default=10)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=commands.audit)

    p = sub.add_parser("ablate-pools", parents=[common], help="Holdout mismatch versus pool count")
    p.add_argument("--counts", type=_int_list, default=None, help="e.g. 1,5,20")
    _study_sizes(p)
    p.set_defaults(handler=commands.ablate_pools_cmd)

    p = sub.add_parser("ablate-backends", parents=[common], help="Holdout mismatch versus training backend count")
    p.add_argument("--ks", type=_int_list, default=None, help="e.g. 1,4")
    _study_sizes(p)
    p.set_defaults(handler=commands.ablate_backends_cmd)

    p = sub.add_parser("drift", parents=[common], help="Static versus drifting noise")
    _study_sizes(p)
    p.set_defaults(handler=commands.drift)

    p = sub.add_parser("study", parents=[common], help="Full holdout study for every configured seed")
    p.add_argument("--seeds", type=_int_list, default=None)
    _study_sizes(p)
    p.set_defaults(handler=commands.study)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)

    conf = load_config(args.config) if args.config else CONFIG
    logger.setLevel(logging.WARNING if args.quiet else getattr(logging, conf["LOG_LEVEL"], logging.INFO))
    if args.threads is None:
        args.threads = conf["THREADS"]
    if args.threads < 1:
        logger.error(f"--threads must be >= 1, got {args.threads}")
        return exit_code_for(ValueError())

    logger.info(f"qforensics {__version__}: {args.command}")
    try:
        args.handler(args, conf)
    except Exception as e:
        logger.error(f"{args.command} failed: {e}")
        return exit_code_for(e)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
