"""``ssrseg`` command line: gen-data, train, eval, gradcheck, dump-maps.

Exit codes: 0 success, 1 contract/configuration/format error, 2 empty input.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

from .data import build_dataset
from .errors import SSRError
from .harness import dump_scale_maps, evaluate, gradcheck, load_config, train
from .losses import LossWeights

EXIT_OK, EXIT_ERROR, EXIT_EMPTY = 0, 1, 2


def _parse_strata(text):
    strata = []
    for part in text.split(","):
        lo, _, hi = part.strip().partition("-")
        strata.append((float(lo), float(hi)))
    return strata


def _cmd_gen_data(args):
    entries = build_dataset(args.out, args.seed, args.count, args.hr_extent, _parse_strata(args.strata))
    print(f"wrote {len(entries)} samples to {args.out}")
    return EXIT_OK


def _cmd_train(args):
    overrides = {}
    if args.output:
        overrides["output"] = args.output
    if args.dataset:
        overrides["dataset"] = args.dataset
    cfg = load_config(args.config, **overrides)
    result = train(cfg)
    print(result.report.summary())
    print(f"checkpoint {result.checkpoint}")
    return EXIT_OK


def _cmd_eval(args):
    report = evaluate(args.ckpt, args.data, args.threshold, args.holdout, args.split)
    print(report.summary())
    if args.out:
        Path(args.out).write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True))
    return EXIT_EMPTY if report.empty else EXIT_OK


def _cmd_gradcheck(args):
    weights = LossWeights(alpha=args.alpha, beta=args.beta, gamma=args.gamma)
    kwargs = {} if args.step is None else {"step": args.step}
    result = gradcheck(width=args.width, extent=args.extent, weights=weights, seed=args.seed, **kwargs)
    status = "PASS" if result.passed else "FAIL"
    print(f"gradcheck {status} max_rel_error={result.max_error:.6g} params={result.n_params} seconds={result.seconds:.6g}")
    for name, err in result.worst:
        print(f"  {name} {err:.6g}")
    return EXIT_OK if result.passed else EXIT_ERROR


def _cmd_dump_maps(args):
    written = dump_scale_maps(args.ckpt, args.sample, args.out)
    print(f"wrote {len(written)} scale maps to {args.out}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="ssrseg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic size-stratified dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--hr-extent", type=int, default=32)
    p.add_argument("--strata", default="4-8,12-22", help="comma-separated diameter ranges, e.g. 4-8,12-22")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train from a key = value config file")
    p.add_argument("--config", required=True)
    p.add_argument("--dataset")
    p.add_argument("--output")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--holdout", type=int, default=0)
    p.add_argument("--split", choices=("all", "train", "holdout"), default="all")
    p.add_argument("--out", help="also write the report as JSON")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full objective on a tiny model")
    p.add_argument("--width", type=int, default=2)
    p.add_argument("--extent", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=float, default=None)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--gamma", type=float, default=1.0)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("dump-maps", help="export the scale coefficient maps of one sample")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--sample", required=True, help="sample container (.ssv) from a dataset")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_dump_maps)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (SSRError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
