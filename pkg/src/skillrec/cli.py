"""Command-line entry point.

Subcommands: synth, validate, train-recall, eval-recall, train-rank,
eval-rank, recommend.  Failures exit non-zero with a single line on stderr
of the form ``skillrec: error: <ErrorType>: <message>``.
The ``SKILLREC_OUT`` environment variable overrides ``--out``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import torch

from . import pipeline
from .config import RunConfig
from .errors import SkillRecError

OUT_ENV = "SKILLREC_OUT"


def _config(args) -> RunConfig:
    overrides: dict[str, dict[str, str]] = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot:
            raise SkillRecError(f"--set expects section.key=value, got {item!r}")
        overrides.setdefault(section, {})[name] = value
    if args.seed is not None:
        overrides.setdefault("train", {})["seed"] = str(args.seed)
    if args.workers is not None:
        overrides.setdefault("train", {})["threads"] = str(args.workers)
    if args.config:
        return RunConfig.from_file(args.config, overrides)
    return RunConfig(overrides)


def _out(args) -> Path:
    out = os.environ.get(OUT_ENV) or args.out
    if not out:
        raise SkillRecError("no output directory: pass --out or set SKILLREC_OUT")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _print(obj) -> None:
    print(json.dumps(obj, sort_keys=True, indent=2))


def cmd_synth(args):
    cfg = _config(args)
    out = pipeline.synth(cfg, _out(args))
    _print({"dataset": str(out), "fingerprint": cfg.fingerprint()})


def cmd_validate(args):
    cfg = _config(args)
    report = pipeline.validate_dir(args.data, max_items=cfg.get("model", "max_items"))
    _print(report.to_dict())
    if not report.ok:
        raise SkillRecError(f"{len(report.violations)} violations; first: {report.violations[0]}")


def cmd_train_recall(args):
    cfg = _config(args)
    paths = pipeline.train_recall(cfg, args.data, _out(args))
    _print({k: str(v) for k, v in paths.items()} | {"fingerprint": cfg.fingerprint()})


def cmd_eval_recall(args):
    cfg = _config(args)
    ks = tuple(args.k) if args.k else cfg.ks
    report = pipeline.eval_recall(
        args.checkpoint, args.data, _out(args), ks=ks, negatives=cfg.get("recall", "negatives"),
        num_candidates=cfg.get("recall", "candidates"),
    )
    _print({"recall": report["recall"], "ndcg": report["ndcg"], "num_users": report["num_users"]})


def cmd_train_rank(args):
    cfg = _config(args)
    paths = pipeline.train_rank(cfg, args.data, args.recall_checkpoint, _out(args))
    _print({k: str(v) for k, v in paths.items()} | {"fingerprint": cfg.fingerprint()})


def cmd_eval_rank(args):
    _config(args)
    report = pipeline.eval_rank(args.checkpoint, args.candidates, args.data, _out(args))
    _print({"auc": report["auc"], "mrr": report["mrr"], "num_users": report["num_users"]})


def cmd_recommend(args):
    cfg = _config(args)
    k = args.k[0] if args.k else 10
    out = _out(args) / f"recommend_{args.user_id}.json"
    result = pipeline.recommend(
        args.checkpoint, args.data, args.user_id, k=k, num_candidates=cfg.get("recall", "candidates"), out_path=out
    )
    _print({"user_id": result["user_id"], "output": str(out),
            "recommendations": [{"jd_id": r["jd_id"], "click_score": r["click_score"]} for r in result["recommendations"]]})


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI configuration file")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config value")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help=f"output directory (overridden by ${OUT_ENV})")
    common.add_argument("--workers", type=int, help="torch intra-op threads")
    common.add_argument("--k", type=int, nargs="+", help="cut-offs (eval-recall) or list length (recommend)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="skillrec", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("validate", parents=[common], help="check dataset invariants")
    p.add_argument("data")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("train-recall", parents=[common], help="train the recall model")
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_train_recall)

    p = sub.add_parser("eval-recall", parents=[common], help="Recall@K / NDCG@K and candidate sets")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval_recall)

    p = sub.add_parser("train-rank", parents=[common], help="train the click predictor")
    p.add_argument("--data", required=True)
    p.add_argument("--recall-checkpoint", required=True)
    p.set_defaults(func=cmd_train_rank)

    p = sub.add_parser("eval-rank", parents=[common], help="AUC / MRR over candidate sets")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--candidates", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval_rank)

    p = sub.add_parser("recommend", parents=[common], help="ranked JDs for one user")
    p.add_argument("--checkpoint", required=True, help="rank checkpoint (embeds the recall model)")
    p.add_argument("--data", required=True)
    p.add_argument("--user-id", required=True)
    p.set_defaults(func=cmd_recommend)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.workers is not None:
        torch.set_num_threads(max(args.workers, 1))
    try:
        args.func(args)
    except (SkillRecError, OSError) as exc:
        msg = " ".join(str(exc).split())
        print(f"skillrec: error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
