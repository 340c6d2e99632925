"""Command-line entry point: synth | train | generate | eval | ablate.

Exit codes: 0 ok, 2 usage error, 3 data error, 4 training divergence.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .corpus import load_corpus, manifest_digest
from .errors import DataError, DivergedLoss, IoFailure
from .langmodel import LossWeights, PretrainHP, ReportModel, Stage2HP, generate_report
from .pipeline import RunConfig, evaluate_run, run_ablation, run_training, synth_corpus
from .schema import load_config
from .vision import VisionHP

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4


def _seed_from(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("BUSTR_SEED")
    if env is not None:
        return int(env)
    return 0


def _check_out_dir(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()) and not force:
        raise IoFailure(f"output directory {path} is not empty (use --force to overwrite)")


def _load_run_config(args) -> RunConfig:
    if getattr(args, "run_config", None):
        doc = json.loads(Path(args.run_config).read_text(encoding="utf-8"))
        rc = RunConfig.from_json(doc)
    else:
        rc = RunConfig()
    seed = _seed_from(args)
    rc.seed = seed
    rc.stage1.seed = seed
    rc.stage2.seed = seed
    rc.lm.seed = seed
    if getattr(args, "dataset", None):
        rc.dataset = args.dataset
    if getattr(args, "corpus", None):
        rc.corpus_dir = args.corpus
    if getattr(args, "out", None):
        rc.out_dir = args.out
    if getattr(args, "folds", None):
        rc.folds = args.folds
    if getattr(args, "image_size", None):
        rc.image_size = args.image_size
    for field, attr in (
        ("stage1_epochs", "stage1"),
        ("stage2_epochs", "stage2"),
        ("lm_epochs", "lm"),
    ):
        value = getattr(args, field, None)
        if value is not None:
            getattr(rc, attr).epochs = value
    for field, attr in (("stage1_lr", "stage1"), ("stage2_lr", "stage2"), ("lm_lr", "lm")):
        value = getattr(args, field, None)
        if value is not None:
            getattr(rc, attr).lr = value
    if getattr(args, "proj_lr", None) is not None:
        rc.stage2.proj_lr = args.proj_lr
    if getattr(args, "loss_mode", None):
        rc.loss = LossWeights(
            mode=args.loss_mode,
            lambda_ce=args.lambda_ce if args.lambda_ce is not None else 0.5,
            lambda_align=args.lambda_align if args.lambda_align is not None else 0.5,
        )
    return rc


def cmd_synth(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    _check_out_dir(out, args.force)
    seed = _seed_from(args)
    synth_corpus(cfg, args.n, seed, out, image_size=args.image_size)
    digest = manifest_digest(out)
    print(f"wrote {args.n} samples to {out} (manifest digest {digest[:16]})")
    return EXIT_OK


def cmd_train(args) -> int:
    rc = _load_run_config(args)
    _check_out_dir(Path(rc.out_dir), args.force)
    load_corpus(rc.corpus_dir)  # fail fast with MissingFile
    out = run_training(rc)
    print(f"trained {rc.folds} folds into {out}")
    return EXIT_OK


def cmd_generate(args) -> int:
    from .corpus import BusImage, _from_png

    model = ReportModel.load(Path(args.model))
    image = BusImage(_from_png(Path(args.image)))
    report = generate_report(image, model)
    out = Path(args.out) if args.out else None
    if out:
        out.write_text(report.full_text, encoding="utf-8")
        print(f"wrote report to {out}")
    else:
        print(report.full_text)
    return EXIT_OK


def cmd_eval(args) -> int:
    rc = _load_run_config(args)
    rc.out_dir = args.run
    results = evaluate_run(rc, compare_dir=args.compare)
    print(f"results written to {results}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    rc = _load_run_config(args)
    _check_out_dir(Path(rc.out_dir), args.force)
    out = run_ablation(rc)
    print(f"ablation grid written to {out / 'ablation.csv'}")
    return EXIT_OK


def _add_hp_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--run-config", help="JSON run config (CLI flags override)")
    parser.add_argument("--dataset", help="dataset config name or path")
    parser.add_argument("--folds", type=int)
    parser.add_argument("--image-size", type=int, dest="image_size")
    parser.add_argument("--stage1-epochs", type=int, dest="stage1_epochs")
    parser.add_argument("--stage1-lr", type=float, dest="stage1_lr")
    parser.add_argument("--stage2-epochs", type=int, dest="stage2_epochs")
    parser.add_argument("--stage2-lr", type=float, dest="stage2_lr")
    parser.add_argument("--proj-lr", type=float, dest="proj_lr")
    parser.add_argument("--lm-epochs", type=int, dest="lm_epochs")
    parser.add_argument("--lm-lr", type=float, dest="lm_lr")
    parser.add_argument("--loss-mode", choices=LossWeights.MODES, dest="loss_mode")
    parser.add_argument("--lambda-ce", type=float, dest="lambda_ce")
    parser.add_argument("--lambda-align", type=float, dest="lambda_align")


def _positive_int(text: str) -> int:
    value = int(text)
    if value <= 0:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bustr", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="synthesize a corpus with supervisory reports")
    p.add_argument("--config", required=True, help="dataset config name (breast, busbra) or JSON path")
    p.add_argument("--n", type=_positive_int, required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--image-size", type=int, default=64, dest="image_size")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train stage 1 + stage 2 for every fold")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--force", action="store_true")
    _add_hp_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="generate a report for one PNG image")
    p.add_argument("--model", required=True, help="report_model directory of a trained fold")
    p.add_argument("--image", required=True)
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="evaluate a trained run (NLG + CE, optional comparison)")
    p.add_argument("--corpus", required=True)
    p.add_argument("--run", required=True, help="training output directory")
    p.add_argument("--compare", help="another run directory to t-test against")
    p.add_argument("--seed", type=int, default=None)
    _add_hp_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the seven-variant ablation grid")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--force", action="store_true")
    _add_hp_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DivergedLoss as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
