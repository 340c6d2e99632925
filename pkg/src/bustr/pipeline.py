"""Run-level orchestration: corpus synthesis, per-fold two-stage training, evaluation, ablation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from .corpus import (
    BusSample,
    birads_labels,
    load_corpus,
    load_corpus_config,
    load_fold_plan,
    make_folds,
    save_corpus,
    save_fold_plan,
)
from .errors import MissingFile
from .langmodel import (
    FrozenLM,
    LossWeights,
    PretrainHP,
    ReportModel,
    Stage2HP,
    descriptor_hint_ids,
    generate_report,
    pretrain_lm,
    train_stage2,
)
from .metrics import MetricsRecord, ce_metrics, nlg_metrics, paired_ttest, parse_report, NLG_COLUMNS
from .reporting import supervisory_report
from .results import emit_results
from .schema import DatasetConfig, load_config
from .swin import VisionConfig
from .synth import RenderConfig, sample_corpus
from .tokenizer import ReportTokenizer, augment_tokenizer, clinical_terms, train_tokenizer
from .vision import DescriptorVisionNet, VisionCheckpoint, VisionHP, size_normalizer, train_stage1

import torch


@dataclass
class RunConfig:
    """Everything one training/evaluation run needs, JSON-serializable."""

    dataset: str = "breast"
    corpus_dir: str = "corpus"
    out_dir: str = "run"
    seed: int = 0
    folds: int = 5
    image_size: int = 64
    stage1: VisionHP = field(default_factory=VisionHP)
    stage2: Stage2HP = field(default_factory=Stage2HP)
    lm: PretrainHP = field(default_factory=PretrainHP)
    loss: LossWeights = field(default_factory=lambda: LossWeights(mode="mean"))

    def vision_config(self) -> VisionConfig:
        return VisionConfig(image_size=self.image_size)

    def to_json(self) -> dict:
        return {
            "dataset": self.dataset,
            "corpus_dir": self.corpus_dir,
            "out_dir": self.out_dir,
            "seed": self.seed,
            "folds": self.folds,
            "image_size": self.image_size,
            "stage1": self.stage1.to_json(),
            "stage2": self.stage2.to_json(),
            "lm": self.lm.to_json(),
            "loss": self.loss.to_json(),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "RunConfig":
        rc = cls(
            dataset=doc.get("dataset", "breast"),
            corpus_dir=doc.get("corpus_dir", "corpus"),
            out_dir=doc.get("out_dir", "run"),
            seed=int(doc.get("seed", 0)),
            folds=int(doc.get("folds", 5)),
            image_size=int(doc.get("image_size", 64)),
        )
        if "stage1" in doc:
            rc.stage1 = VisionHP.from_json(doc["stage1"])
        if "stage2" in doc:
            rc.stage2 = Stage2HP.from_json(doc["stage2"])
        if "lm" in doc:
            rc.lm = PretrainHP.from_json(doc["lm"])
        if "loss" in doc:
            rc.loss = LossWeights.from_json(doc["loss"])
        return rc


def attach_reports(samples: list[BusSample], cfg: DatasetConfig) -> None:
    """Build and attach the supervisory report for every sample."""
    for sample in samples:
        _, report = supervisory_report(sample.descriptors, sample.radiomics, sample_id=sample.id)
        sample.report = report.full_text


def synth_corpus(cfg: DatasetConfig, n: int, seed: int, out_dir: str | Path, image_size: int = 64) -> Path:
    """Sample a corpus, write supervisory reports, persist everything."""
    samples = sample_corpus(cfg, n, seed=seed, render_cfg=RenderConfig(side=image_size))
    attach_reports(samples, cfg)
    return save_corpus(samples, out_dir, cfg)


def ensure_fold_plan(corpus_dir: str | Path, samples: list[BusSample], k: int, seed: int):
    """Load the shared fold plan for a corpus, creating it on first use."""
    try:
        plan = load_fold_plan(corpus_dir)
        if plan.k == k and plan.seed == seed:
            return plan
    except MissingFile:
        pass
    plan = make_folds([s.id for s in samples], birads_labels(samples), k=k, seed=seed)
    save_fold_plan(plan, corpus_dir)
    return plan


def build_fold_tokenizer(train_samples: list[BusSample]) -> ReportTokenizer:
    reports = [s.report for s in train_samples]
    return augment_tokenizer(train_tokenizer(reports), clinical_terms())


def pretrain_fold_lm(
    train_samples: list[BusSample],
    cfg: DatasetConfig,
    tokenizer: ReportTokenizer,
    hp: PretrainHP,
    vision_cfg: VisionConfig,
) -> FrozenLM:
    reports = [s.report for s in train_samples]
    hints = [descriptor_hint_ids(s.descriptors, cfg, tokenizer) for s in train_samples]
    return pretrain_lm(reports, tokenizer, hp, prefix_len=vision_cfg.num_tokens, prefix_hints=hints)


def random_vision_checkpoint(
    train_samples: list[BusSample],
    cfg: DatasetConfig,
    vision_cfg: VisionConfig,
    seed: int,
) -> VisionCheckpoint:
    """Untrained encoder checkpoint (the plain-encoder ablation arms)."""
    torch.manual_seed(seed)
    net = DescriptorVisionNet(vision_cfg, cfg)
    return VisionCheckpoint(
        state={k: v.clone() for k, v in net.state_dict().items()},
        vision_cfg=vision_cfg,
        dataset_cfg=cfg,
        size_max=size_normalizer(train_samples, cfg),
        seed=seed,
        epoch=-1,
    )


def train_fold(
    samples: list[BusSample],
    cfg: DatasetConfig,
    plan,
    fold: int,
    rc: RunConfig,
    out_dir: Path,
    multitask_pretrain: bool = True,
) -> Path:
    """Stage-1 + LM pretraining + stage-2 for one fold; writes checkpoints and logs."""
    by_id = {s.id: s for s in samples}
    train_ids = plan.train_ids[fold]
    val_ids = plan.val_ids[fold]
    train = [by_id[i] for i in train_ids]
    fit = [by_id[i] for i in train_ids + val_ids]
    vision_cfg = rc.vision_config()

    fold_dir = out_dir / f"fold{fold}"
    fold_dir.mkdir(parents=True, exist_ok=True)
    stage1 = replace(rc.stage1, seed=rc.stage1.seed + fold)
    if multitask_pretrain:
        ckpt = train_stage1(samples, cfg, stage1, vision_cfg, train_ids=train_ids, val_ids=val_ids)
    else:
        ckpt = random_vision_checkpoint(train, cfg, vision_cfg, seed=stage1.seed)
    ckpt.save(fold_dir / "stage1.ckpt")

    tokenizer = build_fold_tokenizer(fit)
    lm_hp = replace(rc.lm, seed=rc.lm.seed + fold)
    lm = pretrain_fold_lm(fit, cfg, tokenizer, lm_hp, vision_cfg)

    stage2 = replace(rc.stage2, seed=rc.stage2.seed + fold)
    model = train_stage2(samples, ckpt, lm, stage2, rc.loss, train_ids=train_ids, corpus_cfg=cfg)
    model.save(fold_dir / "report_model")

    logs = {
        "fold": fold,
        "stage1_history": ckpt.history,
        "stage2_history": model.history,
        "lm_stats": lm.stats,
    }
    (fold_dir / "logs.json").write_text(json.dumps(logs, indent=2, sort_keys=True), encoding="utf-8")
    return fold_dir


def run_training(rc: RunConfig, multitask_pretrain: bool = True) -> Path:
    """Train all folds with the shared fold plan. Returns the run directory."""
    samples = load_corpus(rc.corpus_dir)
    cfg = load_corpus_config(rc.corpus_dir)
    plan = ensure_fold_plan(rc.corpus_dir, samples, rc.folds, rc.seed)
    out_dir = Path(rc.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run_config.json").write_text(json.dumps(rc.to_json(), indent=2, sort_keys=True), encoding="utf-8")
    for fold in range(rc.folds):
        train_fold(samples, cfg, plan, fold, rc, out_dir, multitask_pretrain=multitask_pretrain)
    return out_dir


def evaluate_fold(samples: list[BusSample], cfg: DatasetConfig, plan, fold: int, run_dir: Path) -> MetricsRecord:
    """Generate reports on the fold's test split and score them."""
    fold_dir = run_dir / f"fold{fold}"
    if not (fold_dir / "report_model" / "stage2.ckpt").exists():
        raise MissingFile(f"no trained report model under {fold_dir}")
    model = ReportModel.load(fold_dir / "report_model")
    by_id = {s.id: s for s in samples}
    test = [by_id[i] for i in plan.test_ids(fold)]
    hypotheses = [generate_report(s.image, model).full_text for s in test]
    references = [s.report for s in test]
    nlg = nlg_metrics(hypotheses, references)
    parsed = [parse_report(h, cfg) for h in hypotheses]
    ce = ce_metrics(parsed, [s.descriptors for s in test], cfg)
    histories: dict[str, list[float]] = {}
    logs_path = fold_dir / "logs.json"
    if logs_path.exists():
        logs = json.loads(logs_path.read_text(encoding="utf-8"))
        histories["stage1_loss"] = logs.get("stage1_history", {}).get("train", [])
        histories["stage2_loss"] = logs.get("stage2_history", {}).get("loss", [])
    record = MetricsRecord(fold=fold, nlg=nlg, ce=ce, histories=histories)
    (fold_dir / "generated.json").write_text(
        json.dumps(
            [{"id": s.id, "generated": h, "reference": r} for s, h, r in zip(test, hypotheses, references)],
            indent=2,
            sort_keys=True,
        ),
        encoding="utf-8",
    )
    return record


def load_nlg_csv(path: Path) -> dict[str, list[float]]:
    """Per-metric fold scores from an emitted nlg.csv (mean row excluded)."""
    if not path.exists():
        raise MissingFile(f"{path} does not exist")
    lines = path.read_text(encoding="utf-8").strip().splitlines()
    header = lines[0].split(",")[1:]
    out: dict[str, list[float]] = {name: [] for name in header}
    for line in lines[1:]:
        cells = line.split(",")
        if cells[0] == "mean":
            continue
        for name, cell in zip(header, cells[1:]):
            out[name].append(float(cell))
    return out


def evaluate_run(rc: RunConfig, compare_dir: str | Path | None = None) -> Path:
    """Evaluate every fold of a trained run; optionally t-test against another run."""
    samples = load_corpus(rc.corpus_dir)
    cfg = load_corpus_config(rc.corpus_dir)
    plan = load_fold_plan(rc.corpus_dir)
    run_dir = Path(rc.out_dir)
    records = [evaluate_fold(samples, cfg, plan, fold, run_dir) for fold in range(rc.folds)]
    significance = None
    if compare_dir is not None:
        ours = {name: [r.nlg_row()[name] for r in records] for name in NLG_COLUMNS}
        theirs = load_nlg_csv(Path(compare_dir) / "results" / "nlg.csv")
        significance = {}
        for name in NLG_COLUMNS:
            if name in theirs and len(theirs[name]) == len(ours[name]):
                significance[name] = paired_ttest(ours[name], theirs[name])
    results_dir = run_dir / "results"
    emit_results(records, results_dir, significance=significance)
    return results_dir


ABLATION_VARIANTS = (
    ("base", False, LossWeights(mode="weighted_sum", lambda_ce=1.0, lambda_align=0.0)),
    ("vision_only", True, LossWeights(mode="weighted_sum", lambda_ce=1.0, lambda_align=0.0)),
    ("loss_only", False, LossWeights(mode="mean")),
    ("full_sum", True, LossWeights(mode="sum")),
    ("full_product", True, LossWeights(mode="product")),
    ("full_mean", True, LossWeights(mode="mean")),
    ("full_max", True, LossWeights(mode="max")),
)


def run_ablation(rc: RunConfig) -> Path:
    """Train + evaluate the seven-variant grid and emit a combined table."""
    out_root = Path(rc.out_dir)
    out_root.mkdir(parents=True, exist_ok=True)
    rows: list[tuple[str, dict[str, float]]] = []
    for name, pretrain, weights in ABLATION_VARIANTS:
        sub = replace(rc, out_dir=str(out_root / name), loss=weights)
        run_training(sub, multitask_pretrain=pretrain)
        evaluate_run(sub)
        scores = load_nlg_csv(Path(sub.out_dir) / "results" / "nlg.csv")
        rows.append((name, {metric: sum(vals) / len(vals) for metric, vals in scores.items()}))
    lines = ["variant," + ",".join(NLG_COLUMNS)]
    for name, row in rows:
        lines.append(name + "," + ",".join(f"{row[c]:.6f}" for c in NLG_COLUMNS))
    (out_root / "ablation.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    md = ["| variant | " + " | ".join(NLG_COLUMNS) + " |", "|" + "---|" * (len(NLG_COLUMNS) + 1)]
    for name, row in rows:
        md.append(f"| {name} | " + " | ".join(f"{row[c]:.6f}" for c in NLG_COLUMNS) + " |")
    (out_root / "ablation.md").write_text("\n".join(md) + "\n", encoding="utf-8")
    return out_root
