"""Scikit-learn style estimators wrapping the two training stages.

`DescriptorVisionModel` is a multi-output classifier/regressor over BUS
samples; `ReportGenerator` is fit on a corpus and predicts narrative report
text from images. Both follow the get_params/set_params contract so they
compose with sklearn tooling (cloning, grid search over init params).
"""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .corpus import BusImage, BusSample, pad_and_resize
from .errors import ShapeMismatch
from .langmodel import (
    LossWeights,
    PretrainHP,
    Stage2HP,
    descriptor_hint_ids,
    generate_report,
    pretrain_lm,
    train_stage2,
)
from .schema import DatasetConfig, DescriptorKind, DescriptorSet, load_config
from .swin import VisionConfig
from .tokenizer import augment_tokenizer, clinical_terms, train_tokenizer
from .vision import VisionHP, train_stage1


def check_samples(X, require_reports: bool = False) -> list[BusSample]:
    """Validate that X is a non-empty sequence of BusSample."""
    samples = list(X)
    if not samples:
        raise ShapeMismatch("X must contain at least one sample")
    for item in samples:
        if not isinstance(item, BusSample):
            raise ShapeMismatch(f"expected BusSample elements, got {type(item).__name__}")
        if require_reports and item.report is None:
            raise ShapeMismatch(f"sample {item.id} has no supervisory report")
    return samples


def as_bus_image(item, spacing: float = 0.2) -> BusImage:
    """Accept BusImage, BusSample, or a raw [0,1] float array."""
    if isinstance(item, BusSample):
        return item.image
    if isinstance(item, BusImage):
        return item
    return BusImage(np.asarray(item, dtype=np.float64), spacing_mm_per_px=spacing)


class DescriptorVisionModel(BaseEstimator):
    """Multi-head descriptor classifier + size regressor (training stage 1)."""

    def __init__(
        self,
        dataset_config: str = "breast",
        image_size: int = 64,
        epochs: int = 100,
        batch_size: int = 8,
        lr: float = 1e-4,
        seed: int = 0,
    ):
        self.dataset_config = dataset_config
        self.image_size = image_size
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed

    def _cfg(self) -> DatasetConfig:
        return load_config(self.dataset_config)

    def fit(self, X, y=None, train_ids=None, val_ids=None):
        """Fit on a sequence of BusSample (labels come from their descriptor sets)."""
        samples = check_samples(X)
        cfg = self._cfg()
        hp = VisionHP(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, seed=self.seed)
        self.checkpoint_ = train_stage1(
            samples,
            cfg,
            hp,
            VisionConfig(image_size=self.image_size),
            train_ids=train_ids,
            val_ids=val_ids,
        )
        self.net_ = self.checkpoint_.build_net()
        return self

    def _require_fitted(self) -> None:
        if not hasattr(self, "net_"):
            raise NotFittedError("call fit before predict")

    def predict(self, X) -> list[DescriptorSet]:
        """Descriptor sets (source=predicted) for images, samples, or arrays."""
        self._require_fitted()
        cfg = self._cfg()
        images = [as_bus_image(item) for item in X]
        resized = [
            img if img.shape == (self.image_size, self.image_size) else pad_and_resize(img, self.image_size)
            for img in images
        ]
        batch = torch.stack([torch.from_numpy(np.asarray(i.pixels, dtype=np.float32))[None] for i in resized])
        with torch.no_grad():
            pred = self.net_.predict(batch)
        out: list[DescriptorSet] = []
        for row in range(batch.shape[0]):
            entries: dict[DescriptorKind, object] = {}
            subtype_values = []
            for task, logits in pred.logits.items():
                idx = int(logits[row].argmax())
                if task.startswith("margin_subtype_"):
                    if idx == 1:
                        subtype_values.append(task.removeprefix("margin_subtype_"))
                    continue
                kind = DescriptorKind(task)
                entries[kind] = cfg.vocabulary(kind).values[idx]
            if subtype_values and entries.get(DescriptorKind.MARGIN_MAIN) == "non-circumscribed":
                entries[DescriptorKind.MARGIN_SUBTYPES] = frozenset(subtype_values)
            if cfg.is_active(DescriptorKind.SIZE):
                entries[DescriptorKind.SIZE] = round(float(pred.size_norm[row]) * self.checkpoint_.size_max, 1)
            out.append(DescriptorSet(entries, source="predicted"))
        return out

    def score(self, X, y=None) -> float:
        """Mean exact-match accuracy over the active categorical kinds."""
        samples = check_samples(X)
        predictions = self.predict(samples)
        cfg = self._cfg()
        kinds = [
            k
            for k in cfg.active_tasks
            if k not in (DescriptorKind.SIZE, DescriptorKind.MARGIN_SUBTYPES)
        ]
        per_kind = []
        for kind in kinds:
            hits = sum(1 for p, s in zip(predictions, samples) if p.get(kind) == s.descriptors.get(kind))
            per_kind.append(hits / len(samples))
        return float(np.mean(per_kind))


class ReportGenerator(BaseEstimator):
    """Image-to-report model: stage-1 pretraining, LM pretraining, stage-2 fine-tuning."""

    def __init__(
        self,
        dataset_config: str = "breast",
        image_size: int = 64,
        stage1_epochs: int = 100,
        stage1_lr: float = 1e-4,
        stage2_epochs: int = 25,
        stage2_lr: float = 1e-4,
        proj_lr: float | None = None,
        lm_epochs: int = 30,
        lm_lr: float = 3e-3,
        batch_size: int = 8,
        loss_mode: str = "mean",
        lambda_ce: float = 0.5,
        lambda_align: float = 0.5,
        seed: int = 0,
    ):
        self.dataset_config = dataset_config
        self.image_size = image_size
        self.stage1_epochs = stage1_epochs
        self.stage1_lr = stage1_lr
        self.stage2_epochs = stage2_epochs
        self.stage2_lr = stage2_lr
        self.proj_lr = proj_lr
        self.lm_epochs = lm_epochs
        self.lm_lr = lm_lr
        self.batch_size = batch_size
        self.loss_mode = loss_mode
        self.lambda_ce = lambda_ce
        self.lambda_align = lambda_align
        self.seed = seed

    def fit(self, X, y=None):
        samples = check_samples(X, require_reports=True)
        cfg = load_config(self.dataset_config)
        vision_cfg = VisionConfig(image_size=self.image_size)
        ckpt = train_stage1(
            samples,
            cfg,
            VisionHP(epochs=self.stage1_epochs, batch_size=self.batch_size, lr=self.stage1_lr, seed=self.seed),
            vision_cfg,
        )
        reports = [s.report for s in samples]
        tokenizer = augment_tokenizer(train_tokenizer(reports), clinical_terms())
        hints = [descriptor_hint_ids(s.descriptors, cfg, tokenizer) for s in samples]
        lm = pretrain_lm(
            reports,
            tokenizer,
            PretrainHP(epochs=self.lm_epochs, lr=self.lm_lr, seed=self.seed),
            prefix_len=vision_cfg.num_tokens,
            prefix_hints=hints,
        )
        weights = LossWeights(mode=self.loss_mode, lambda_ce=self.lambda_ce, lambda_align=self.lambda_align)
        self.model_ = train_stage2(
            samples,
            ckpt,
            lm,
            Stage2HP(
                epochs=self.stage2_epochs,
                batch_size=self.batch_size,
                lr=self.stage2_lr,
                proj_lr=self.proj_lr,
                seed=self.seed,
            ),
            weights,
            corpus_cfg=cfg,
        )
        return self

    def predict(self, X) -> list[str]:
        """Generated report text per input image/sample."""
        if not hasattr(self, "model_"):
            raise NotFittedError("call fit before predict")
        return [generate_report(as_bus_image(item), self.model_).full_text for item in X]
