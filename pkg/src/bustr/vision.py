"""Descriptor-aware multi-head vision model: branches, heads, multitask loss, stage-1 trainer."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import load_checkpoint, save_checkpoint
from .corpus import BusImage, BusSample
from .errors import DivergedLoss, MissingLabel, TaskMismatch
from .schema import DatasetConfig, DescriptorKind, DescriptorSet, MARGIN_TASK
from .swin import SwinEncoder, VisionConfig

# Branch order behind the BI-RADS head; its input width is 4x the token dim.
BIRADS_INPUT_BRANCHES = ("shape", "margin", "posterior", "echo")


class BranchPool(nn.Module):
    """Per-branch transform (linear + GELU) followed by mean pooling over patches."""

    def __init__(self, dim: int):
        super().__init__()
        self.fc = nn.Linear(dim, dim)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        return F.gelu(self.fc(tokens)).mean(dim=1)


@dataclass
class DescriptorPredictions:
    """Per-head logits plus the sigmoid-bounded normalized size."""

    logits: dict[str, torch.Tensor]
    size_norm: torch.Tensor


def subtype_task_names(cfg: DatasetConfig) -> tuple[str, ...]:
    if not cfg.is_active(DescriptorKind.MARGIN_SUBTYPES):
        return ()
    return tuple(f"margin_subtype_{name}" for name in cfg.vocabulary(DescriptorKind.MARGIN_SUBTYPES).values)


class DescriptorVisionNet(nn.Module):
    """Windowed-attention encoder with one pooled branch per descriptor family.

    The four descriptor branches always exist and feed the BI-RADS head via
    concatenation, whether or not their own heads are supervised under the
    active configuration; the size branch is likewise always present.
    """

    def __init__(self, vision_cfg: VisionConfig, dataset_cfg: DatasetConfig):
        super().__init__()
        self.vision_cfg = vision_cfg
        self.dataset_cfg = dataset_cfg
        self.encoder = SwinEncoder(vision_cfg)
        dim = self.encoder.out_dim

        branch_names = list(BIRADS_INPUT_BRANCHES) + ["size"]
        for kind in (DescriptorKind.PATHOLOGY, DescriptorKind.HISTOLOGY):
            if dataset_cfg.is_active(kind):
                branch_names.append(kind.value)
        self.branches = nn.ModuleDict({name: BranchPool(dim) for name in branch_names})

        heads: dict[str, nn.Module] = {}
        heads["birads"] = nn.Linear(dim * len(BIRADS_INPUT_BRANCHES), len(dataset_cfg.vocabulary(DescriptorKind.BIRADS)))
        if dataset_cfg.is_active(DescriptorKind.SHAPE):
            heads["shape"] = nn.Linear(dim, len(dataset_cfg.vocabulary(DescriptorKind.SHAPE)))
        if dataset_cfg.is_active(DescriptorKind.MARGIN_MAIN):
            heads["margin_main"] = nn.Linear(dim, len(dataset_cfg.vocabulary(DescriptorKind.MARGIN_MAIN)))
        for task in subtype_task_names(dataset_cfg):
            heads[task] = nn.Linear(dim, 2)
        if dataset_cfg.is_active(DescriptorKind.POSTERIOR):
            heads["posterior"] = nn.Linear(dim, len(dataset_cfg.vocabulary(DescriptorKind.POSTERIOR)))
        if dataset_cfg.is_active(DescriptorKind.ECHOGENICITY):
            heads["echogenicity"] = nn.Linear(dim, len(dataset_cfg.vocabulary(DescriptorKind.ECHOGENICITY)))
        if dataset_cfg.is_active(DescriptorKind.PATHOLOGY):
            heads["pathology"] = nn.Linear(dim, len(dataset_cfg.vocabulary(DescriptorKind.PATHOLOGY)))
        if dataset_cfg.is_active(DescriptorKind.HISTOLOGY):
            heads["histology"] = nn.Linear(dim, len(dataset_cfg.vocabulary(DescriptorKind.HISTOLOGY)))
        heads["size"] = nn.Linear(dim, 1)
        self.heads = nn.ModuleDict(heads)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """(B, 1, S, S) -> patch tokens (B, P, E)."""
        return self.encoder(images)

    def predict_from_tokens(self, tokens: torch.Tensor) -> DescriptorPredictions:
        pooled = {name: branch(tokens) for name, branch in self.branches.items()}
        logits: dict[str, torch.Tensor] = {}
        birads_input = torch.cat([pooled[name] for name in BIRADS_INPUT_BRANCHES], dim=-1)
        for task, head in self.heads.items():
            if task == "birads":
                logits[task] = head(birads_input)
            elif task == "size":
                continue
            elif task == "shape":
                logits[task] = head(pooled["shape"])
            elif task == "margin_main" or task.startswith("margin_subtype_"):
                logits[task] = head(pooled["margin"])
            elif task == "posterior":
                logits[task] = head(pooled["posterior"])
            elif task == "echogenicity":
                logits[task] = head(pooled["echo"])
            else:  # pathology / histology read their dedicated branches
                logits[task] = head(pooled[task])
        size_norm = torch.sigmoid(self.heads["size"](pooled["size"])).squeeze(-1)
        return DescriptorPredictions(logits=logits, size_norm=size_norm)

    def predict(self, images: torch.Tensor) -> DescriptorPredictions:
        return self.predict_from_tokens(self.forward(images))


def encode(image: BusImage, net: DescriptorVisionNet) -> torch.Tensor:
    """Single-image convenience wrapper returning the (P, E) token matrix."""
    tensor = torch.from_numpy(np.asarray(image.pixels, dtype=np.float32))[None, None]
    net.eval()
    with torch.no_grad():
        return net(tensor)[0]


def predict_heads(tokens: torch.Tensor, net: DescriptorVisionNet) -> DescriptorPredictions:
    """Head predictions for a (B, P, E) or (P, E) token matrix."""
    if tokens.dim() == 2:
        tokens = tokens.unsqueeze(0)
    return net.predict_from_tokens(tokens)


def build_labels(
    descriptor_sets: list[DescriptorSet],
    cfg: DatasetConfig,
    size_max: float,
) -> dict[str, torch.Tensor]:
    """Tensorize ground-truth labels for every active task."""
    labels: dict[str, list] = {}

    def put(task: str, value) -> None:
        labels.setdefault(task, []).append(value)

    for ds in descriptor_sets:
        for kind in cfg.active_tasks:
            value = ds.get(kind)
            if value is None and kind is not DescriptorKind.MARGIN_SUBTYPES:
                raise MissingLabel(f"sample lacks a value for active task {kind.value}")
            if kind is DescriptorKind.SIZE:
                put("size", min(max(float(value) / size_max, 0.0), 1.0))
            elif kind is DescriptorKind.MARGIN_SUBTYPES:
                present = frozenset(value or frozenset())
                for name in cfg.vocabulary(kind).values:
                    put(f"margin_subtype_{name}", 1 if name in present else 0)
            else:
                put(kind.value, cfg.vocabulary(kind).index(str(value)))
    out: dict[str, torch.Tensor] = {}
    for task, values in labels.items():
        out[task] = torch.tensor(values, dtype=torch.float32 if task == "size" else torch.long)
    return out


def task_losses(
    pred: DescriptorPredictions,
    labels: dict[str, torch.Tensor],
    cfg: DatasetConfig,
) -> dict[str, torch.Tensor]:
    """Per-task losses: cross-entropy for categorical heads, L1 on the normalized size."""
    losses: dict[str, torch.Tensor] = {}
    for task, logits in pred.logits.items():
        if task not in labels:
            raise MissingLabel(f"missing label for task {task}")
        losses[task] = F.cross_entropy(logits, labels[task])
    if cfg.is_active(DescriptorKind.SIZE):
        if "size" not in labels:
            raise MissingLabel("missing label for task size")
        losses["size"] = (pred.size_norm - labels["size"]).abs().mean()
    return losses


def combined_margin_loss(main, subs) -> float | torch.Tensor:
    """0.5 * main margin loss + 0.125 * sum of the four subtype losses."""
    subs = tuple(subs)
    if len(subs) != 4:
        raise TaskMismatch(f"expected 4 subtype losses, got {len(subs)}")
    if isinstance(main, torch.Tensor) or any(isinstance(s, torch.Tensor) for s in subs):
        return 0.5 * main + 0.125 * torch.stack([torch.as_tensor(s) for s in subs]).sum()
    return 0.5 * main + 0.125 * math.fsum(subs)


def fold_margin(raw: dict[str, torch.Tensor], cfg: DatasetConfig) -> dict[str, torch.Tensor]:
    """Collapse margin_main plus the subtype losses into the combined margin task."""
    folded: dict[str, torch.Tensor] = {}
    sub_names = subtype_task_names(cfg)
    for task, value in raw.items():
        if task == "margin_main" or task in sub_names:
            continue
        folded[task] = value
    if "margin_main" in raw:
        folded[MARGIN_TASK] = combined_margin_loss(raw["margin_main"], [raw[s] for s in sub_names])
    return folded


def vision_loss(per_task: dict[str, torch.Tensor | float], cfg: DatasetConfig):
    """Arithmetic mean of the active main-task losses."""
    expected = cfg.main_tasks()
    if set(per_task) != set(expected):
        raise TaskMismatch(f"per-task keys {sorted(per_task)} != active tasks {sorted(expected)}")
    values = [per_task[name] for name in expected]
    if any(isinstance(v, torch.Tensor) for v in values):
        return torch.stack([torch.as_tensor(v) for v in values]).mean()
    return math.fsum(values) / len(values)


def multitask_loss(net: DescriptorVisionNet, images: torch.Tensor, labels: dict[str, torch.Tensor]):
    pred = net.predict(images)
    return vision_loss(fold_margin(task_losses(pred, labels, net.dataset_cfg), net.dataset_cfg), net.dataset_cfg)


@dataclass
class VisionHP:
    """Stage-1 trainer hyperparameters (defaults follow the two-stage schedule)."""

    epochs: int = 100
    batch_size: int = 8
    lr: float = 1e-4
    seed: int = 0

    def to_json(self) -> dict:
        return {"epochs": self.epochs, "batch_size": self.batch_size, "lr": self.lr, "seed": self.seed}

    @classmethod
    def from_json(cls, doc: dict) -> "VisionHP":
        return cls(
            epochs=int(doc.get("epochs", cls.epochs)),
            batch_size=int(doc.get("batch_size", cls.batch_size)),
            lr=float(doc.get("lr", cls.lr)),
            seed=int(doc.get("seed", cls.seed)),
        )


@dataclass
class VisionCheckpoint:
    """Everything needed to rebuild the stage-1 model deterministically."""

    state: dict[str, torch.Tensor]
    vision_cfg: VisionConfig
    dataset_cfg: DatasetConfig
    size_max: float
    seed: int
    epoch: int
    history: dict[str, list[float]] = field(default_factory=dict)
    pretrained: str | None = None  # reserved for imported encoder weights

    def build_net(self) -> DescriptorVisionNet:
        net = DescriptorVisionNet(self.vision_cfg, self.dataset_cfg)
        net.load_state_dict(self.state)
        net.eval()
        return net

    def save(self, path: str | Path) -> Path:
        header = {
            "kind": "vision",
            "vision_cfg": self.vision_cfg.to_json(),
            "dataset_cfg": self.dataset_cfg.to_json(),
            "config_hash": self.dataset_cfg.config_hash(),
            "size_max": self.size_max,
            "seed": self.seed,
            "epoch": self.epoch,
            "history": self.history,
            "pretrained": self.pretrained,
        }
        return save_checkpoint(path, header, self.state)

    @classmethod
    def load(cls, path: str | Path) -> "VisionCheckpoint":
        header, state = load_checkpoint(path)
        return cls(
            state=state,
            vision_cfg=VisionConfig.from_json(header["vision_cfg"]),
            dataset_cfg=DatasetConfig.from_json(header["dataset_cfg"]),
            size_max=float(header["size_max"]),
            seed=int(header["seed"]),
            epoch=int(header["epoch"]),
            history={k: list(v) for k, v in header.get("history", {}).items()},
            pretrained=header.get("pretrained"),
        )


def samples_to_tensors(samples: list[BusSample]) -> torch.Tensor:
    return torch.stack(
        [torch.from_numpy(np.asarray(s.image.pixels, dtype=np.float32))[None] for s in samples]
    )


def size_normalizer(samples: list[BusSample], cfg: DatasetConfig) -> float:
    """Max tumor size over the training split (1.0 when size is not supervised)."""
    if not cfg.is_active(DescriptorKind.SIZE):
        return 1.0
    sizes = [float(s.descriptors.get(DescriptorKind.SIZE)) for s in samples]
    return max(sizes) if sizes else 1.0


def _check_divergence(loss_value: float, reference: float | None) -> None:
    if not math.isfinite(loss_value):
        raise DivergedLoss(f"loss became non-finite ({loss_value})")
    if reference is not None and loss_value > max(1e3, 100.0 * reference):
        raise DivergedLoss(f"loss exploded to {loss_value:.3g} (first epoch was {reference:.3g})")


def train_stage1(
    samples: list[BusSample],
    cfg: DatasetConfig,
    hp: VisionHP | None = None,
    vision_cfg: VisionConfig | None = None,
    train_ids: list[str] | None = None,
    val_ids: list[str] | None = None,
) -> VisionCheckpoint:
    """Train encoder + heads on the configuration-averaged multitask loss.

    Deterministic given the seed. Checkpoints the best validation loss; when
    no validation ids are given the train split doubles as validation (the
    overfit-probe mode).
    """
    hp = hp or VisionHP()
    vision_cfg = vision_cfg or VisionConfig()
    by_id = {s.id: s for s in samples}
    train = [by_id[i] for i in train_ids] if train_ids else list(samples)
    val = [by_id[i] for i in val_ids] if val_ids else train

    torch.manual_seed(hp.seed)
    net = DescriptorVisionNet(vision_cfg, cfg)
    size_max = size_normalizer(train, cfg)
    images = samples_to_tensors(train)
    labels = build_labels([s.descriptors for s in train], cfg, size_max)
    val_images = samples_to_tensors(val)
    val_labels = build_labels([s.descriptors for s in val], cfg, size_max)

    optimizer = torch.optim.Adam(net.parameters(), lr=hp.lr)
    history: dict[str, list[float]] = {"train": [], "val": []}
    best_val = math.inf
    best_state = copy.deepcopy(net.state_dict())
    best_epoch = 0
    first_batch_loss: float | None = None
    n = len(train)
    for epoch in range(hp.epochs):
        net.train()
        gen = torch.Generator().manual_seed(hp.seed * 100003 + epoch)
        order = torch.randperm(n, generator=gen)
        epoch_losses = []
        for start in range(0, n, hp.batch_size):
            idx = order[start : start + hp.batch_size]
            batch_labels = {k: v[idx] for k, v in labels.items()}
            loss = multitask_loss(net, images[idx], batch_labels)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            value = float(loss.detach())
            if first_batch_loss is None:
                first_batch_loss = value
            _check_divergence(value, first_batch_loss)
            epoch_losses.append(value)
        train_loss = float(np.mean(epoch_losses))
        net.eval()
        with torch.no_grad():
            val_loss = float(multitask_loss(net, val_images, val_labels))
        _check_divergence(val_loss, first_batch_loss)
        history["train"].append(train_loss)
        history["val"].append(val_loss)
        if val_loss < best_val:
            best_val = val_loss
            best_state = copy.deepcopy(net.state_dict())
            best_epoch = epoch
    return VisionCheckpoint(
        state=best_state,
        vision_cfg=vision_cfg,
        dataset_cfg=cfg,
        size_max=size_max,
        seed=hp.seed,
        epoch=best_epoch,
        history=history,
    )


def head_accuracies(
    net: DescriptorVisionNet,
    samples: list[BusSample],
    cfg: DatasetConfig,
    size_max: float,
) -> dict[str, float]:
    """Exact-match accuracy per categorical head (argmax ties break to the lowest index)."""
    net.eval()
    images = samples_to_tensors(samples)
    labels = build_labels([s.descriptors for s in samples], cfg, size_max)
    with torch.no_grad():
        pred = net.predict(images)
    out: dict[str, float] = {}
    for task, logits in pred.logits.items():
        out[task] = float((logits.argmax(dim=-1) == labels[task]).float().mean())
    return out
