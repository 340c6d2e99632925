"""Frozen causal LM, vision-token projection, dual-level objective, stage-2 trainer, generation."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import load_checkpoint, module_hash, save_checkpoint
from .corpus import BusImage, BusSample, pad_and_resize
from .errors import ContextOverflow, DivergedLoss, FrozenViolation, TooFewSamples
from .reporting import ReportText, format_size, generation_prompt, insert_size
from .schema import DatasetConfig, DescriptorKind
from .swin import VisionConfig
from .tokenizer import EOS_ID, IMG_ID, PAD_ID, ReportTokenizer
from .vision import DescriptorVisionNet, VisionCheckpoint, samples_to_tensors

IGNORE_INDEX = -100
ALIGN_EPS = 1e-8
MAX_GENERATION_TOKENS = 128


@dataclass(frozen=True)
class LMConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    context: int = 256
    mlp_ratio: float = 4.0

    def to_json(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "d_model": self.d_model,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "context": self.context,
            "mlp_ratio": self.mlp_ratio,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "LMConfig":
        return cls(
            vocab_size=int(doc["vocab_size"]),
            d_model=int(doc["d_model"]),
            n_layers=int(doc["n_layers"]),
            n_heads=int(doc["n_heads"]),
            context=int(doc["context"]),
            mlp_ratio=float(doc["mlp_ratio"]),
        )


class CausalSelfAttention(nn.Module):
    def __init__(self, cfg: LMConfig):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.qkv = nn.Linear(cfg.d_model, 3 * cfg.d_model)
        self.proj = nn.Linear(cfg.d_model, cfg.d_model)

    def forward(self, x: torch.Tensor, pad_mask: torch.Tensor | None) -> torch.Tensor:
        b, length, dim = x.shape
        qkv = self.qkv(x).reshape(b, length, 3, self.n_heads, dim // self.n_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) / math.sqrt(dim // self.n_heads)
        causal = torch.triu(torch.ones(length, length, dtype=torch.bool, device=x.device), diagonal=1)
        attn = attn.masked_fill(causal, float("-inf"))
        if pad_mask is not None:
            attn = attn.masked_fill(pad_mask[:, None, None, :], float("-inf"))
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, length, dim)
        return self.proj(out)


class Block(nn.Module):
    def __init__(self, cfg: LMConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.attn = CausalSelfAttention(cfg)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        hidden = int(cfg.d_model * cfg.mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(cfg.d_model, hidden), nn.GELU(), nn.Linear(hidden, cfg.d_model))

    def forward(self, x: torch.Tensor, pad_mask: torch.Tensor | None) -> torch.Tensor:
        x = x + self.attn(self.norm1(x), pad_mask)
        return x + self.mlp(self.norm2(x))


class CausalLM(nn.Module):
    """Decoder-only transformer with learned positions and an untied unembedding.

    Hidden width equals embedding width, which the alignment loss relies on;
    keeping the output projection separate from the input embeddings lets the
    final hidden states stay close to the input-embedding trajectory while
    still scoring the next token.
    """

    def __init__(self, cfg: LMConfig):
        super().__init__()
        self.cfg = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.pos_emb = nn.Embedding(cfg.context, cfg.d_model)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.norm = nn.LayerNorm(cfg.d_model)
        self.lm_head = nn.Linear(cfg.d_model, cfg.vocab_size, bias=False)

    def embed(self, ids: torch.Tensor) -> torch.Tensor:
        return self.tok_emb(ids)

    def forward_embeds(
        self, z: torch.Tensor, pad_mask: torch.Tensor | None = None
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Input embeddings (B, L, D) -> final hidden states and logits."""
        b, length, _ = z.shape
        if length > self.cfg.context:
            raise ContextOverflow(f"sequence length {length} exceeds context {self.cfg.context}")
        positions = torch.arange(length, device=z.device)
        x = z + self.pos_emb(positions)[None]
        for block in self.blocks:
            x = block(x, pad_mask)
        hidden = self.norm(x)
        return hidden, self.lm_head(hidden)


class FrozenLM:
    """A pretrained CausalLM plus its tokenizer, locked for stage-2 training."""

    def __init__(self, model: CausalLM, tokenizer: ReportTokenizer, stats: dict | None = None):
        self.model = model
        self.tokenizer = tokenizer
        self.stats = stats or {}
        self._frozen = False

    @property
    def frozen(self) -> bool:
        return self._frozen

    @property
    def context(self) -> int:
        return self.model.cfg.context

    def freeze(self) -> "FrozenLM":
        self.model.eval()
        for param in self.model.parameters():
            param.requires_grad_(False)
        self._frozen = True
        return self

    def parameter_hash(self) -> str:
        return module_hash(self.model)

    def embed(self, ids: torch.Tensor) -> torch.Tensor:
        return self.model.embed(ids)

    def save(self, path: str | Path) -> Path:
        header = {"kind": "lm", "lm_cfg": self.model.cfg.to_json(), "stats": self.stats}
        return save_checkpoint(path, header, dict(self.model.state_dict()))

    @classmethod
    def load(cls, path: str | Path, tokenizer: ReportTokenizer) -> "FrozenLM":
        header, state = load_checkpoint(path)
        model = CausalLM(LMConfig.from_json(header["lm_cfg"]))
        model.load_state_dict(state)
        lm = cls(model, tokenizer, stats=header.get("stats", {}))
        return lm.freeze()


def resize_embeddings(model: CausalLM, old_tokenizer: ReportTokenizer, new_tokenizer: ReportTokenizer) -> CausalLM:
    """Grow the (tied) embedding matrix for an augmented tokenizer.

    Each new row is initialized to the mean of the embeddings the term
    previously decomposed into.
    """
    old_size = model.cfg.vocab_size
    new_size = new_tokenizer.vocab_size
    if new_size == old_size:
        return model
    cfg = LMConfig(
        vocab_size=new_size,
        d_model=model.cfg.d_model,
        n_layers=model.cfg.n_layers,
        n_heads=model.cfg.n_heads,
        context=model.cfg.context,
        mlp_ratio=model.cfg.mlp_ratio,
    )
    grown = CausalLM(cfg)
    state = dict(model.state_dict())
    old_emb = state.pop("tok_emb.weight")
    old_head = state.pop("lm_head.weight")
    with torch.no_grad():
        grown.load_state_dict(state, strict=False)
        grown.tok_emb.weight[:old_size] = old_emb
        grown.lm_head.weight[:old_size] = old_head
        for new_id in range(old_size, new_size):
            term = new_tokenizer.decode([new_id])
            sub_ids = old_tokenizer.encode(term)
            grown.tok_emb.weight[new_id] = old_emb[sub_ids].mean(dim=0)
            grown.lm_head.weight[new_id] = old_head[sub_ids].mean(dim=0)
    return grown


@dataclass
class PretrainHP:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 3e-3
    seed: int = 0
    val_fraction: float = 0.1
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    context: int = 256
    mlp_ratio: float = 4.0
    # gaussian noise on prefix-slot embeddings; toughens the read-out circuit
    # against the approximate vectors the projection head supplies later
    prefix_noise: float = 0.5

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_json(cls, doc: dict) -> "PretrainHP":
        return cls(**{k: doc[k] for k in doc if k in cls.__dataclass_fields__})


def _pad_batch(sequences: list[list[int]]) -> tuple[torch.Tensor, torch.Tensor]:
    max_len = max(len(s) for s in sequences)
    ids = torch.full((len(sequences), max_len), PAD_ID, dtype=torch.long)
    for i, seq in enumerate(sequences):
        ids[i, : len(seq)] = torch.tensor(seq, dtype=torch.long)
    return ids, ids.eq(PAD_ID)


def _check_divergence(value: float, reference: float | None) -> None:
    if not math.isfinite(value):
        raise DivergedLoss(f"loss became non-finite ({value})")
    if reference is not None and value > max(1e3, 100.0 * reference):
        raise DivergedLoss(f"loss exploded to {value:.3g} (first epoch was {reference:.3g})")


def pretrain_lm(
    reports: list[str],
    tokenizer: ReportTokenizer,
    hp: PretrainHP | None = None,
    prompt_text: str | None = None,
    prefix_len: int = 0,
    prefix_hints: list[list[int]] | None = None,
) -> FrozenLM:
    """Train the desk-scale causal LM on prompt+report sequences, then freeze it.

    Stands in for a pre-trained full-size model. ``prefix_len`` image-slot
    tokens are prepended so the positional layout matches the vision-prefixed
    sequences the frozen model will see later; ``prefix_hints`` seeds those
    slots with each sample's descriptor-value tokens, which teaches the model
    to read report content out of the prefix (the circuit prefix tuning
    exploits in stage 2). Training uses the same dual objective (token CE +
    alignment, averaged) so hidden states stay geometrically close to the
    input embeddings. Held-out report perplexity is recorded in the stats.
    """
    hp = hp or PretrainHP()
    if len(reports) < 50:
        raise TooFewSamples(f"LM pretraining needs >= 50 reports, got {len(reports)}")
    if prefix_hints is not None and len(prefix_hints) != len(reports):
        raise TooFewSamples(f"{len(prefix_hints)} prefix hints for {len(reports)} reports")
    prompt_ids = tokenizer.encode(prompt_text if prompt_text is not None else generation_prompt().text)

    def build_prefix(i: int) -> list[int]:
        hints = list(prefix_hints[i]) if prefix_hints is not None else []
        return (hints + [IMG_ID] * prefix_len)[:prefix_len]

    sequences = [build_prefix(i) + prompt_ids + tokenizer.encode(r) + [EOS_ID] for i, r in enumerate(reports)]
    too_long = max(len(s) for s in sequences)
    if too_long > hp.context:
        raise ContextOverflow(f"longest pretraining sequence ({too_long}) exceeds context {hp.context}")

    torch.manual_seed(hp.seed)
    model = CausalLM(
        LMConfig(
            vocab_size=tokenizer.vocab_size,
            d_model=hp.d_model,
            n_layers=hp.n_layers,
            n_heads=hp.n_heads,
            context=hp.context,
            mlp_ratio=hp.mlp_ratio,
        )
    )
    rng = np.random.default_rng(hp.seed)
    order = rng.permutation(len(sequences))
    n_val = max(1, int(round(len(sequences) * hp.val_fraction)))
    val_idx = set(order[:n_val].tolist())
    train_seqs = [sequences[i] for i in range(len(sequences)) if i not in val_idx]
    val_seqs = [sequences[i] for i in sorted(val_idx)]

    optimizer = torch.optim.Adam(model.parameters(), lr=hp.lr)
    first_batch: float | None = None
    history: list[float] = []
    for epoch in range(hp.epochs):
        model.train()
        gen = torch.Generator().manual_seed(hp.seed * 7919 + epoch)
        perm = torch.randperm(len(train_seqs), generator=gen).tolist()
        losses = []
        for start in range(0, len(perm), hp.batch_size):
            batch = [train_seqs[i] for i in perm[start : start + hp.batch_size]]
            ids, pad_mask = _pad_batch(batch)
            z = model.embed(ids)
            if prefix_len > 0 and hp.prefix_noise > 0:
                noise = torch.randn(len(batch), prefix_len, z.shape[-1], generator=gen) * hp.prefix_noise
                z = torch.cat([z[:, :prefix_len] + noise * z[:, :prefix_len].std(), z[:, prefix_len:]], dim=1)
            hidden, logits = model.forward_embeds(z, pad_mask)
            targets = ids[:, 1:].masked_fill(pad_mask[:, 1:] | ids[:, 1:].eq(IMG_ID), IGNORE_INDEX)
            if prefix_len > 0:  # prefix content is input, never a prediction target
                targets[:, : prefix_len - 1] = IGNORE_INDEX
            ce = F.cross_entropy(
                logits[:, :-1].reshape(-1, logits.shape[-1]), targets.reshape(-1), ignore_index=IGNORE_INDEX
            )
            align = align_loss(hidden, z, valid=(~pad_mask).float())
            loss = (ce + align) / 2.0
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            value = float(loss.detach())
            if first_batch is None:
                first_batch = value
            _check_divergence(value, first_batch)
            losses.append(value)
        history.append(float(np.mean(losses)))

    # held-out per-token CE over report positions only
    model.eval()
    total_ce = 0.0
    total_tokens = 0
    head = prefix_len + len(prompt_ids)
    with torch.no_grad():
        for seq in val_seqs:
            ids, pad_mask = _pad_batch([seq])
            _, logits = model.forward_embeds(model.embed(ids), pad_mask)
            report_targets = ids[0, head:]
            report_logits = logits[0, head - 1 : -1]
            ce = F.cross_entropy(report_logits, report_targets, reduction="sum")
            total_ce += float(ce)
            total_tokens += int(report_targets.numel())
    val_ce = total_ce / max(total_tokens, 1)
    stats = {
        "val_report_ce": val_ce,
        "val_perplexity": math.exp(val_ce),
        "train_history": history,
        "n_train": len(train_seqs),
        "n_val": len(val_seqs),
    }
    return FrozenLM(model, tokenizer, stats=stats).freeze()


def descriptor_hint_ids(ds, cfg: DatasetConfig, tokenizer: ReportTokenizer) -> list[int]:
    """Per-kind fixed-slot token ids of a sample's categorical descriptor values.

    Every categorical kind owns a stable slot (each margin subtype its own),
    with the image-slot placeholder filling absent entries; stable positions
    let the frozen LM learn a positional read-out circuit over the prefix.
    Every value is an atomic clinical-term token.
    """
    ids: list[int] = []
    for kind in cfg.active_tasks:
        if kind is DescriptorKind.SIZE:
            continue
        if kind is DescriptorKind.MARGIN_SUBTYPES:
            present = frozenset(ds.get(kind) or frozenset())
            for sub in cfg.vocabulary(kind).values:
                ids.extend(tokenizer.encode(sub) if sub in present else [IMG_ID])
            continue
        value = ds.get(kind)
        ids.extend(tokenizer.encode(str(value)) if value is not None else [IMG_ID])
    return ids


# ---------------------------------------------------------------------------
# Input assembly and the dual-level objective


class ProjectionHead(nn.Module):
    """Linear map from encoder token space into the LM embedding space."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.fc = nn.Linear(in_dim, out_dim)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.fc(tokens)


@dataclass
class LMSequence:
    """Assembled input embeddings with segment spans and supervision targets."""

    Z: torch.Tensor
    spans: dict[str, tuple[int, int]]
    target_ids: torch.Tensor
    H: torch.Tensor | None = None

    @property
    def length(self) -> int:
        return self.Z.shape[-2]


def assemble_input(
    vis_tokens: torch.Tensor,
    proj: ProjectionHead,
    prompt_ids: list[int],
    report_ids: list[int],
    lm: FrozenLM,
) -> LMSequence:
    """Z = [projected vision tokens ; prompt embeddings ; report embeddings].

    Supervision targets are the report ids shifted by one position; vision and
    prompt tokens are never supervision targets.
    """
    ev = proj(vis_tokens)
    device = ev.device
    ep = lm.embed(torch.tensor(prompt_ids, dtype=torch.long, device=device))
    er = lm.embed(torch.tensor(report_ids, dtype=torch.long, device=device)) if report_ids else ev.new_zeros((0, ev.shape[-1]))
    z = torch.cat([ev, ep, er], dim=0)
    length = z.shape[0]
    if length > lm.context:
        raise ContextOverflow(f"assembled length {length} exceeds context {lm.context}")
    p, lp = ev.shape[0], len(prompt_ids)
    spans = {"vision": (0, p), "prompt": (p, p + lp), "report": (p + lp, length)}
    targets = torch.full((length,), IGNORE_INDEX, dtype=torch.long, device=device)
    if report_ids:
        start = p + lp
        targets[start - 1 : length - 1] = torch.tensor(report_ids, dtype=torch.long, device=device)
    return LMSequence(Z=z, spans=spans, target_ids=targets)


def token_ce_loss(logits: torch.Tensor, targets: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    """Cross-entropy over supervised positions; ``sum`` keeps the unnormalized form."""
    if reduction not in ("mean", "sum"):
        raise ValueError(f"reduction must be mean or sum, got {reduction!r}")
    return F.cross_entropy(
        logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), ignore_index=IGNORE_INDEX, reduction=reduction
    )


def align_loss(H: torch.Tensor, Z: torch.Tensor, valid: torch.Tensor | None = None) -> torch.Tensor:
    """One minus the mean per-position cosine similarity between H and Z."""
    h = H.reshape(-1, H.shape[-1])
    z = Z.reshape(-1, Z.shape[-1])
    cos = (h * z).sum(-1) / ((h.norm(dim=-1) + ALIGN_EPS) * (z.norm(dim=-1) + ALIGN_EPS))
    if valid is not None:
        mask = valid.reshape(-1)
        return 1.0 - (cos * mask).sum() / mask.sum().clamp(min=1)
    return 1.0 - cos.mean()


@dataclass(frozen=True)
class LossWeights:
    """Combination rule for the token CE and alignment terms."""

    mode: str = "weighted_sum"
    lambda_ce: float = 0.5
    lambda_align: float = 0.5

    MODES = ("weighted_sum", "sum", "product", "mean", "max")

    def __post_init__(self) -> None:
        if self.mode not in self.MODES:
            raise ValueError(f"mode must be one of {self.MODES}, got {self.mode!r}")
        if self.lambda_ce < 0 or self.lambda_align < 0:
            raise ValueError("loss weights must be non-negative")

    def to_json(self) -> dict:
        return {"mode": self.mode, "lambda_ce": self.lambda_ce, "lambda_align": self.lambda_align}

    @classmethod
    def from_json(cls, doc: dict) -> "LossWeights":
        return cls(
            mode=doc.get("mode", "weighted_sum"),
            lambda_ce=float(doc.get("lambda_ce", 0.5)),
            lambda_align=float(doc.get("lambda_align", 0.5)),
        )


def combine_losses(ce, align, weights: LossWeights):
    """Combine the two loss terms per the configured mode."""
    mode = weights.mode
    if mode == "weighted_sum":
        return weights.lambda_ce * ce + weights.lambda_align * align
    if mode == "sum":
        return ce + align
    if mode == "product":
        return ce * align
    if mode == "mean":
        return (ce + align) / 2.0
    if isinstance(ce, torch.Tensor) or isinstance(align, torch.Tensor):
        return torch.maximum(torch.as_tensor(ce), torch.as_tensor(align))
    return max(ce, align)


# ---------------------------------------------------------------------------
# Stage-2 training and generation


@dataclass
class Stage2HP:
    epochs: int = 25
    batch_size: int = 8
    lr: float = 1e-4
    proj_lr: float | None = None  # fresh projection head may outpace the encoder
    seed: int = 0

    def to_json(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "proj_lr": self.proj_lr,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "Stage2HP":
        return cls(**{k: doc[k] for k in doc if k in cls.__dataclass_fields__})


@dataclass
class ReportModel:
    """Inference bundle: fine-tuned vision net + projection over a frozen LM."""

    net: DescriptorVisionNet
    proj: ProjectionHead
    lm: FrozenLM
    dataset_cfg: DatasetConfig
    size_max: float
    weights: LossWeights
    history: dict[str, list[float]] = field(default_factory=dict)

    def save(self, directory: str | Path) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        self.lm.tokenizer.save(directory / "tokenizer.json")
        self.lm.save(directory / "lm.ckpt")
        state = {f"net.{k}": v for k, v in self.net.state_dict().items()}
        state.update({f"proj.{k}": v for k, v in self.proj.state_dict().items()})
        header = {
            "kind": "stage2",
            "vision_cfg": self.net.vision_cfg.to_json(),
            "dataset_cfg": self.dataset_cfg.to_json(),
            "config_hash": self.dataset_cfg.config_hash(),
            "size_max": self.size_max,
            "weights": self.weights.to_json(),
            "history": self.history,
            "lm_hash": self.lm.parameter_hash(),
        }
        save_checkpoint(directory / "stage2.ckpt", header, state)
        return directory

    @classmethod
    def load(cls, directory: str | Path) -> "ReportModel":
        directory = Path(directory)
        tokenizer = ReportTokenizer.load(directory / "tokenizer.json")
        lm = FrozenLM.load(directory / "lm.ckpt", tokenizer)
        header, state = load_checkpoint(directory / "stage2.ckpt")
        vision_cfg = VisionConfig.from_json(header["vision_cfg"])
        dataset_cfg = DatasetConfig.from_json(header["dataset_cfg"])
        net = DescriptorVisionNet(vision_cfg, dataset_cfg)
        net.load_state_dict({k[4:]: v for k, v in state.items() if k.startswith("net.")})
        net.eval()
        proj = ProjectionHead(net.encoder.out_dim, lm.model.cfg.d_model)
        proj.load_state_dict({k[5:]: v for k, v in state.items() if k.startswith("proj.")})
        return cls(
            net=net,
            proj=proj,
            lm=lm,
            dataset_cfg=dataset_cfg,
            size_max=float(header["size_max"]),
            weights=LossWeights.from_json(header["weights"]),
            history={k: list(v) for k, v in header.get("history", {}).items()},
        )


def _batched_objective(
    net: DescriptorVisionNet,
    proj: ProjectionHead,
    lm: FrozenLM,
    images: torch.Tensor,
    prompt_ids: list[int],
    report_batches: list[list[int]],
    weights: LossWeights,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, float]:
    """Combined loss over one padded batch; also reports next-token accuracy."""
    device = images.device
    ev = proj(net(images))
    b, p, d = ev.shape
    lp = len(prompt_ids)
    report_ids, report_pad = _pad_batch(report_batches)
    report_ids = report_ids.to(device)
    lr = report_ids.shape[1]
    length = p + lp + lr
    if length > lm.context:
        raise ContextOverflow(f"assembled length {length} exceeds context {lm.context}")
    prompt = torch.tensor(prompt_ids, dtype=torch.long, device=device)
    ep = lm.embed(prompt)[None].expand(b, lp, d)
    er = lm.embed(report_ids)
    z = torch.cat([ev, ep, er], dim=1)
    pad_mask = torch.cat([torch.zeros(b, p + lp, dtype=torch.bool, device=device), report_pad.to(device)], dim=1)
    hidden, logits = lm.model.forward_embeds(z, pad_mask)

    # targets[i] is the token position i must predict (report span only)
    targets = torch.full((b, length), IGNORE_INDEX, dtype=torch.long, device=device)
    report_targets = report_ids.masked_fill(report_pad.to(device), IGNORE_INDEX)
    targets[:, p + lp - 1 : length - 1] = report_targets
    ce = token_ce_loss(logits, targets, reduction="mean")
    align = align_loss(hidden, z, valid=(~pad_mask).float())
    loss = combine_losses(ce, align, weights)

    with torch.no_grad():
        pred = logits.argmax(dim=-1)
        mask = targets != IGNORE_INDEX
        accuracy = float((pred[mask] == targets[mask]).float().mean()) if mask.any() else 0.0
    return loss, ce, align, accuracy


def train_stage2(
    samples: list[BusSample],
    vision_ckpt: VisionCheckpoint,
    lm: FrozenLM,
    hp: Stage2HP | None = None,
    weights: LossWeights | None = None,
    train_ids: list[str] | None = None,
    corpus_cfg: DatasetConfig | None = None,
) -> ReportModel:
    """Fine-tune the vision encoder + projection against the frozen LM.

    The LM parameter hash is asserted bit-identical before and after.
    """
    hp = hp or Stage2HP()
    weights = weights or LossWeights(mode="mean")
    if not lm.frozen:
        raise FrozenViolation("language model must be frozen before stage-2 training")
    if corpus_cfg is not None and corpus_cfg.config_hash() != vision_ckpt.dataset_cfg.config_hash():
        raise TaskMismatch(
            f"vision checkpoint was trained for {vision_ckpt.dataset_cfg.name!r}, corpus is {corpus_cfg.name!r}"
        )
    lm_hash_before = lm.parameter_hash()

    by_id = {s.id: s for s in samples}
    train = [by_id[i] for i in train_ids] if train_ids else list(samples)
    missing = [s.id for s in train if s.report is None]
    if missing:
        raise TooFewSamples(f"samples lack supervisory reports: {missing[:3]}")

    torch.manual_seed(hp.seed)
    net = DescriptorVisionNet(vision_ckpt.vision_cfg, vision_ckpt.dataset_cfg)
    net.load_state_dict(vision_ckpt.state)
    proj = ProjectionHead(net.encoder.out_dim, lm.model.cfg.d_model)

    prompt_ids = lm.tokenizer.encode(generation_prompt().text)
    report_ids = [lm.tokenizer.encode(s.report) + [EOS_ID] for s in train]
    images = samples_to_tensors(train)

    optimizer = torch.optim.Adam(
        [
            {"params": list(net.encoder.parameters()), "lr": hp.lr},
            {"params": list(proj.parameters()), "lr": hp.proj_lr if hp.proj_lr is not None else hp.lr},
        ]
    )
    history: dict[str, list[float]] = {"loss": [], "ce": [], "align": [], "accuracy": []}
    first_batch: float | None = None
    n = len(train)
    for epoch in range(hp.epochs):
        net.train()
        gen = torch.Generator().manual_seed(hp.seed * 65537 + epoch)
        order = torch.randperm(n, generator=gen).tolist()
        epoch_stats = []
        for start in range(0, n, hp.batch_size):
            idx = order[start : start + hp.batch_size]
            loss, ce, align, acc = _batched_objective(
                net, proj, lm, images[idx], prompt_ids, [report_ids[i] for i in idx], weights
            )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            value = float(loss.detach())
            if first_batch is None:
                first_batch = value
            _check_divergence(value, first_batch)
            epoch_stats.append((value, float(ce.detach()), float(align.detach()), acc))
        means = [float(np.mean([s[i] for s in epoch_stats])) for i in range(4)]
        for key, value in zip(("loss", "ce", "align", "accuracy"), means):
            history[key].append(value)

    if lm.parameter_hash() != lm_hash_before:
        raise FrozenViolation("frozen LM parameters changed during stage-2 training")
    net.eval()
    return ReportModel(
        net=net,
        proj=proj,
        lm=lm,
        dataset_cfg=vision_ckpt.dataset_cfg,
        size_max=vision_ckpt.size_max,
        weights=weights,
        history=history,
    )


def stage2_eval(model: ReportModel, samples: list[BusSample]) -> dict[str, float]:
    """Teacher-forced CE/align/accuracy of a trained report model on given samples."""
    prompt_ids = model.lm.tokenizer.encode(generation_prompt().text)
    report_ids = [model.lm.tokenizer.encode(s.report) + [EOS_ID] for s in samples]
    images = samples_to_tensors(samples)
    model.net.eval()
    with torch.no_grad():
        loss, ce, align, acc = _batched_objective(
            model.net, model.proj, model.lm, images, prompt_ids, report_ids, model.weights
        )
    return {"loss": float(loss), "ce": float(ce), "align": float(align), "accuracy": acc}


def generate_report(image: BusImage, model: ReportModel, max_new_tokens: int = MAX_GENERATION_TOKENS) -> ReportText:
    """Greedy decoding from the [vision ; instruction] prefix, with size insertion.

    The predicted tumor size is denormalized from the regression head and
    spliced into the text whenever the model was trained with a size task.
    """
    side = model.net.vision_cfg.image_size
    if image.shape != (side, side):
        image = pad_and_resize(image, side)
    tensor = torch.from_numpy(np.asarray(image.pixels, dtype=np.float32))[None, None]
    model.net.eval()
    with torch.no_grad():
        tokens = model.net(tensor)
        ev = model.proj(tokens)[0]
        prompt_ids = model.lm.tokenizer.encode(generation_prompt().text)
        ep = model.lm.embed(torch.tensor(prompt_ids, dtype=torch.long))
        z = torch.cat([ev, ep], dim=0)[None]
        generated: list[int] = []
        for _ in range(max_new_tokens):
            if z.shape[1] >= model.lm.context:
                break
            _, logits = model.lm.model.forward_embeds(z)
            next_id = int(logits[0, -1].argmax())
            if next_id == EOS_ID:
                break
            generated.append(next_id)
            z = torch.cat([z, model.lm.embed(torch.tensor([[next_id]]))], dim=1)
        text = model.lm.tokenizer.decode(generated)
        sentences = tuple(s.strip() for s in text.split(". "))
        sentences = tuple(s if s.endswith(".") else s + "." for s in sentences if s)
        report = ReportText(sentences=sentences) if sentences else ReportText(sentences=(text,))
        if model.dataset_cfg.is_active(DescriptorKind.SIZE):
            pred = model.net.predict_from_tokens(tokens)
            size_mm = max(float(pred.size_norm[0]) * model.size_max, 0.1)
            report = insert_size(report, round(size_mm, 1))
    return report
