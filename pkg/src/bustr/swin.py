"""Hierarchical windowed-attention vision encoder (patch embed, shifted windows, patch merging)."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import BadGeometry


@dataclass(frozen=True)
class VisionConfig:
    """Desk-scale encoder geometry. Two stages with one patch merge by default."""

    image_size: int = 64
    patch_size: int = 8
    window_size: int = 4
    embed_dim: int = 32
    depths: tuple[int, ...] = (2, 2)
    num_heads: int = 2
    mlp_ratio: float = 2.0

    @property
    def out_dim(self) -> int:
        return self.embed_dim * 2 ** (len(self.depths) - 1)

    @property
    def num_tokens(self) -> int:
        grid = self.image_size // self.patch_size
        return (grid // 2 ** (len(self.depths) - 1)) ** 2

    def to_json(self) -> dict:
        return {
            "image_size": self.image_size,
            "patch_size": self.patch_size,
            "window_size": self.window_size,
            "embed_dim": self.embed_dim,
            "depths": list(self.depths),
            "num_heads": self.num_heads,
            "mlp_ratio": self.mlp_ratio,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "VisionConfig":
        return cls(
            image_size=int(doc["image_size"]),
            patch_size=int(doc["patch_size"]),
            window_size=int(doc["window_size"]),
            embed_dim=int(doc["embed_dim"]),
            depths=tuple(int(d) for d in doc["depths"]),
            num_heads=int(doc["num_heads"]),
            mlp_ratio=float(doc["mlp_ratio"]),
        )


def window_partition(x: torch.Tensor, window: int) -> torch.Tensor:
    """(B, H, W, C) -> (B * num_windows, window*window, C)."""
    b, h, w, c = x.shape
    x = x.view(b, h // window, window, w // window, window, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, window * window, c)


def window_reverse(windows: torch.Tensor, window: int, h: int, w: int) -> torch.Tensor:
    """Inverse of window_partition back to (B, H, W, C)."""
    b = windows.shape[0] // ((h // window) * (w // window))
    x = windows.view(b, h // window, w // window, window, window, -1)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(b, h, w, -1)


class WindowAttention(nn.Module):
    """Multi-head self-attention within square windows, with relative position bias."""

    def __init__(self, dim: int, num_heads: int, window: int):
        super().__init__()
        self.dim = dim
        self.num_heads = num_heads
        self.window = window
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        self.relative_position_bias_table = nn.Parameter(torch.zeros((2 * window - 1) ** 2, num_heads))
        nn.init.trunc_normal_(self.relative_position_bias_table, std=0.02)

        coords = torch.stack(torch.meshgrid(torch.arange(window), torch.arange(window), indexing="ij"))
        flat = coords.flatten(1)
        relative = flat[:, :, None] - flat[:, None, :]
        relative = relative.permute(1, 2, 0)
        relative[:, :, 0] += window - 1
        relative[:, :, 1] += window - 1
        relative[:, :, 0] *= 2 * window - 1
        self.register_buffer("relative_position_index", relative.sum(-1), persistent=False)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        bw, n, c = x.shape
        qkv = self.qkv(x).reshape(bw, n, 3, self.num_heads, c // self.num_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q * self.scale) @ k.transpose(-2, -1)
        bias = self.relative_position_bias_table[self.relative_position_index.reshape(-1)]
        bias = bias.reshape(n, n, -1).permute(2, 0, 1)
        attn = attn + bias.unsqueeze(0)
        if mask is not None:
            nw = mask.shape[0]
            attn = attn.view(bw // nw, nw, self.num_heads, n, n) + mask.unsqueeze(1).unsqueeze(0)
            attn = attn.view(-1, self.num_heads, n, n)
        attn = attn.softmax(dim=-1)
        x = (attn @ v).transpose(1, 2).reshape(bw, n, c)
        return self.proj(x)


class SwinBlock(nn.Module):
    """Pre-norm transformer block with (optionally shifted) window attention."""

    def __init__(self, dim: int, resolution: tuple[int, int], num_heads: int, window: int, shift: int, mlp_ratio: float):
        super().__init__()
        self.resolution = resolution
        # windows never exceed the feature map; shifting is pointless then
        if min(resolution) <= window:
            window = min(resolution)
            shift = 0
        self.window = window
        self.shift = shift
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, num_heads, window)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

        h, w = resolution
        pad_h = (self.window - h % self.window) % self.window
        pad_w = (self.window - w % self.window) % self.window
        self.padded = (h + pad_h, w + pad_w)
        if self.shift > 0:
            self.register_buffer("attn_mask", self._build_mask(*self.padded), persistent=False)
        else:
            self.attn_mask = None

    def _build_mask(self, h: int, w: int) -> torch.Tensor:
        img_mask = torch.zeros(1, h, w, 1)
        slices = (slice(0, -self.window), slice(-self.window, -self.shift), slice(-self.shift, None))
        region = 0
        for hs in slices:
            for ws in slices:
                img_mask[:, hs, ws, :] = region
                region += 1
        windows = window_partition(img_mask, self.window).squeeze(-1)
        diff = windows.unsqueeze(1) - windows.unsqueeze(2)
        return diff.masked_fill(diff != 0, -100.0).masked_fill(diff == 0, 0.0)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = self.resolution
        b, length, c = x.shape
        shortcut = x
        x = self.norm1(x).view(b, h, w, c)
        ph, pw = self.padded
        if (ph, pw) != (h, w):
            x = F.pad(x, (0, 0, 0, pw - w, 0, ph - h))
        if self.shift > 0:
            x = torch.roll(x, shifts=(-self.shift, -self.shift), dims=(1, 2))
        windows = window_partition(x, self.window)
        mask = self.attn_mask.to(x.dtype) if self.attn_mask is not None else None
        windows = self.attn(windows, mask)
        x = window_reverse(windows, self.window, ph, pw)
        if self.shift > 0:
            x = torch.roll(x, shifts=(self.shift, self.shift), dims=(1, 2))
        x = x[:, :h, :w, :].reshape(b, length, c)
        x = shortcut + x
        return x + self.mlp(self.norm2(x))


class PatchMerging(nn.Module):
    """2x2 neighbourhood concatenation followed by a linear reduction to 2C."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(4 * dim)
        self.reduction = nn.Linear(4 * dim, 2 * dim, bias=False)

    def forward(self, x: torch.Tensor, resolution: tuple[int, int]) -> torch.Tensor:
        h, w = resolution
        b, length, c = x.shape
        x = x.view(b, h, w, c)
        parts = [x[:, 0::2, 0::2, :], x[:, 1::2, 0::2, :], x[:, 0::2, 1::2, :], x[:, 1::2, 1::2, :]]
        x = torch.cat(parts, dim=-1).view(b, (h // 2) * (w // 2), 4 * c)
        return self.reduction(self.norm(x))


class SwinEncoder(nn.Module):
    """Patch embedding -> windowed-attention stages with one merge per stage boundary."""

    def __init__(self, cfg: VisionConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = nn.Conv2d(1, cfg.embed_dim, kernel_size=cfg.patch_size, stride=cfg.patch_size)
        self.embed_norm = nn.LayerNorm(cfg.embed_dim)
        grid = cfg.image_size // cfg.patch_size
        self.stages = nn.ModuleList()
        self.merges = nn.ModuleList()
        dim = cfg.embed_dim
        resolution = (grid, grid)
        for stage_idx, depth in enumerate(cfg.depths):
            blocks = nn.ModuleList(
                SwinBlock(
                    dim,
                    resolution,
                    cfg.num_heads,
                    cfg.window_size,
                    shift=0 if i % 2 == 0 else cfg.window_size // 2,
                    mlp_ratio=cfg.mlp_ratio,
                )
                for i in range(depth)
            )
            self.stages.append(blocks)
            if stage_idx < len(cfg.depths) - 1:
                self.merges.append(PatchMerging(dim))
                dim *= 2
                resolution = (resolution[0] // 2, resolution[1] // 2)
        self.norm = nn.LayerNorm(dim)
        self.out_dim = dim

    def check_geometry(self, side_h: int, side_w: int) -> None:
        cfg = self.cfg
        if side_h != side_w:
            raise BadGeometry(f"image must be square, got {side_h}x{side_w}")
        if side_h != cfg.image_size:
            raise BadGeometry(f"encoder expects side {cfg.image_size}, got {side_h}")
        if side_h % cfg.patch_size != 0 or side_h % cfg.window_size != 0:
            raise BadGeometry(
                f"side {side_h} must be divisible by patch {cfg.patch_size} and window {cfg.window_size}"
            )

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """(B, 1, S, S) -> (B, P, out_dim)."""
        self.check_geometry(images.shape[-2], images.shape[-1])
        x = self.patch_embed(images).flatten(2).transpose(1, 2)
        x = self.embed_norm(x)
        grid = self.cfg.image_size // self.cfg.patch_size
        resolution = (grid, grid)
        for stage_idx, blocks in enumerate(self.stages):
            for block in blocks:
                x = block(x)
            if stage_idx < len(self.merges):
                x = self.merges[stage_idx](x, resolution)
                resolution = (resolution[0] // 2, resolution[1] // 2)
        return self.norm(x)
