"""Synthetic desk-scale BUS corpus: lesion rendering and descriptor sampling.

Rendered lesions encode their descriptors visually (shape via the boundary
outline, margin via boundary perturbations, echogenicity via the interior
intensity band, posterior features via the column band below the lesion) so a
vision model can recover them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .corpus import (
    DEFAULT_SPACING_MM,
    BusImage,
    BusSample,
    LesionMask,
    extract_radiomics,
    quantize8,
)
from .errors import InconsistentDescriptors, TooFewSamples
from .schema import DatasetConfig, DescriptorKind, DescriptorSet, validate_descriptors

BACKGROUND_LEVEL = 0.5
SPECKLE_STRENGTH = 0.15

# Interior intensity per echogenicity class; heterogeneous mixes the two
# levels of ECHO_MIX, complex cystic/solid splits into the two of ECHO_SPLIT.
ECHO_LEVELS = {
    "anechoic": 0.05,
    "hypoechoic": 0.25,
    "isoechoic": BACKGROUND_LEVEL,
    "hyperechoic": 0.8,
}
ECHO_MIX = (0.15, 0.7)
ECHO_SPLIT = (0.08, 0.75)

# Acceptance bands for the masked mean (speckle is mean-preserving; the
# indistinct blur pulls boundaries toward background).
ECHO_BANDS = {
    "anechoic": (0.0, 0.18),
    "hypoechoic": (0.15, 0.40),
    "isoechoic": (0.40, 0.60),
    "hyperechoic": (0.60, 0.95),
    "complex cystic/solid": (0.25, 0.60),
}

POSTERIOR_GAIN = {"enhancement": 1.45, "shadowing": 0.35}


@dataclass(frozen=True)
class RenderConfig:
    side: int = 64
    spacing_mm_per_px: float = DEFAULT_SPACING_MM
    background: float = BACKGROUND_LEVEL
    speckle: float = SPECKLE_STRENGTH

    @property
    def max_radius_px(self) -> float:
        # boundary modifiers multiply the base radius by up to ~1.6; keep the
        # worst case inside the frame
        return 0.27 * self.side


def _visual_fields(target: DescriptorSet, hints: DescriptorSet | None, rng: np.random.Generator):
    """Resolve the visual attributes driving the render, falling back to hints then to draws."""

    def pick(kind: DescriptorKind, default_draw):
        for source in (target, hints):
            if source is not None and kind in source:
                return source.get(kind)
        return default_draw()

    shape = pick(DescriptorKind.SHAPE, lambda: ("oval", "round", "irregular")[int(rng.integers(3))])
    margin = pick(DescriptorKind.MARGIN_MAIN, lambda: ("circumscribed", "non-circumscribed")[int(rng.integers(2))])
    subtypes = pick(DescriptorKind.MARGIN_SUBTYPES, lambda: frozenset())
    echo = pick(DescriptorKind.ECHOGENICITY, lambda: "hypoechoic")
    posterior = pick(DescriptorKind.POSTERIOR, lambda: "none")
    size_mm = pick(DescriptorKind.SIZE, lambda: float(rng.uniform(3.6, 7.0)))
    return shape, margin, frozenset(subtypes or frozenset()), echo, posterior, float(size_mm)


def _boundary_radius(theta: np.ndarray, base_r: float, shape: str, subtypes: frozenset[str], rng: np.random.Generator) -> np.ndarray:
    # shape controls the low-frequency outline; margin subtypes add local,
    # high-frequency signatures so the two stay visually separable
    if shape == "oval":
        # wider-than-tall, near-parallel orientation (the typical benign habit)
        a, b = base_r * 1.5, base_r / 1.5
        phi = rng.uniform(-0.35, 0.35)
        r = a * b / np.sqrt((b * np.cos(theta - phi)) ** 2 + (a * np.sin(theta - phi)) ** 2)
    elif shape == "round":
        r = np.full_like(theta, base_r)
    else:  # irregular: strong low-order radial harmonics
        r = np.full_like(theta, base_r)
        for k in (2, 3, 4):
            amp = rng.uniform(0.14, 0.24) * base_r
            r = r + amp * np.cos(k * theta + rng.uniform(0, 2 * math.pi))
    if "spiculated" in subtypes:
        phi = rng.uniform(0, 2 * math.pi)
        r = r + 0.45 * base_r * np.maximum(0.0, np.cos(10 * theta + phi)) ** 8
    if "microlobulated" in subtypes:
        phi = rng.uniform(0, 2 * math.pi)
        r = r + 0.10 * base_r * (0.5 + 0.5 * np.cos(14 * theta + phi))
    if "angular" in subtypes:
        theta0 = rng.uniform(0, 2 * math.pi)
        delta = np.angle(np.exp(1j * (theta - theta0)))
        r = r + 0.55 * base_r * np.maximum(0.0, 1.0 - np.abs(delta) / 0.5)
    return np.maximum(r, 2.0)


def _interior_levels(echo: str, side: int, rng: np.random.Generator) -> np.ndarray:
    if echo == "heterogeneous":
        coarse = rng.standard_normal((side // 6 + 2, side // 6 + 2))
        field = ndimage.zoom(coarse, side / coarse.shape[0], order=1)[:side, :side]
        lo, hi = ECHO_MIX
        return np.where(field > 0, hi, lo)
    if echo == "complex cystic/solid":
        lo, hi = ECHO_SPLIT
        cols = np.arange(side)[None, :].repeat(side, axis=0)
        if rng.integers(2) == 0:
            return np.where(cols < side // 2, lo, hi).astype(np.float64)
        rows = np.arange(side)[:, None].repeat(side, axis=1)
        return np.where(rows < side // 2, lo, hi).astype(np.float64)
    return np.full((side, side), ECHO_LEVELS[echo], dtype=np.float64)


def synthesize_sample(
    target: DescriptorSet,
    rng_seed: int,
    render_cfg: RenderConfig | None = None,
    render_hints: DescriptorSet | None = None,
    sample_id: str = "sample",
    keep_mask: bool = True,
) -> BusSample:
    """Render one sample whose image encodes the target (plus hint) descriptors.

    Deterministic given the seed. When the target carries a size entry it is
    replaced by the measured equivalent diameter of the rendered mask (rounded
    to 0.1 mm) so labels, radiomics, and report text agree exactly.
    """
    cfg = render_cfg or RenderConfig()
    subs = target.get(DescriptorKind.MARGIN_SUBTYPES)
    if subs and target.get(DescriptorKind.MARGIN_MAIN) != "non-circumscribed":
        raise InconsistentDescriptors(
            f"margin subtypes {sorted(subs)} require a non-circumscribed margin"
        )
    rng = np.random.default_rng(rng_seed)
    shape, margin, subtypes, echo, posterior, size_mm = _visual_fields(target, render_hints, rng)
    if subtypes and margin != "non-circumscribed":
        raise InconsistentDescriptors(f"margin subtypes {sorted(subtypes)} require a non-circumscribed margin")

    side = cfg.side
    base_r = min(size_mm / (2.0 * cfg.spacing_mm_per_px), cfg.max_radius_px)
    cy = side / 2 + rng.uniform(-0.03, 0.03) * side
    cx = side / 2 + rng.uniform(-0.03, 0.03) * side

    ys, xs = np.mgrid[0:side, 0:side]
    dy, dx = ys - cy, xs - cx
    rho = np.hypot(dy, dx)
    theta = np.arctan2(dy, dx)
    boundary = _boundary_radius(theta, base_r, shape, subtypes, rng)
    alpha = (rho <= boundary).astype(np.float64)
    if "indistinct" in subtypes:
        alpha = ndimage.gaussian_filter(alpha, sigma=3.0)
    mask = alpha > 0.5

    levels = _interior_levels(echo, side, rng)
    image = cfg.background * (1.0 - alpha) + levels * alpha

    if posterior != "none" and mask.any():
        rows, cols = np.nonzero(mask)
        r0, c0, c1 = rows.max() + 1, cols.min(), cols.max() + 1
        if r0 < side:
            if posterior == "combined features":
                mid = (c0 + c1) // 2
                image[r0:, c0:mid] *= POSTERIOR_GAIN["enhancement"]
                image[r0:, mid:c1] *= POSTERIOR_GAIN["shadowing"]
            else:
                image[r0:, c0:c1] *= POSTERIOR_GAIN[posterior]

    speckle = 1.0 + cfg.speckle * rng.standard_normal((side, side))
    image = quantize8(np.clip(image * speckle, 0.0, 1.0))

    bus_image = BusImage(image, spacing_mm_per_px=cfg.spacing_mm_per_px)
    lesion = LesionMask(mask)
    radiomics = extract_radiomics(bus_image, lesion)
    entries = dict(target.entries)
    if DescriptorKind.SIZE in entries:
        entries[DescriptorKind.SIZE] = round(radiomics.equiv_diameter_mm, 1)
    descriptors = DescriptorSet(entries, source=target.source)
    if keep_mask:
        return BusSample(id=sample_id, image=bus_image, descriptors=descriptors, mask=lesion, radiomics=radiomics)
    return BusSample(id=sample_id, image=bus_image, descriptors=descriptors)


# Table-driven category weights (case counts) used by the samplers.
BREAST_SHAPE_W = {"oval": 97, "round": 15, "irregular": 140}
BREAST_MARGIN_W = {"circumscribed": 115, "non-circumscribed": 137}
BREAST_SUBTYPE_RATES = {"angular": 42 / 137, "indistinct": 115 / 137, "microlobulated": 36 / 137, "spiculated": 33 / 137}
BREAST_ECHO_W = {
    "anechoic": 15,
    "hypoechoic": 148,
    "hyperechoic": 9,
    "isoechoic": 12,
    "heterogeneous": 57,
    "complex cystic/solid": 11,
}
BREAST_POSTERIOR_W = {"none": 159, "enhancement": 36, "shadowing": 50, "combined features": 7}

BUSBRA_BIRADS_W = {"2": 562, "3": 463, "4": 693, "5": 157}
# Bernoulli malignancy rate for collapsed category 4, chosen so expected
# totals reproduce the 1268 benign / 607 malignant split.
BUSBRA_P_MALIGNANT_4 = 450 / 693
BUSBRA_HISTOLOGY_BENIGN_W = {
    "fibroadenoma": 835,
    "cyst": 142,
    "fibrocystic changes": 106,
    "intraductal papilloma": 41,
    "sclerosing adenosis": 37,
    "hyperplasia": 31,
    "lipoma": 17,
    "phyllodes tumor": 13,
    "other": 46,
}
BUSBRA_HISTOLOGY_MALIGNANT_W = {"invasive ductal carcinoma": 520, "invasive lobular carcinoma": 42, "other": 45}

SUSPICIOUS_ECHO = ("hypoechoic", "heterogeneous")


def suspicion_score(shape: str, margin_main: str, posterior: str, echo: str) -> int:
    """Count of suspicious findings driving the synthetic BI-RADS label."""
    return (
        int(shape == "irregular")
        + int(margin_main == "non-circumscribed")
        + int(posterior == "shadowing")
        + int(echo in SUSPICIOUS_ECHO)
    )


def birads_from_score(score: int, subtypes: frozenset[str], letters: bool) -> str:
    if letters:
        if score == 2:
            return "4B" if "spiculated" in subtypes else "4A"
        return {0: "2", 1: "3", 3: "4C", 4: "5"}[score]
    return {0: "2", 1: "3", 2: "4", 3: "4", 4: "5"}[score]


def _weighted_choice(rng: np.random.Generator, weights: dict[str, float]) -> str:
    keys = list(weights)
    w = np.asarray([weights[k] for k in keys], dtype=np.float64)
    return keys[int(rng.choice(len(keys), p=w / w.sum()))]


def _draw_subtypes(rng: np.random.Generator) -> frozenset[str]:
    picked = {name for name, rate in BREAST_SUBTYPE_RATES.items() if rng.random() < rate}
    if not picked:
        picked = {_weighted_choice(rng, BREAST_SUBTYPE_RATES)}
    return frozenset(picked)


def _sample_breast_descriptors(rng: np.random.Generator) -> DescriptorSet:
    shape = _weighted_choice(rng, BREAST_SHAPE_W)
    margin = _weighted_choice(rng, BREAST_MARGIN_W)
    subtypes = _draw_subtypes(rng) if margin == "non-circumscribed" else frozenset()
    echo = _weighted_choice(rng, BREAST_ECHO_W)
    posterior = _weighted_choice(rng, BREAST_POSTERIOR_W)
    score = suspicion_score(shape, margin, posterior, echo)
    entries = {
        DescriptorKind.SIZE: round(float(rng.uniform(3.6, 7.0)), 1),
        DescriptorKind.BIRADS: birads_from_score(score, subtypes, letters=True),
        DescriptorKind.SHAPE: shape,
        DescriptorKind.MARGIN_MAIN: margin,
        DescriptorKind.POSTERIOR: posterior,
        DescriptorKind.ECHOGENICITY: echo,
    }
    if subtypes:
        entries[DescriptorKind.MARGIN_SUBTYPES] = subtypes
    return DescriptorSet(entries)


def _latents_for_score(score: int, rng: np.random.Generator) -> DescriptorSet:
    """Visual descriptors whose suspicion score equals the requested value."""
    factors = ["shape", "margin", "posterior", "echo"]
    on = set(rng.choice(4, size=score, replace=False).tolist()) if score else set()
    shape = "irregular" if factors.index("shape") in on else _weighted_choice(rng, {"oval": 97, "round": 15})
    margin = "non-circumscribed" if factors.index("margin") in on else "circumscribed"
    subtypes = _draw_subtypes(rng) if margin == "non-circumscribed" else frozenset()
    posterior = (
        "shadowing"
        if factors.index("posterior") in on
        else _weighted_choice(rng, {"none": 159, "enhancement": 36, "combined features": 7})
    )
    echo = (
        _weighted_choice(rng, {"hypoechoic": 148, "heterogeneous": 57})
        if factors.index("echo") in on
        else _weighted_choice(rng, {"anechoic": 15, "hyperechoic": 9, "isoechoic": 12, "complex cystic/solid": 11})
    )
    entries = {
        DescriptorKind.SHAPE: shape,
        DescriptorKind.MARGIN_MAIN: margin,
        DescriptorKind.POSTERIOR: posterior,
        DescriptorKind.ECHOGENICITY: echo,
        DescriptorKind.SIZE: round(float(rng.uniform(3.6, 7.0)), 1),
    }
    if subtypes:
        entries[DescriptorKind.MARGIN_SUBTYPES] = subtypes
    return DescriptorSet(entries)


def _sample_busbra_descriptors(rng: np.random.Generator) -> tuple[DescriptorSet, DescriptorSet]:
    birads = _weighted_choice(rng, BUSBRA_BIRADS_W)
    score = {"2": 0, "3": 1, "5": 4}.get(birads)
    if score is None:
        score = int(rng.choice([2, 3]))
    latents = _latents_for_score(score, rng)
    if birads in ("2", "3"):
        pathology = "benign"
    elif birads == "5":
        pathology = "malignant"
    else:
        pathology = "malignant" if rng.random() < BUSBRA_P_MALIGNANT_4 else "benign"
    histology_w = BUSBRA_HISTOLOGY_MALIGNANT_W if pathology == "malignant" else BUSBRA_HISTOLOGY_BENIGN_W
    target = DescriptorSet(
        {
            DescriptorKind.BIRADS: birads,
            DescriptorKind.PATHOLOGY: pathology,
            DescriptorKind.HISTOLOGY: _weighted_choice(rng, histology_w),
        }
    )
    return target, latents


def sample_corpus(
    cfg: DatasetConfig,
    n: int,
    seed: int = 0,
    render_cfg: RenderConfig | None = None,
) -> list[BusSample]:
    """Draw n samples whose descriptor marginals follow the dataset's case tables.

    BI-RADS is always the deterministic suspicion-rule function of the visual
    attributes; for the collapsed-category dataset the visual attributes are
    drawn conditionally on the tabulated BI-RADS frequencies.
    """
    if n < 10:
        raise TooFewSamples(f"need at least 10 samples, got {n}")
    render = render_cfg or RenderConfig()
    seeds = np.random.SeedSequence(seed).spawn(n)
    samples: list[BusSample] = []
    breast_like = cfg.is_active(DescriptorKind.SHAPE)
    for i, seq in enumerate(seeds):
        rng = np.random.default_rng(seq)
        sample_seed = int(rng.integers(0, 2**31 - 1))
        if breast_like:
            target = _sample_breast_descriptors(rng)
            hints = None
        else:
            target, hints = _sample_busbra_descriptors(rng)
        sample = synthesize_sample(
            target,
            rng_seed=sample_seed,
            render_cfg=render,
            render_hints=hints,
            sample_id=f"{cfg.name}-{i:05d}",
            keep_mask=cfg.has_masks,
        )
        sample.descriptors = validate_descriptors(sample.descriptors, cfg)
        samples.append(sample)
    return samples
