from collections import Counter

import numpy as np
import pytest

from bustr.corpus import extract_radiomics
from bustr.errors import InconsistentDescriptors, TooFewSamples
from bustr.schema import DescriptorKind, DescriptorSet
from bustr.synth import (
    BREAST_SHAPE_W,
    BUSBRA_BIRADS_W,
    ECHO_BANDS,
    RenderConfig,
    birads_from_score,
    sample_corpus,
    suspicion_score,
    synthesize_sample,
)


def target(**kwargs):
    entries = {}
    for key, value in kwargs.items():
        kind = DescriptorKind(key)
        entries[kind] = frozenset(value) if kind is DescriptorKind.MARGIN_SUBTYPES else value
    return DescriptorSet(entries)


class TestSynthesizeSample:
    def test_anechoic_lesion_and_posterior_enhancement(self):
        sample = synthesize_sample(
            target(shape="oval", margin_main="circumscribed", echogenicity="anechoic", posterior="enhancement"),
            rng_seed=7,
        )
        feats = extract_radiomics(sample.image, sample.mask)
        assert feats.mean_intensity < 0.15
        rows, cols = np.nonzero(sample.mask.pixels)
        below = sample.image.pixels[rows.max() + 1 :, cols.min() : cols.max() + 1]
        background = sample.image.pixels[: max(rows.min() - 1, 1), :]
        assert below.mean() > background.mean()

    def test_determinism_bit_identical(self):
        spec = target(shape="round", margin_main="circumscribed", echogenicity="hypoechoic", posterior="none")
        a = synthesize_sample(spec, rng_seed=11)
        b = synthesize_sample(spec, rng_seed=11)
        assert np.array_equal(a.image.pixels, b.image.pixels)
        assert np.array_equal(a.mask.pixels, b.mask.pixels)

    def test_subtypes_with_circumscribed_margin_rejected(self):
        with pytest.raises(InconsistentDescriptors):
            synthesize_sample(
                target(margin_main="circumscribed", margin_subtypes=["spiculated"]),
                rng_seed=0,
            )

    def test_echo_bands_recovered(self):
        for echo, (lo, hi) in ECHO_BANDS.items():
            sample = synthesize_sample(
                target(shape="oval", margin_main="circumscribed", echogenicity=echo, posterior="none"),
                rng_seed=13,
            )
            feats = extract_radiomics(sample.image, sample.mask)
            assert lo <= feats.mean_intensity <= hi, f"{echo}: {feats.mean_intensity}"

    def test_shadowing_darkens_column(self):
        sample = synthesize_sample(
            target(shape="round", margin_main="circumscribed", echogenicity="hyperechoic", posterior="shadowing"),
            rng_seed=5,
        )
        rows, cols = np.nonzero(sample.mask.pixels)
        below = sample.image.pixels[rows.max() + 1 :, cols.min() : cols.max() + 1]
        assert below.mean() < 0.35

    def test_size_descriptor_matches_measured_diameter(self):
        sample = synthesize_sample(
            target(size=6.0, shape="round", margin_main="circumscribed", echogenicity="hypoechoic", posterior="none"),
            rng_seed=3,
        )
        feats = extract_radiomics(sample.image, sample.mask)
        assert sample.descriptors.get(DescriptorKind.SIZE) == pytest.approx(feats.equiv_diameter_mm, abs=0.051)


class TestBiradsRule:
    def test_score_counts_suspicious_findings(self):
        assert suspicion_score("oval", "circumscribed", "none", "anechoic") == 0
        assert suspicion_score("irregular", "non-circumscribed", "shadowing", "hypoechoic") == 4
        assert suspicion_score("irregular", "circumscribed", "enhancement", "heterogeneous") == 2

    def test_letter_mapping(self):
        assert birads_from_score(0, frozenset(), True) == "2"
        assert birads_from_score(1, frozenset(), True) == "3"
        assert birads_from_score(2, frozenset(), True) == "4A"
        assert birads_from_score(2, frozenset({"spiculated"}), True) == "4B"
        assert birads_from_score(3, frozenset(), True) == "4C"
        assert birads_from_score(4, frozenset(), True) == "5"

    def test_collapsed_mapping(self):
        assert [birads_from_score(s, frozenset(), False) for s in range(5)] == ["2", "3", "4", "4", "5"]


class TestSampleCorpus:
    def test_breast_shape_marginals_within_three_sigma(self, breast_cfg):
        n = 252
        samples = sample_corpus(breast_cfg, n, seed=2024)
        counts = Counter(s.descriptors.get(DescriptorKind.SHAPE) for s in samples)
        total = sum(BREAST_SHAPE_W.values())
        for shape, weight in BREAST_SHAPE_W.items():
            p = weight / total
            sigma = (n * p * (1 - p)) ** 0.5
            assert abs(counts[shape] - n * p) <= 3 * sigma, (shape, counts[shape])

    def test_birads_is_rule_function_of_visuals(self, breast_cfg):
        for sample in sample_corpus(breast_cfg, 40, seed=77):
            ds = sample.descriptors
            score = suspicion_score(
                ds.get(DescriptorKind.SHAPE),
                ds.get(DescriptorKind.MARGIN_MAIN),
                ds.get(DescriptorKind.POSTERIOR),
                ds.get(DescriptorKind.ECHOGENICITY),
            )
            expected = birads_from_score(score, ds.get(DescriptorKind.MARGIN_SUBTYPES) or frozenset(), True)
            assert ds.get(DescriptorKind.BIRADS) == expected

    def test_busbra_birads_marginals(self, busbra_cfg):
        n = 600
        samples = sample_corpus(busbra_cfg, n, seed=5)
        counts = Counter(s.descriptors.get(DescriptorKind.BIRADS) for s in samples)
        total = sum(BUSBRA_BIRADS_W.values())
        for birads, weight in BUSBRA_BIRADS_W.items():
            p = weight / total
            sigma = (n * p * (1 - p)) ** 0.5
            assert abs(counts[birads] - n * p) <= 3 * sigma

    def test_busbra_pathology_consistent_with_birads(self, busbra_cfg):
        for sample in sample_corpus(busbra_cfg, 60, seed=8):
            birads = sample.descriptors.get(DescriptorKind.BIRADS)
            pathology = sample.descriptors.get(DescriptorKind.PATHOLOGY)
            if birads in ("2", "3"):
                assert pathology == "benign"
            if birads == "5":
                assert pathology == "malignant"

    def test_busbra_has_no_masks(self, busbra_corpus):
        assert all(s.mask is None and s.radiomics is None for s in busbra_corpus)

    def test_determinism(self, busbra_cfg):
        a = sample_corpus(busbra_cfg, 10, seed=4)
        b = sample_corpus(busbra_cfg, 10, seed=4)
        for x, y in zip(a, b):
            assert x.descriptors == y.descriptors
            assert np.array_equal(x.image.pixels, y.image.pixels)

    def test_minimum_count(self, breast_cfg):
        with pytest.raises(TooFewSamples):
            sample_corpus(breast_cfg, 5, seed=0)

    def test_custom_render_side(self, breast_cfg):
        samples = sample_corpus(breast_cfg, 10, seed=1, render_cfg=RenderConfig(side=32))
        assert all(s.image.shape == (32, 32) for s in samples)
