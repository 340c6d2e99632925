import math

import numpy as np
import pytest

from bustr.corpus import (
    BusImage,
    LesionMask,
    birads_labels,
    extract_radiomics,
    load_corpus,
    load_fold_plan,
    make_folds,
    manifest_digest,
    pad_and_resize,
    save_corpus,
    save_fold_plan,
)
from bustr.errors import EmptyMask, MissingFile, SchemaMismatch, ShapeMismatch, TooFewSamples
from bustr.schema import DescriptorKind


def square_mask(side=16, lo=6, hi=10):
    mask = np.zeros((side, side), dtype=bool)
    mask[lo:hi, lo:hi] = True
    return LesionMask(mask)


class TestExtractRadiomics:
    def test_filled_square_statistics(self):
        image = BusImage(np.full((16, 16), 0.5), spacing_mm_per_px=1.0)
        feats = extract_radiomics(image, square_mask())
        assert feats.area_px == 16
        assert feats.mean_intensity == pytest.approx(0.5)
        assert feats.std_intensity == pytest.approx(0.0)
        assert feats.bbox_w_mm == pytest.approx(4.0)
        assert feats.bbox_h_mm == pytest.approx(4.0)

    def test_equiv_diameter_closed_form(self):
        image = BusImage(np.full((16, 16), 0.5), spacing_mm_per_px=1.0)
        feats = extract_radiomics(image, square_mask())
        assert feats.equiv_diameter_mm == pytest.approx(2.0 * math.sqrt(16 / math.pi), abs=1e-9)

    def test_empty_mask_raises(self):
        image = BusImage(np.full((16, 16), 0.5))
        with pytest.raises(EmptyMask):
            extract_radiomics(image, LesionMask(np.zeros((16, 16), dtype=bool)))

    def test_shape_mismatch_raises(self):
        image = BusImage(np.full((16, 16), 0.5))
        with pytest.raises(ShapeMismatch):
            extract_radiomics(image, LesionMask(np.ones((18, 18), dtype=bool)))

    def test_statistics_match_numpy_on_random_instances(self, rng):
        for _ in range(10):
            pixels = rng.random((20, 20))
            mask = rng.random((20, 20)) > 0.6
            if not mask.any():
                continue
            feats = extract_radiomics(BusImage(pixels), LesionMask(mask))
            assert feats.mean_intensity == pytest.approx(pixels[mask].mean())
            assert feats.std_intensity == pytest.approx(pixels[mask].std())
            assert feats.area_px == int(mask.sum())


class TestPadAndResize:
    def test_rectangular_input_becomes_square_target(self):
        image = BusImage(np.random.default_rng(0).random((100, 50)))
        out = pad_and_resize(image, 224)
        assert out.shape == (224, 224)

    def test_square_input_only_resizes(self):
        pixels = np.linspace(0, 1, 64 * 64).reshape(64, 64)
        out = pad_and_resize(BusImage(pixels), 32)
        assert out.shape == (32, 32)

    def test_constant_image_stays_constant(self):
        out = pad_and_resize(BusImage(np.full((48, 48), 0.7)), 64)
        assert np.allclose(out.pixels, 0.7, atol=1e-12)

    def test_output_always_square(self, rng):
        for h, w, target in ((30, 90, 64), (128, 16, 32), (17, 17, 224)):
            out = pad_and_resize(BusImage(rng.random((h, w))), target)
            assert out.shape == (target, target)

    def test_spacing_scales_with_resize(self):
        image = BusImage(np.full((100, 50), 0.5), spacing_mm_per_px=0.2)
        out = pad_and_resize(image, 224)
        assert out.spacing_mm_per_px == pytest.approx(0.2 * 100 / 224)


class TestMakeFolds:
    def test_partition_arithmetic(self):
        ids = [f"s{i}" for i in range(100)]
        labels = [str(i % 4) for i in range(100)]
        plan = make_folds(ids, labels, k=5, seed=3)
        tests = [set(plan.test_ids(f)) for f in range(5)]
        assert all(len(t) == 20 for t in tests)
        assert set().union(*tests) == set(ids)
        for i in range(5):
            for j in range(i + 1, 5):
                assert not tests[i] & tests[j]

    def test_train_val_split_80_20(self):
        ids = [f"s{i}" for i in range(100)]
        labels = [str(i % 4) for i in range(100)]
        plan = make_folds(ids, labels, k=5, seed=3)
        for fold in range(5):
            assert len(plan.train_ids[fold]) == 64
            assert len(plan.val_ids[fold]) == 16
            overlap = set(plan.train_ids[fold]) | set(plan.val_ids[fold])
            assert not overlap & set(plan.test_ids(fold))

    def test_stratification_within_one_of_share(self):
        ids = [f"s{i}" for i in range(100)]
        labels = [str(i % 4) for i in range(100)]
        plan = make_folds(ids, labels, k=5, seed=3)
        label_of = dict(zip(ids, labels))
        for fold in range(5):
            counts = {}
            for sid in plan.test_ids(fold):
                counts[label_of[sid]] = counts.get(label_of[sid], 0) + 1
            for label in set(labels):
                share = labels.count(label) / 5
                assert abs(counts.get(label, 0) - share) <= 1

    def test_deterministic_given_seed(self):
        ids = [f"s{i}" for i in range(60)]
        labels = [str(i % 3) for i in range(60)]
        a = make_folds(ids, labels, k=5, seed=9)
        b = make_folds(ids, labels, k=5, seed=9)
        assert a.assignments == b.assignments
        assert a.train_ids == b.train_ids and a.val_ids == b.val_ids

    def test_too_few_samples(self):
        with pytest.raises(TooFewSamples):
            make_folds(["a", "b"], ["x", "y"], k=5)


class TestCorpusRoundTrip:
    def test_save_load_descriptor_equality(self, breast_corpus, tmp_path, breast_cfg):
        save_corpus(breast_corpus, tmp_path, breast_cfg)
        again = load_corpus(tmp_path)
        assert len(again) == len(breast_corpus)
        for a, b in zip(sorted(again, key=lambda s: s.id), sorted(breast_corpus, key=lambda s: s.id)):
            assert a.descriptors == b.descriptors
            assert a.report == b.report
            assert np.array_equal(a.image.pixels, b.image.pixels)
            assert np.array_equal(a.mask.pixels, b.mask.pixels)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(MissingFile):
            load_corpus(tmp_path)

    def test_manifest_referencing_absent_image(self, breast_corpus, tmp_path, breast_cfg):
        save_corpus(breast_corpus[:3], tmp_path, breast_cfg)
        (tmp_path / "images" / f"{breast_corpus[0].id}.png").unlink()
        with pytest.raises(SchemaMismatch):
            load_corpus(tmp_path)

    def test_manifest_digest_stable(self, breast_corpus, tmp_path, breast_cfg):
        save_corpus(breast_corpus[:5], tmp_path / "a", breast_cfg)
        save_corpus(breast_corpus[:5], tmp_path / "b", breast_cfg)
        assert manifest_digest(tmp_path / "a") == manifest_digest(tmp_path / "b")

    def test_fold_plan_round_trip(self, breast_corpus, tmp_path):
        plan = make_folds([s.id for s in breast_corpus], birads_labels(breast_corpus), k=5, seed=1)
        save_fold_plan(plan, tmp_path)
        again = load_fold_plan(tmp_path)
        assert again.assignments == plan.assignments
        assert again.train_ids == plan.train_ids
