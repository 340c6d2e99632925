import json

import pytest
from hypothesis import given, strategies as st

from bustr.errors import InvalidConfig, OutOfVocabulary, UnknownDescriptor
from bustr.schema import (
    DatasetConfig,
    DescriptorKind,
    DescriptorSet,
    Vocabulary,
    active_tasks,
    load_config,
    normalize_value,
    random_descriptor_set,
    validate_descriptors,
)


def ds(**kwargs):
    entries = {}
    for key, value in kwargs.items():
        kind = DescriptorKind(key)
        entries[kind] = frozenset(value) if kind is DescriptorKind.MARGIN_SUBTYPES else value
    return DescriptorSet(entries)


class TestVocabularies:
    def test_breast_birads_categories(self, breast_cfg):
        assert breast_cfg.vocabulary(DescriptorKind.BIRADS).values == ("2", "3", "4A", "4B", "4C", "5")

    def test_busbra_birads_categories(self, busbra_cfg):
        assert busbra_cfg.vocabulary(DescriptorKind.BIRADS).values == ("2", "3", "4", "5")

    def test_histology_has_eleven_classes(self, busbra_cfg):
        assert len(busbra_cfg.vocabulary(DescriptorKind.HISTOLOGY)) == 11

    def test_duplicate_values_rejected(self):
        with pytest.raises(InvalidConfig):
            Vocabulary(DescriptorKind.SHAPE, ("oval", "oval"))

    def test_membership_uses_normalized_form(self, breast_cfg):
        vocab = breast_cfg.vocabulary(DescriptorKind.BIRADS)
        assert "4a" in vocab
        assert " 4A " in vocab
        assert "1" not in vocab


class TestNormalization:
    def test_lowercase_trim_collapse(self):
        assert normalize_value(DescriptorKind.ECHOGENICITY, "  Complex   Cystic/Solid ") == "complex cystic/solid"

    def test_birads_letter_suffix_uppercased(self):
        assert normalize_value(DescriptorKind.BIRADS, "4a") == "4A"

    @given(st.text(max_size=30))
    def test_idempotent(self, text):
        once = normalize_value(DescriptorKind.SHAPE, text)
        assert normalize_value(DescriptorKind.SHAPE, once) == once


class TestValidateDescriptors:
    def test_in_vocabulary_case_passes(self, breast_cfg):
        out = validate_descriptors(ds(birads="4A", shape="oval"), breast_cfg)
        assert out.get(DescriptorKind.BIRADS) == "4A"
        assert out.get(DescriptorKind.SHAPE) == "oval"

    def test_birads_one_is_out_of_vocabulary(self, breast_cfg):
        with pytest.raises(OutOfVocabulary, match="1"):
            validate_descriptors(ds(birads="1"), breast_cfg)

    def test_pathology_unknown_under_breast(self, breast_cfg):
        with pytest.raises(UnknownDescriptor, match="pathology"):
            validate_descriptors(ds(pathology="benign"), breast_cfg)

    def test_empty_set_rejected(self, breast_cfg):
        with pytest.raises(UnknownDescriptor):
            validate_descriptors(DescriptorSet({}), breast_cfg)

    def test_normalizes_case_and_whitespace(self, breast_cfg):
        out = validate_descriptors(ds(shape=" OVAL "), breast_cfg)
        assert out.get(DescriptorKind.SHAPE) == "oval"

    def test_idempotent(self, breast_cfg, rng):
        first = random_descriptor_set(breast_cfg, rng)
        second = validate_descriptors(first, breast_cfg)
        assert second.entries == validate_descriptors(second, breast_cfg).entries

    def test_bad_subtype_named_in_error(self, breast_cfg):
        bad = ds(margin_main="non-circumscribed", margin_subtypes=["jagged"])
        with pytest.raises(OutOfVocabulary, match="jagged"):
            validate_descriptors(bad, breast_cfg)

    def test_nonpositive_size_rejected(self, breast_cfg):
        with pytest.raises(OutOfVocabulary):
            validate_descriptors(ds(size=0.0), breast_cfg)


class TestActiveTasks:
    def test_breast_has_six_main_tasks(self, breast_cfg):
        tasks = active_tasks(breast_cfg)
        assert tasks == ("size", "birads", "shape", "margin", "posterior", "echogenicity")

    def test_busbra_tasks(self, busbra_cfg):
        assert active_tasks(busbra_cfg) == ("birads", "pathology", "histology")

    def test_empty_config_invalid(self):
        with pytest.raises(InvalidConfig):
            DatasetConfig(name="x", active_tasks=(), vocabularies={})

    def test_order_stable_across_loads(self):
        assert active_tasks(load_config("breast")) == active_tasks(load_config("breast"))


class TestConfigRoundTrip:
    def test_json_round_trip(self, breast_cfg, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(breast_cfg.to_json()))
        again = load_config(path)
        assert again.to_json() == breast_cfg.to_json()
        assert again.config_hash() == breast_cfg.config_hash()

    def test_unknown_name_rejected(self):
        with pytest.raises(InvalidConfig):
            load_config("no-such-dataset")


class TestDescriptorSet:
    def test_margin_consistency(self):
        good = ds(margin_main="non-circumscribed", margin_subtypes=["spiculated"])
        assert good.margin_consistent()
        bad = ds(margin_main="circumscribed", margin_subtypes=["spiculated"])
        assert not bad.margin_consistent()

    def test_source_excluded_from_equality(self):
        a = DescriptorSet({DescriptorKind.SHAPE: "oval"}, source="ground_truth")
        b = DescriptorSet({DescriptorKind.SHAPE: "oval"}, source="parsed")
        assert a == b

    def test_json_round_trip(self, breast_cfg, rng):
        original = random_descriptor_set(breast_cfg, rng)
        again = DescriptorSet.from_json(original.to_json())
        assert again == original
