import json
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bustr.corpus import RadiomicsFeatures
from bustr.errors import NonPositiveSize, RealizerFailure
from bustr.metrics import parse_report, scan_descriptor_terms
from bustr.reporting import (
    ExternalLLMRealizer,
    PROMPT_HEADER,
    ReportText,
    TemplateRealizer,
    format_prompt,
    generation_prompt,
    insert_size,
    realize_report,
    supervisory_report,
)
from bustr.schema import DescriptorKind, DescriptorSet, random_descriptor_set, validate_descriptors


def ds(**kwargs):
    entries = {}
    for key, value in kwargs.items():
        kind = DescriptorKind(key)
        entries[kind] = frozenset(value) if kind is DescriptorKind.MARGIN_SUBTYPES else value
    return DescriptorSet(entries)


class TestFormatPrompt:
    def test_single_field_clause(self, breast_cfg):
        prompt = format_prompt(validate_descriptors(ds(shape="oval"), breast_cfg))
        assert "shape: oval" in prompt.text
        assert prompt.provenance == ((DescriptorKind.SHAPE, "oval"),)

    def test_full_set_has_six_clauses_with_size(self, breast_cfg, breast_corpus):
        sample = breast_corpus[0]
        prompt = format_prompt(sample.descriptors, sample.radiomics)
        clauses = prompt.text.split(": ", 1)[1]
        assert prompt.text.count(";") >= 4  # six clauses, five separators
        assert "size:" in prompt.text and "mm" in prompt.text
        kinds = [k for k, _ in prompt.provenance]
        assert kinds.index(DescriptorKind.SIZE) == 0
        assert kinds.index(DescriptorKind.SHAPE) < kinds.index(DescriptorKind.BIRADS)

    def test_empty_set_gives_header_only(self):
        prompt = format_prompt(DescriptorSet({}))
        assert prompt.text == PROMPT_HEADER
        assert prompt.provenance == ()

    def test_every_value_appears_verbatim(self, breast_cfg, rng):
        for _ in range(20):
            sample = random_descriptor_set(breast_cfg, rng, full=False)
            prompt = format_prompt(sample)
            for _, value in prompt.provenance:
                assert value in prompt.text

    def test_radiomics_size_used_when_descriptor_absent(self):
        feats = RadiomicsFeatures(100, 9.0, 5.0, 5.0, 0.4, 0.1)
        prompt = format_prompt(ds(shape="oval"), feats)
        assert "size: 9.0 mm" in prompt.text

    def test_injective_on_distinct_sets(self, breast_cfg, rng):
        seen = {}
        for _ in range(50):
            sample = random_descriptor_set(breast_cfg, rng, full=False)
            text = format_prompt(sample).text
            if text in seen:
                assert seen[text].entries == sample.entries
            seen[text] = sample


class TestTemplateRealizer:
    def test_shape_margin_sentence(self, breast_cfg):
        prompt = format_prompt(validate_descriptors(ds(shape="oval", margin_main="circumscribed"), breast_cfg))
        report = realize_report(prompt)
        assert report.full_text == "The mass is oval with circumscribed margins."

    def test_birads_token_appears_exactly_once(self, breast_cfg):
        prompt = format_prompt(validate_descriptors(ds(birads="4A"), breast_cfg))
        report = realize_report(prompt)
        assert report.full_text.count("BI-RADS 4A") == 1

    def test_deterministic(self, breast_corpus):
        sample = breast_corpus[0]
        one = supervisory_report(sample.descriptors, sample.radiomics, sample.id)[1]
        two = supervisory_report(sample.descriptors, sample.radiomics, sample.id)[1]
        assert one == two

    def test_variant_key_changes_surface_not_facts(self, breast_cfg):
        base = validate_descriptors(ds(shape="oval", margin_main="circumscribed", birads="3"), breast_cfg)
        texts = {realize_report(format_prompt(base, variant_key=f"s{i}")).full_text for i in range(12)}
        assert len(texts) > 1
        for text in texts:
            parsed = parse_report(text, breast_cfg)
            assert parsed.get(DescriptorKind.SHAPE) == "oval"

    def test_fact_closure_no_unprovenanced_terms(self, breast_cfg, rng):
        for _ in range(25):
            sample = random_descriptor_set(breast_cfg, rng, full=False)
            prompt = format_prompt(sample, variant_key="k")
            report = realize_report(prompt)
            mentioned = scan_descriptor_terms(report.full_text, breast_cfg)
            allowed = {(k, v) for k, v in prompt.provenance if k is not DescriptorKind.SIZE}
            assert mentioned <= allowed


class TestRoundTrip:
    def test_parse_inverts_realize_breast(self, breast_cfg, rng):
        for i in range(40):
            sample = random_descriptor_set(breast_cfg, rng, full=(i % 2 == 0))
            prompt, report = supervisory_report(sample, None, sample_id=f"s{i}")
            parsed = parse_report(report.full_text, breast_cfg)
            assert parsed == sample

    def test_parse_inverts_realize_busbra(self, busbra_cfg, rng):
        for i in range(40):
            sample = random_descriptor_set(busbra_cfg, rng, full=(i % 3 != 0))
            prompt, report = supervisory_report(sample, None, sample_id=f"b{i}")
            assert parse_report(report.full_text, busbra_cfg) == sample

    def test_corpus_wide_round_trip(self, breast_corpus, breast_cfg):
        for sample in breast_corpus:
            parsed = parse_report(sample.report, breast_cfg)
            assert parsed == sample.descriptors


class TestInsertSize:
    def test_replaces_existing_size(self):
        report = ReportText(("The lesion measures 4.0 mm in largest diameter.", "Assessment: BI-RADS 3."))
        out = insert_size(report, 12.34)
        assert "12.3 mm" in out.full_text
        assert "4.0 mm" not in out.full_text

    def test_creates_size_sentence_when_absent(self):
        report = ReportText(("Assessment: BI-RADS 3.",))
        out = insert_size(report, 5.0)
        assert "5.0 mm" in out.sentences[0]

    def test_idempotent_for_equal_size(self):
        report = ReportText(("Assessment: BI-RADS 3.",))
        once = insert_size(report, 7.77)
        twice = insert_size(once, 7.77)
        assert once == twice

    def test_zero_size_rejected(self):
        with pytest.raises(NonPositiveSize):
            insert_size(ReportText(("x.",)), 0.0)


class TestExternalRealizer:
    def test_subprocess_adapter(self):
        script = (
            "import sys, json\n"
            "req = json.loads(sys.stdin.readline())\n"
            "print(json.dumps({'report': 'The mass is oval in shape.'}))\n"
        )
        realizer = ExternalLLMRealizer([sys.executable, "-c", script])
        report = realizer.realize(generation_prompt())
        assert report.full_text == "The mass is oval in shape."

    def test_bad_output_raises(self):
        realizer = ExternalLLMRealizer([sys.executable, "-c", "print('not json')"])
        with pytest.raises(RealizerFailure):
            realizer.realize(generation_prompt())
