"""Prompt formatting, deterministic template realization, and size insertion.

The template realizer implements the report-writer contract used for
supervision: it is deterministic and fact-closed, emitting only the
descriptor values carried in the prompt's provenance. An external LLM can be
plugged in through :class:`ExternalLLMRealizer` but is untrusted for
fact-closure.
"""

from __future__ import annotations

import json
import re
import subprocess
from dataclasses import dataclass, field
from importlib import resources
from typing import Protocol

from .corpus import RadiomicsFeatures, hash_str
from .errors import NonPositiveSize, RealizerFailure
from .schema import DescriptorKind, DescriptorSet

PROMPT_HEADER = "Breast ultrasound lesion findings:"

# Fixed clause order; absent fields are omitted silently.
PROMPT_FIELD_ORDER = (
    DescriptorKind.SIZE,
    DescriptorKind.SHAPE,
    DescriptorKind.MARGIN_MAIN,
    DescriptorKind.ECHOGENICITY,
    DescriptorKind.POSTERIOR,
    DescriptorKind.BIRADS,
    DescriptorKind.PATHOLOGY,
    DescriptorKind.HISTOLOGY,
)

_FIELD_LABEL = {
    DescriptorKind.SIZE: "size",
    DescriptorKind.SHAPE: "shape",
    DescriptorKind.MARGIN_MAIN: "margin",
    DescriptorKind.ECHOGENICITY: "echogenicity",
    DescriptorKind.POSTERIOR: "posterior",
    DescriptorKind.BIRADS: "BI-RADS",
    DescriptorKind.PATHOLOGY: "pathology",
    DescriptorKind.HISTOLOGY: "histology",
}

SIZE_PATTERN = re.compile(r"(\d+(?:\.\d+)?)\s*mm")


@dataclass(frozen=True)
class PromptText:
    """Instruction-style prompt plus the descriptor values embedded in it."""

    text: str
    provenance: tuple[tuple[DescriptorKind, str], ...] = ()
    variant_key: str = field(default="", compare=False)


@dataclass(frozen=True)
class ReportText:
    """Ordered sentences of a narrative report."""

    sentences: tuple[str, ...]

    @property
    def full_text(self) -> str:
        return " ".join(self.sentences)


def format_size(size_mm: float) -> str:
    return f"{float(size_mm):.1f}"


def _subtype_list(values: frozenset[str]) -> str:
    return ", ".join(sorted(values))


def format_prompt(
    ds: DescriptorSet,
    radiomics: RadiomicsFeatures | None = None,
    variant_key: str = "",
) -> PromptText:
    """Build the instruction prompt from a validated descriptor set (plus radiomics size)."""
    clauses: list[str] = []
    provenance: list[tuple[DescriptorKind, str]] = []
    for kind in PROMPT_FIELD_ORDER:
        if kind is DescriptorKind.SIZE:
            if kind in ds:
                size = format_size(float(ds.get(kind)))
            elif radiomics is not None:
                size = format_size(radiomics.equiv_diameter_mm)
            else:
                continue
            clauses.append(f"size: {size} mm")
            provenance.append((kind, size))
            continue
        if kind not in ds:
            continue
        value = ds.get(kind)
        if kind is DescriptorKind.MARGIN_MAIN:
            clause = f"margin: {value}"
            provenance.append((kind, str(value)))
            subtypes = ds.get(DescriptorKind.MARGIN_SUBTYPES)
            if subtypes:
                clause += f" ({_subtype_list(subtypes)})"
                provenance.extend((DescriptorKind.MARGIN_SUBTYPES, s) for s in sorted(subtypes))
            clauses.append(clause)
            continue
        clauses.append(f"{_FIELD_LABEL[kind]}: {value}")
        provenance.append((kind, str(value)))
    text = PROMPT_HEADER if not clauses else PROMPT_HEADER + " " + "; ".join(clauses) + "."
    return PromptText(text=text, provenance=tuple(provenance), variant_key=variant_key)


def generation_prompt() -> PromptText:
    """The descriptor-free instruction used as the decoding prefix at inference."""
    return PROMPT_HEADER_PROMPT


PROMPT_HEADER_PROMPT = PromptText(text=PROMPT_HEADER, provenance=())


class ReportRealizer(Protocol):
    def realize(self, prompt: PromptText) -> ReportText: ...


def _load_templates() -> dict[str, list[str]]:
    ref = resources.files("bustr.data").joinpath("templates.json")
    return json.loads(ref.read_text(encoding="utf-8"))


class TemplateRealizer:
    """Deterministic, fact-closed realizer over a fixed sentence bank.

    Each slot has two surface variants; the variant is chosen by a stable
    hash of the prompt's variant key so reports vary lexically across
    samples while staying exactly parseable.
    """

    def __init__(self, templates: dict[str, list[str]] | None = None):
        self.templates = templates or _load_templates()

    def _variant(self, slot: str, key: str) -> str:
        bank = self.templates[slot]
        return bank[hash_str(f"{key}|{slot}") % len(bank)]

    def realize(self, prompt: PromptText) -> ReportText:
        values: dict[DescriptorKind, str] = {}
        subtypes: list[str] = []
        for kind, value in prompt.provenance:
            if kind is DescriptorKind.MARGIN_SUBTYPES:
                subtypes.append(value)
            else:
                values.setdefault(kind, value)
        key = prompt.variant_key
        sentences: list[str] = []
        if DescriptorKind.SIZE in values:
            sentences.append(self._variant("size", key).format(value=values[DescriptorKind.SIZE]))
        sub_text = f" ({', '.join(subtypes)})" if subtypes else ""
        shape = values.get(DescriptorKind.SHAPE)
        margin = values.get(DescriptorKind.MARGIN_MAIN)
        if shape is not None and margin is not None:
            sentences.append(self._variant("shape_margin", key).format(shape=shape, margin=margin, subtypes=sub_text))
        elif shape is not None:
            sentences.append(self._variant("shape", key).format(value=shape))
        elif margin is not None:
            sentences.append(self._variant("margin", key).format(value=margin, subtypes=sub_text))
        for kind, slot in (
            (DescriptorKind.ECHOGENICITY, "echogenicity"),
            (DescriptorKind.POSTERIOR, "posterior"),
            (DescriptorKind.BIRADS, "birads"),
            (DescriptorKind.PATHOLOGY, "pathology"),
            (DescriptorKind.HISTOLOGY, "histology"),
        ):
            if kind in values:
                sentences.append(self._variant(slot, key).format(value=values[kind]))
        return ReportText(sentences=tuple(sentences))


class ExternalLLMRealizer:
    """Adapter for an external report writer speaking newline-delimited JSON.

    The subprocess receives {"prompt": ...} on stdin and must answer with one
    line {"report": ...}. Output is not trusted for fact-closure.
    """

    def __init__(self, command: list[str], timeout: float = 60.0):
        self.command = list(command)
        self.timeout = timeout

    def realize(self, prompt: PromptText) -> ReportText:
        request = json.dumps({"prompt": prompt.text}) + "\n"
        try:
            proc = subprocess.run(
                self.command,
                input=request.encode("utf-8"),
                capture_output=True,
                timeout=self.timeout,
                check=True,
            )
        except (OSError, subprocess.SubprocessError) as exc:
            raise RealizerFailure(f"external realizer failed: {exc}") from exc
        try:
            reply = json.loads(proc.stdout.decode("utf-8").splitlines()[0])
            text = str(reply["report"])
        except (IndexError, KeyError, ValueError) as exc:
            raise RealizerFailure(f"external realizer returned unusable output: {exc}") from exc
        sentences = tuple(s.strip() for s in re.split(r"(?<=\.)\s+", text) if s.strip())
        return ReportText(sentences=sentences)


_DEFAULT_REALIZER = TemplateRealizer()


def realize_report(prompt: PromptText, realizer: ReportRealizer | None = None) -> ReportText:
    """Realize the narrative report for a prompt (template realizer by default)."""
    return (realizer or _DEFAULT_REALIZER).realize(prompt)


def insert_size(report: ReportText, size_mm: float) -> ReportText:
    """Replace (or create) the size statement with the given value, rounded to 0.1 mm."""
    if not size_mm > 0:
        raise NonPositiveSize(f"size must be positive, got {size_mm}")
    formatted = format_size(size_mm)
    sentences = list(report.sentences)
    for i, sentence in enumerate(sentences):
        if SIZE_PATTERN.search(sentence):
            sentences[i] = SIZE_PATTERN.sub(f"{formatted} mm", sentence, count=1)
            return ReportText(sentences=tuple(sentences))
    bank = _load_templates()["size"]
    return ReportText(sentences=(bank[0].format(value=formatted), *sentences))


def supervisory_report(
    ds: DescriptorSet,
    radiomics: RadiomicsFeatures | None = None,
    sample_id: str = "",
    realizer: ReportRealizer | None = None,
) -> tuple[PromptText, ReportText]:
    """Prompt + realized report for one sample (the supervision-construction path)."""
    prompt = format_prompt(ds, radiomics, variant_key=sample_id)
    return prompt, realize_report(prompt, realizer)
