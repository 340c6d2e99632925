"""Descriptor vocabularies, dataset configurations, and descriptor-set validation."""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

from .errors import InvalidConfig, OutOfVocabulary, UnknownDescriptor


class DescriptorKind(str, Enum):
    """Closed enumeration of lesion descriptor kinds. ``size`` is the only continuous kind."""

    BIRADS = "birads"
    SHAPE = "shape"
    MARGIN_MAIN = "margin_main"
    MARGIN_SUBTYPES = "margin_subtypes"
    ECHOGENICITY = "echogenicity"
    POSTERIOR = "posterior"
    PATHOLOGY = "pathology"
    HISTOLOGY = "histology"
    SIZE = "size"

    def __str__(self) -> str:  # pragma: no cover - cosmetic
        return self.value


CATEGORICAL_KINDS = tuple(k for k in DescriptorKind if k is not DescriptorKind.SIZE)

_WS = re.compile(r"\s+")
_BIRADS_FORM = re.compile(r"^\d[a-cA-C]?$")


def normalize_value(kind: DescriptorKind, value: str) -> str:
    """Lowercase, trim, and collapse internal whitespace.

    BI-RADS values keep their letter suffix uppercase ("4A").
    """
    text = _WS.sub(" ", str(value).strip())
    if kind is DescriptorKind.BIRADS and _BIRADS_FORM.match(text):
        return text.upper()
    return text.lower()


@dataclass(frozen=True)
class Vocabulary:
    """Ordered category list for one descriptor kind."""

    kind: DescriptorKind
    values: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.values:
            raise InvalidConfig(f"empty vocabulary for {self.kind.value}")
        if len(set(self.values)) != len(self.values):
            raise InvalidConfig(f"duplicate values in {self.kind.value} vocabulary")

    def __contains__(self, value: str) -> bool:
        return normalize_value(self.kind, value) in self.values

    def __len__(self) -> int:
        return len(self.values)

    def index(self, value: str) -> int:
        norm = normalize_value(self.kind, value)
        try:
            return self.values.index(norm)
        except ValueError:
            raise OutOfVocabulary(
                f"{norm!r} is not a {self.kind.value} category (expected one of {list(self.values)})"
            ) from None


# Combined-margin task label used wherever margin_main and its subtypes are
# folded into a single supervised task.
MARGIN_TASK = "margin"


@dataclass(frozen=True)
class DatasetConfig:
    """Which descriptor tasks are supervised for a dataset, and their vocabularies."""

    name: str
    active_tasks: tuple[DescriptorKind, ...]
    vocabularies: Mapping[DescriptorKind, Vocabulary]
    has_masks: bool = False

    def __post_init__(self) -> None:
        if not self.active_tasks:
            raise InvalidConfig(f"config {self.name!r} has no active tasks")
        for kind in self.active_tasks:
            if kind is DescriptorKind.SIZE:
                continue
            if kind not in self.vocabularies:
                raise InvalidConfig(f"task {kind.value} active in {self.name!r} but has no vocabulary")

    def is_active(self, kind: DescriptorKind) -> bool:
        return kind in self.active_tasks

    def vocabulary(self, kind: DescriptorKind) -> Vocabulary:
        if kind not in self.vocabularies:
            raise UnknownDescriptor(f"{kind.value} has no vocabulary in config {self.name!r}")
        return self.vocabularies[kind]

    def main_tasks(self) -> tuple[str, ...]:
        """Ordered supervised task names with margin_main + subtypes folded into ``margin``."""
        tasks: list[str] = []
        for kind in self.active_tasks:
            name = MARGIN_TASK if kind in (DescriptorKind.MARGIN_MAIN, DescriptorKind.MARGIN_SUBTYPES) else kind.value
            if name not in tasks:
                tasks.append(name)
        return tuple(tasks)

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "active_tasks": [k.value for k in self.active_tasks],
            "vocabularies": {k.value: list(v.values) for k, v in self.vocabularies.items()},
            "has_masks": self.has_masks,
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "DatasetConfig":
        try:
            active = tuple(DescriptorKind(t) for t in doc["active_tasks"])
            vocabs = {
                DescriptorKind(k): Vocabulary(DescriptorKind(k), tuple(str(v) for v in vals))
                for k, vals in doc["vocabularies"].items()
            }
            return cls(
                name=str(doc["name"]),
                active_tasks=active,
                vocabularies=vocabs,
                has_masks=bool(doc.get("has_masks", False)),
            )
        except (KeyError, ValueError) as exc:
            raise InvalidConfig(f"malformed dataset config: {exc}") from exc

    def config_hash(self) -> str:
        payload = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.md5(payload.encode("utf-8")).hexdigest()


def load_config(name_or_path: str | Path) -> DatasetConfig:
    """Load a dataset config by built-in name ("breast", "busbra") or JSON path."""
    path = Path(name_or_path)
    if path.suffix == ".json" and path.exists():
        doc = json.loads(path.read_text(encoding="utf-8"))
        return DatasetConfig.from_json(doc)
    ref = resources.files("bustr.data").joinpath(f"{name_or_path}.json")
    if not ref.is_file():
        raise InvalidConfig(f"unknown dataset config {name_or_path!r}")
    return DatasetConfig.from_json(json.loads(ref.read_text(encoding="utf-8")))


DescriptorValue = str | frozenset[str] | float


@dataclass(frozen=True)
class DescriptorSet:
    """Mapping from descriptor kind to its value.

    Values are category strings, a frozenset of margin subtypes, or a size in
    millimetres. ``source`` records how the set was obtained and is excluded
    from equality so parsed sets compare against ground truth directly.
    """

    entries: Mapping[DescriptorKind, DescriptorValue]
    source: str = field(default="ground_truth", compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "entries", dict(self.entries))

    def get(self, kind: DescriptorKind, default=None):
        return self.entries.get(kind, default)

    def __contains__(self, kind: DescriptorKind) -> bool:
        return kind in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def kinds(self) -> tuple[DescriptorKind, ...]:
        return tuple(self.entries.keys())

    def margin_consistent(self) -> bool:
        """Subtypes may be present only for a non-circumscribed main margin."""
        subs = self.entries.get(DescriptorKind.MARGIN_SUBTYPES)
        if not subs:
            return True
        return self.entries.get(DescriptorKind.MARGIN_MAIN) == "non-circumscribed"

    def to_json(self) -> dict:
        doc: dict = {}
        for kind, value in self.entries.items():
            if isinstance(value, frozenset):
                doc[kind.value] = sorted(value)
            else:
                doc[kind.value] = value
        return doc

    @classmethod
    def from_json(cls, doc: Mapping, source: str = "ground_truth") -> "DescriptorSet":
        entries: dict[DescriptorKind, DescriptorValue] = {}
        for key, value in doc.items():
            kind = DescriptorKind(key)
            if kind is DescriptorKind.MARGIN_SUBTYPES:
                entries[kind] = frozenset(str(v) for v in value)
            elif kind is DescriptorKind.SIZE:
                entries[kind] = float(value)
            else:
                entries[kind] = str(value)
        return cls(entries, source=source)


def validate_descriptors(ds: DescriptorSet, cfg: DatasetConfig) -> DescriptorSet:
    """Check every entry against the config and return a normalized copy.

    Raises UnknownDescriptor for kinds that are not active tasks, and
    OutOfVocabulary for values outside the kind's vocabulary. Idempotent.
    """
    if len(ds) == 0:
        raise UnknownDescriptor("empty descriptor set")
    normalized: dict[DescriptorKind, DescriptorValue] = {}
    for kind, value in ds.entries.items():
        if not cfg.is_active(kind):
            raise UnknownDescriptor(f"{kind.value} is not an active task of config {cfg.name!r}")
        if kind is DescriptorKind.SIZE:
            size = float(value)
            if not size > 0:
                raise OutOfVocabulary(f"size must be positive, got {size}")
            normalized[kind] = size
        elif kind is DescriptorKind.MARGIN_SUBTYPES:
            vocab = cfg.vocabulary(kind)
            subs = frozenset(normalize_value(kind, v) for v in value)
            for sub in sorted(subs):
                if sub not in vocab.values:
                    raise OutOfVocabulary(f"{sub!r} is not a margin subtype (expected one of {list(vocab.values)})")
            normalized[kind] = subs
        else:
            vocab = cfg.vocabulary(kind)
            norm = normalize_value(kind, str(value))
            if norm not in vocab.values:
                raise OutOfVocabulary(
                    f"{norm!r} is not a {kind.value} category (expected one of {list(vocab.values)})"
                )
            normalized[kind] = norm
    return replace(ds, entries=normalized)


def active_tasks(cfg: DatasetConfig) -> tuple[str, ...]:
    """The ordered supervised task set, with combined margin counted once."""
    return cfg.main_tasks()


def descriptor_sets_equal(a: DescriptorSet, b: DescriptorSet, size_tol: float = 0.05) -> bool:
    """Entry-wise equality with a tolerance on the continuous size field."""
    if set(a.entries) != set(b.entries):
        return False
    for kind, value in a.entries.items():
        other = b.entries[kind]
        if kind is DescriptorKind.SIZE:
            if abs(float(value) - float(other)) > size_tol:
                return False
        elif value != other:
            return False
    return True


def random_descriptor_set(cfg: DatasetConfig, rng, full: bool = True) -> DescriptorSet:
    """Draw a uniform random validated descriptor set under ``cfg``.

    With ``full=False`` each optional kind is independently dropped, which is
    how partially annotated cases are modelled.
    """
    entries: dict[DescriptorKind, DescriptorValue] = {}
    for kind in cfg.active_tasks:
        if not full and kind is not DescriptorKind.BIRADS and rng.random() < 0.3:
            continue
        if kind is DescriptorKind.SIZE:
            entries[kind] = round(float(rng.uniform(3.0, 25.0)), 1)
        elif kind is DescriptorKind.MARGIN_SUBTYPES:
            if entries.get(DescriptorKind.MARGIN_MAIN) != "non-circumscribed":
                continue
            vocab = cfg.vocabulary(kind).values
            count = int(rng.integers(1, len(vocab) + 1))
            picks = rng.choice(len(vocab), size=count, replace=False)
            entries[kind] = frozenset(vocab[i] for i in sorted(picks))
        else:
            vocab = cfg.vocabulary(kind).values
            entries[kind] = vocab[int(rng.integers(len(vocab)))]
    return validate_descriptors(DescriptorSet(entries), cfg)
