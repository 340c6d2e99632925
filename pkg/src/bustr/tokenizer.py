"""Byte-base tokenizer with corpus-learned word tokens and atomic clinical terms.

Domain terms (including multi-word ones such as "invasive ductal carcinoma")
encode to a single id so the language model never has to assemble them from
fragments. Everything else falls back to learned whole-word tokens and
finally to raw bytes, which makes encode/decode an exact identity on any
text.
"""

from __future__ import annotations

import json
import re
from importlib import resources
from pathlib import Path

PAD_ID = 0
EOS_ID = 1
IMG_ID = 2  # placeholder for vision-prefix positions during LM pretraining
BYTE_OFFSET = 3
BASE_VOCAB = BYTE_OFFSET + 256

_WORD_RE = re.compile(r"[A-Za-z0-9]+")


def clinical_terms() -> list[str]:
    """The shipped list of descriptor and category terms treated as atomic tokens."""
    ref = resources.files("bustr.data").joinpath("clinical_terms.txt")
    return [line for line in ref.read_text(encoding="utf-8").splitlines() if line.strip()]


def _is_word_char(ch: str) -> bool:
    return ch.isalnum()


class ReportTokenizer:
    """ids: 0 pad, 1 eos, 2..257 bytes, then appended word/term entries."""

    def __init__(self, words: list[str] | None = None, terms: list[str] | None = None):
        self._extra: list[tuple[str, str]] = []
        self._extra_ids: dict[str, int] = {}
        self._terms_sorted: list[str] = []
        for word in words or []:
            self._add(word, "word")
        for term in terms or []:
            self._add(term, "term")

    # -- construction ----------------------------------------------------

    def _add(self, text: str, kind: str) -> bool:
        if not text or text in self._extra_ids:
            return False
        self._extra_ids[text] = BASE_VOCAB + len(self._extra)
        self._extra.append((text, kind))
        if kind == "term":
            self._terms_sorted = sorted(
                (t for t, k in self._extra if k == "term"), key=len, reverse=True
            )
        return True

    def copy(self) -> "ReportTokenizer":
        clone = ReportTokenizer()
        clone._extra = list(self._extra)
        clone._extra_ids = dict(self._extra_ids)
        clone._terms_sorted = list(self._terms_sorted)
        return clone

    @property
    def vocab_size(self) -> int:
        return BASE_VOCAB + len(self._extra)

    @property
    def terms(self) -> list[str]:
        return [t for t, k in self._extra if k == "term"]

    # -- encoding --------------------------------------------------------

    def _match_term(self, text: str, pos: int) -> str | None:
        for term in self._terms_sorted:
            end = pos + len(term)
            if text.startswith(term, pos):
                before_ok = pos == 0 or not (_is_word_char(text[pos - 1]) and _is_word_char(term[0]))
                after_ok = end >= len(text) or not (_is_word_char(text[end - 1]) and _is_word_char(text[end]))
                if before_ok and after_ok:
                    return term
        return None

    def encode(self, text: str) -> list[int]:
        ids: list[int] = []
        pos = 0
        while pos < len(text):
            term = self._match_term(text, pos)
            if term is not None:
                ids.append(self._extra_ids[term])
                pos += len(term)
                continue
            match = _WORD_RE.match(text, pos)
            if match:
                word = match.group(0)
                wid = self._extra_ids.get(word)
                if wid is not None and self._extra[wid - BASE_VOCAB][1] == "word":
                    ids.append(wid)
                else:
                    ids.extend(BYTE_OFFSET + b for b in word.encode("utf-8"))
                pos = match.end()
                continue
            ids.extend(BYTE_OFFSET + b for b in text[pos].encode("utf-8"))
            pos += 1
        return ids

    def decode(self, ids: list[int]) -> str:
        parts: list[str] = []
        byte_run: list[int] = []

        def flush() -> None:
            if byte_run:
                parts.append(bytes(byte_run).decode("utf-8", errors="replace"))
                byte_run.clear()

        for token_id in ids:
            if token_id in (PAD_ID, EOS_ID, IMG_ID):
                continue
            if BYTE_OFFSET <= token_id < BASE_VOCAB:
                byte_run.append(token_id - BYTE_OFFSET)
                continue
            flush()
            parts.append(self._extra[token_id - BASE_VOCAB][0])
        flush()
        return "".join(parts)

    # -- persistence -----------------------------------------------------

    def to_json(self) -> dict:
        return {"extra": [[text, kind] for text, kind in self._extra]}

    @classmethod
    def from_json(cls, doc: dict) -> "ReportTokenizer":
        tok = cls()
        for text, kind in doc["extra"]:
            tok._add(text, kind)
        return tok

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_json(), indent=2), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "ReportTokenizer":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def train_tokenizer(texts: list[str], min_freq: int = 2) -> ReportTokenizer:
    """Learn whole-word tokens from the corpus (frequency-ordered, deterministic)."""
    counts: dict[str, int] = {}
    for text in texts:
        for word in _WORD_RE.findall(text):
            if len(word) >= 2:
                counts[word] = counts.get(word, 0) + 1
    words = [w for w, c in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0])) if c >= min_freq]
    return ReportTokenizer(words=words)


def augment_tokenizer(base: ReportTokenizer, terms: list[str]) -> ReportTokenizer:
    """Return a copy of ``base`` where every term encodes to exactly one id.

    Terms that are already atomic are no-ops, so the vocabulary grows by
    exactly the number of genuinely new terms.
    """
    tok = base.copy()
    for term in terms:
        term = term.strip()
        if not term:
            continue
        if len(tok.encode(term)) == 1:
            continue
        tok._add(term, "term")
    return tok
