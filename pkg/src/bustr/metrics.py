"""NLG metrics (BLEU, ROUGE-L, METEOR, CIDEr), clinical-efficacy extraction, and fold statistics."""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from scipy.special import betainc

from .errors import LengthMismatch, UndefinedIdf, ZeroVariance
from .schema import (
    CATEGORICAL_KINDS,
    DatasetConfig,
    DescriptorKind,
    DescriptorSet,
    normalize_value,
)

# Words keep internal ./-/ connectors ("bi-rads", "9.0", "cystic/solid");
# any other punctuation becomes its own token.
_TOKEN_RE = re.compile(r"[a-z0-9]+(?:[./-][a-z0-9]+)*|[^\sa-z0-9]")


def tokenize(text: str) -> tuple[str, ...]:
    """Lowercased word tokens with punctuation detached."""
    return tuple(_TOKEN_RE.findall(text.lower()))


@dataclass(frozen=True)
class TokenizedPair:
    hypothesis: tuple[str, ...]
    reference: tuple[str, ...]

    @classmethod
    def from_text(cls, hypothesis: str, reference: str) -> "TokenizedPair":
        return cls(tokenize(hypothesis), tokenize(reference))


def _ngrams(tokens: tuple[str, ...], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu_n(pairs: list[TokenizedPair], n: int) -> float:
    """Corpus-level BLEU-n: clipped precision geometric mean over 1..n with brevity penalty."""
    if not 1 <= n <= 4:
        raise ValueError(f"BLEU order must be in 1..4, got {n}")
    hyp_len = sum(len(p.hypothesis) for p in pairs)
    ref_len = sum(len(p.reference) for p in pairs)
    if hyp_len == 0:
        return 0.0
    log_precision = 0.0
    for order in range(1, n + 1):
        matched = 0
        total = 0
        for pair in pairs:
            hyp_counts = _ngrams(pair.hypothesis, order)
            ref_counts = _ngrams(pair.reference, order)
            matched += sum(min(count, ref_counts[gram]) for gram, count in hyp_counts.items())
            total += sum(hyp_counts.values())
        if matched == 0 or total == 0:
            return 0.0
        log_precision += math.log(matched / total)
    brevity = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return brevity * math.exp(log_precision / n)


ROUGE_BETA = 1.2


def _lcs_length(a: tuple[str, ...], b: tuple[str, ...]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for token in a:
        cur = [0]
        for j, other in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if token == other else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(pair: TokenizedPair) -> float:
    """LCS F-measure with recall-favouring beta."""
    lcs = _lcs_length(pair.hypothesis, pair.reference)
    if lcs == 0:
        return 0.0
    precision = lcs / len(pair.hypothesis)
    recall = lcs / len(pair.reference)
    beta2 = ROUGE_BETA**2
    return (1 + beta2) * precision * recall / (recall + beta2 * precision)


def meteor_simple(pair: TokenizedPair) -> float:
    """Exact-match METEOR: harmonic mean weighted toward recall, with a chunk penalty.

    No stemming or synonymy; the t-th occurrence of a matched word aligns to
    its t-th occurrence in the reference.
    """
    hyp, ref = pair.hypothesis, pair.reference
    if not hyp or not ref:
        return 0.0
    quota = {w: min(c, Counter(ref)[w]) for w, c in Counter(hyp).items()}
    matches = sum(quota.values())
    if matches == 0:
        return 0.0
    ref_positions: dict[str, list[int]] = {}
    for idx, word in enumerate(ref):
        ref_positions.setdefault(word, []).append(idx)
    used = {w: 0 for w in ref_positions}
    alignment: list[tuple[int, int]] = []
    taken = dict(quota)
    for i, word in enumerate(hyp):
        if taken.get(word, 0) > 0:
            j = ref_positions[word][used[word]]
            used[word] += 1
            taken[word] -= 1
            alignment.append((i, j))
    chunks = 1
    for (i0, j0), (i1, j1) in zip(alignment, alignment[1:]):
        if i1 != i0 + 1 or j1 != j0 + 1:
            chunks += 1
    precision = matches / len(hyp)
    recall = matches / len(ref)
    f_mean = 10 * precision * recall / (recall + 9 * precision)
    penalty = 0.5 * (chunks / matches) ** 3
    return f_mean * (1.0 - penalty)


CIDER_SIGMA = 6.0
CIDER_MAX_N = 4


def cider(pairs: list[TokenizedPair]) -> float:
    """Consensus metric: TF-IDF n-gram cosine (n=1..4) with a gaussian length penalty, x10.

    Document frequencies come from the references of the evaluated corpus, so
    at least two pairs are required.
    """
    if len(pairs) < 2:
        raise UndefinedIdf(f"CIDEr needs a reference population, got {len(pairs)} pair(s)")
    n_docs = len(pairs)
    doc_freq: list[Counter] = []
    for order in range(1, CIDER_MAX_N + 1):
        df = Counter()
        for pair in pairs:
            df.update(set(_ngrams(pair.reference, order)))
        doc_freq.append(df)

    def tfidf(counts: Counter, df: Counter) -> dict:
        vec = {}
        for gram, count in counts.items():
            d = df.get(gram, 0)
            if d > 0:
                vec[gram] = count * math.log(n_docs / d)
        return vec

    total = 0.0
    for pair in pairs:
        per_n = 0.0
        for order in range(1, CIDER_MAX_N + 1):
            hyp_vec = tfidf(_ngrams(pair.hypothesis, order), doc_freq[order - 1])
            ref_vec = tfidf(_ngrams(pair.reference, order), doc_freq[order - 1])
            hyp_norm = math.sqrt(sum(v * v for v in hyp_vec.values()))
            ref_norm = math.sqrt(sum(v * v for v in ref_vec.values()))
            if hyp_norm == 0 or ref_norm == 0:
                continue
            dot = sum(v * ref_vec[g] for g, v in hyp_vec.items() if g in ref_vec)
            length_gap = len(pair.hypothesis) - len(pair.reference)
            penalty = math.exp(-(length_gap**2) / (2 * CIDER_SIGMA**2))
            per_n += penalty * dot / (hyp_norm * ref_norm)
        total += per_n / CIDER_MAX_N
    return 10.0 * total / n_docs


def nlg_metrics(hypotheses: list[str], references: list[str]) -> dict[str, float]:
    """All seven NLG columns for one evaluation corpus."""
    if len(hypotheses) != len(references):
        raise LengthMismatch(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    pairs = [TokenizedPair.from_text(h, r) for h, r in zip(hypotheses, references)]
    out = {f"bleu{n}": bleu_n(pairs, n) for n in range(1, 5)}
    out["rougeL"] = float(np.mean([rouge_l(p) for p in pairs])) if pairs else 0.0
    out["meteor"] = float(np.mean([meteor_simple(p) for p in pairs])) if pairs else 0.0
    out["cider"] = cider(pairs)
    return out


# ---------------------------------------------------------------------------
# Clinical-efficacy extraction


def _alternation(values: tuple[str, ...]) -> re.Pattern:
    ordered = sorted(values, key=len, reverse=True)
    return re.compile(r"\b(" + "|".join(re.escape(v) for v in ordered) + r")\b", re.IGNORECASE)


def parse_report(text: str, cfg: DatasetConfig) -> DescriptorSet:
    """Recover the descriptor set mentioned in free text, per the config's vocabularies.

    First mention wins per kind; BI-RADS is matched only in the explicit
    "BI-RADS <value>" form; a kind with no mention is simply absent.
    """
    raw = text.full_text if hasattr(text, "full_text") else str(text)
    entries: dict[DescriptorKind, object] = {}
    for kind in cfg.active_tasks:
        if kind is DescriptorKind.SIZE:
            match = re.search(r"(\d+(?:\.\d+)?)\s*mm", raw)
            if match:
                entries[kind] = float(match.group(1))
            continue
        vocab = cfg.vocabulary(kind)
        if kind is DescriptorKind.BIRADS:
            pattern = re.compile(
                r"BI-RADS\s+(" + "|".join(re.escape(v) for v in sorted(vocab.values, key=len, reverse=True)) + r")\b",
                re.IGNORECASE,
            )
            match = pattern.search(raw)
            if match:
                entries[kind] = normalize_value(kind, match.group(1))
            continue
        if kind is DescriptorKind.MARGIN_SUBTYPES:
            found = _alternation(vocab.values).findall(raw)
            if found:
                entries[kind] = frozenset(normalize_value(kind, v) for v in found)
            continue
        match = _alternation(vocab.values).search(raw)
        if match:
            entries[kind] = normalize_value(kind, match.group(1))
    return DescriptorSet(entries, source="parsed")


def scan_descriptor_terms(text: str, cfg: DatasetConfig) -> set[tuple[DescriptorKind, str]]:
    """Every (kind, value) mention in the text, for fact-closure audits."""
    raw = text.full_text if hasattr(text, "full_text") else str(text)
    mentions: set[tuple[DescriptorKind, str]] = set()
    for kind in cfg.active_tasks:
        if kind is DescriptorKind.SIZE:
            continue
        vocab = cfg.vocabulary(kind)
        if kind is DescriptorKind.BIRADS:
            pattern = re.compile(
                r"BI-RADS\s+(" + "|".join(re.escape(v) for v in sorted(vocab.values, key=len, reverse=True)) + r")\b",
                re.IGNORECASE,
            )
            mentions.update((kind, normalize_value(kind, m)) for m in pattern.findall(raw))
            continue
        for value in _alternation(vocab.values).findall(raw):
            mentions.add((kind, normalize_value(kind, value)))
    return mentions


@dataclass
class ConfusionTally:
    """Per-class TP/FP/FN counts for one descriptor kind."""

    tp: Counter = field(default_factory=Counter)
    fp: Counter = field(default_factory=Counter)
    fn: Counter = field(default_factory=Counter)

    def add_categorical(self, truth: str | None, predicted: str | None) -> None:
        if truth is None and predicted is None:
            return
        if truth == predicted:
            self.tp[truth] += 1
        else:
            if truth is not None:
                self.fn[truth] += 1
            if predicted is not None:
                self.fp[predicted] += 1

    def add_multilabel(self, truth: frozenset[str], predicted: frozenset[str]) -> None:
        for value in truth & predicted:
            self.tp[value] += 1
        for value in truth - predicted:
            self.fn[value] += 1
        for value in predicted - truth:
            self.fp[value] += 1

    def macro_scores(self, classes: list[str]) -> tuple[float, float, float]:
        """Macro precision/sensitivity/F1 over the given classes."""
        if not classes:
            return 0.0, 0.0, 0.0
        ps, ss, fs = [], [], []
        for c in classes:
            tp, fp, fn = self.tp[c], self.fp[c], self.fn[c]
            p = tp / (tp + fp) if tp + fp else 0.0
            s = tp / (tp + fn) if tp + fn else 0.0
            f1 = 2 * p * s / (p + s) if p + s else 0.0
            ps.append(p)
            ss.append(s)
            fs.append(f1)
        return float(np.mean(ps)), float(np.mean(ss)), float(np.mean(fs))


def ce_metrics(
    parsed: list[DescriptorSet],
    truth: list[DescriptorSet],
    cfg: DatasetConfig,
) -> dict[str, tuple[float, float, float]]:
    """Per-descriptor macro precision/sensitivity/F1 of parsed vs ground-truth sets.

    Classes are macro-averaged over those present in the truth; an absent
    prediction counts as a false negative for the true class with no false
    positive.
    """
    if len(parsed) != len(truth):
        raise LengthMismatch(f"{len(parsed)} parsed vs {len(truth)} truth")
    scores: dict[str, tuple[float, float, float]] = {}
    for kind in cfg.active_tasks:
        if kind is DescriptorKind.SIZE or kind not in CATEGORICAL_KINDS:
            continue
        tally = ConfusionTally()
        truth_classes: set[str] = set()
        for pred_ds, true_ds in zip(parsed, truth):
            if kind is DescriptorKind.MARGIN_SUBTYPES:
                t = frozenset(true_ds.get(kind) or frozenset())
                p = frozenset(pred_ds.get(kind) or frozenset())
                truth_classes.update(t)
                tally.add_multilabel(t, p)
            else:
                t = true_ds.get(kind)
                p = pred_ds.get(kind)
                if t is not None:
                    truth_classes.add(str(t))
                tally.add_categorical(t, p)
        scores[kind.value] = tally.macro_scores(sorted(truth_classes))
    return scores


def descriptor_accuracy(parsed: list[DescriptorSet], truth: list[DescriptorSet], kind: DescriptorKind) -> float:
    """Fraction of samples whose parsed value matches the truth exactly."""
    if len(parsed) != len(truth):
        raise LengthMismatch(f"{len(parsed)} parsed vs {len(truth)} truth")
    hits = sum(1 for p, t in zip(parsed, truth) if p.get(kind) == t.get(kind))
    return hits / len(truth) if truth else 0.0


def majority_class_rate(truth: list[DescriptorSet], kind: DescriptorKind) -> float:
    counts = Counter(str(ds.get(kind)) for ds in truth if ds.get(kind) is not None)
    return max(counts.values()) / len(truth) if counts else 0.0


# ---------------------------------------------------------------------------
# Fold statistics


def paired_ttest(a: list[float], b: list[float]) -> tuple[float, float]:
    """Two-sided paired t-test: t = mean(d)/(sd(d)/sqrt(n)), p via the regularized incomplete beta.

    Identical score lists return (0, 1) by convention; any other constant
    difference vector has no defined statistic and raises ZeroVariance.
    """
    if len(a) != len(b):
        raise LengthMismatch(f"{len(a)} vs {len(b)} scores")
    if len(a) < 2:
        raise LengthMismatch("need at least two paired scores")
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    if np.all(d == d[0]):
        if d[0] == 0.0:
            return 0.0, 1.0
        raise ZeroVariance("paired differences are constant and nonzero")
    n = len(d)
    t = float(d.mean() / (d.std(ddof=1) / math.sqrt(n)))
    df = n - 1
    p = float(betainc(df / 2.0, 0.5, df / (df + t * t)))
    return t, p


NLG_COLUMNS = ("bleu1", "bleu2", "bleu3", "bleu4", "rougeL", "meteor", "cider")


@dataclass
class MetricsRecord:
    """Per-fold NLG scores and per-descriptor CE triples, plus training histories."""

    fold: int
    nlg: dict[str, float]
    ce: dict[str, tuple[float, float, float]]
    histories: dict[str, list[float]] = field(default_factory=dict)

    def nlg_row(self) -> dict[str, float]:
        return {name: float(self.nlg[name]) for name in NLG_COLUMNS}
