"""Bleu-4 and Rouge-1/2/L over explicit token sequences."""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import asdict, dataclass, field

BLEU_EPSILON = 1e-9
_WORD_RE = re.compile(r"\w+|[^\w\s]")


@dataclass(frozen=True)
class TokenSeq:
    tokens: tuple[str, ...]
    source_text: str = ""

    def __len__(self) -> int:
        return len(self.tokens)


def tokenize(text: str, mode: str = "word") -> TokenSeq:
    """``word``: lowercase, whitespace split, punctuation split off.
    ``char``: one token per non-whitespace character.
    """
    if mode == "word":
        toks = _WORD_RE.findall(text.lower())
    elif mode == "char":
        toks = [c for c in text if not c.isspace()]
    else:
        raise ValueError(f"unknown tokenization mode {mode!r}")
    return TokenSeq(tuple(toks), text)


def _as_tokens(x) -> tuple[str, ...]:
    return x.tokens if isinstance(x, TokenSeq) else tuple(x)


def ngrams(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


@dataclass
class PRF:
    precision: float = 0.0
    recall: float = 0.0
    f1: float = 0.0

    @classmethod
    def from_counts(cls, overlap: int, cand_total: int, ref_total: int) -> "PRF":
        p = overlap / cand_total if cand_total > 0 else 0.0
        r = overlap / ref_total if ref_total > 0 else 0.0
        return cls(p, r, f1(p, r))


def f1(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


@dataclass
class BleuStats:
    """Clipped matches and candidate n-gram totals for n=1..4, plus lengths."""

    matches: list[int] = field(default_factory=lambda: [0] * 4)
    totals: list[int] = field(default_factory=lambda: [0] * 4)
    cand_len: int = 0
    ref_len: int = 0

    def __iadd__(self, other: "BleuStats") -> "BleuStats":
        self.matches = [a + b for a, b in zip(self.matches, other.matches)]
        self.totals = [a + b for a, b in zip(self.totals, other.totals)]
        self.cand_len += other.cand_len
        self.ref_len += other.ref_len
        return self

    def score(self) -> float:
        if self.cand_len == 0:
            return 0.0
        log_p = 0.0
        for m, t in zip(self.matches, self.totals):
            p = m / t if t > 0 else 0.0
            log_p += 0.25 * math.log(p if p > 0 else BLEU_EPSILON)
        bp = min(1.0, math.exp(1.0 - self.ref_len / self.cand_len))
        return bp * math.exp(log_p)


def bleu_stats(candidate, reference) -> BleuStats:
    cand, ref = _as_tokens(candidate), _as_tokens(reference)
    st = BleuStats(cand_len=len(cand), ref_len=len(ref))
    for n in range(1, 5):
        c, r = ngrams(cand, n), ngrams(ref, n)
        st.matches[n - 1] = sum(min(k, r[g]) for g, k in c.items())
        st.totals[n - 1] = max(len(cand) - n + 1, 0)
    return st


def bleu4(candidate, reference) -> float:
    """Sentence Bleu-4: uniform weights, brevity penalty, epsilon-smoothed logs."""
    return bleu_stats(candidate, reference).score()


def rouge_n(candidate, reference, n: int) -> PRF:
    if n < 1:
        raise ValueError("n must be >= 1")
    cand, ref = _as_tokens(candidate), _as_tokens(reference)
    c, r = ngrams(cand, n), ngrams(ref, n)
    overlap = sum(min(k, c[g]) for g, k in r.items())
    return PRF.from_counts(overlap, max(len(cand) - n + 1, 0), max(len(ref) - n + 1, 0))


def lcs_length(a, b) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, reference) -> PRF:
    cand, ref = _as_tokens(candidate), _as_tokens(reference)
    return PRF.from_counts(lcs_length(cand, ref), len(cand), len(ref))


@dataclass
class MetricScore:
    bleu4: float
    rouge1: PRF
    rouge2: PRF
    rougeL: PRF

    def headline(self, rouge_field: str = "f1") -> dict[str, float]:
        return {"bleu4": self.bleu4,
                "rouge1": getattr(self.rouge1, rouge_field),
                "rouge2": getattr(self.rouge2, rouge_field),
                "rougeL": getattr(self.rougeL, rouge_field)}

    def to_dict(self) -> dict:
        return asdict(self)


def _mean_prf(items: list[PRF]) -> PRF:
    n = len(items)
    # fixed left-to-right reduction keeps results order-deterministic
    return PRF(sum(x.precision for x in items) / n, sum(x.recall for x in items) / n,
               sum(x.f1 for x in items) / n)


def corpus_eval(pairs, mode: str = "word") -> MetricScore:
    """Pooled-count corpus Bleu-4; per-pair-averaged Rouge.

    ``pairs`` holds ``(candidate_text, reference_text)``.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("corpus_eval needs at least one pair")
    stats = BleuStats()
    r1, r2, rl = [], [], []
    for cand_text, ref_text in pairs:
        cand, ref = tokenize(cand_text, mode), tokenize(ref_text, mode)
        stats += bleu_stats(cand, ref)
        r1.append(rouge_n(cand, ref, 1))
        r2.append(rouge_n(cand, ref, 2))
        rl.append(rouge_l(cand, ref))
    return MetricScore(stats.score(), _mean_prf(r1), _mean_prf(r2), _mean_prf(rl))
