"""Heuristic terminology-corpus curation.

Iteratively filters a coarse crawled corpus down to a fine terminology
corpus: each iteration scores every line by how much it contributes to the
vocabulary overlap with reference text, minus a length penalty, and keeps
the lines scoring above a threshold.
"""

from __future__ import annotations

import csv
import hashlib
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources

from .errors import DataError
from .tokenizer import curation_tokens

STOPWORDS_SHA256 = "d97f248f3d332c67e75f176d58fbd3fd60bbe5695095a281e5f74c0f60fe026e"

_stopwords_cache: frozenset[str] | None = None


def load_stopwords() -> frozenset[str]:
    """Vendored list of ~900 common English words, checksum-pinned."""
    global _stopwords_cache
    if _stopwords_cache is None:
        raw = resources.files("moca.data").joinpath("stopwords.txt").read_bytes()
        digest = hashlib.sha256(raw).hexdigest()
        if digest != STOPWORDS_SHA256:
            raise DataError(
                f"stopwords.txt checksum mismatch: {digest} != {STOPWORDS_SHA256}"
            )
        _stopwords_cache = frozenset(raw.decode("utf-8").split())
    return _stopwords_cache


@dataclass(frozen=True)
class CorpusLine:
    text: str
    tokens: tuple[str, ...]
    original_index: int

    @classmethod
    def from_text(cls, text: str, original_index: int) -> "CorpusLine":
        return cls(text=text, tokens=tuple(curation_tokens(text)), original_index=original_index)

    @property
    def types(self) -> frozenset[str]:
        return frozenset(self.tokens)


@dataclass
class Corpus:
    lines: list[CorpusLine]
    source_id: str = ""

    @classmethod
    def from_lines(cls, texts, source_id: str = "") -> "Corpus":
        return cls(
            lines=[CorpusLine.from_text(t, i) for i, t in enumerate(texts)],
            source_id=source_id,
        )

    @classmethod
    def from_text(cls, text: str, source_id: str = "") -> "Corpus":
        return cls.from_lines([ln for ln in text.splitlines() if ln.strip()], source_id)

    @property
    def token_count(self) -> int:
        return sum(len(l.tokens) for l in self.lines)

    @property
    def types(self) -> frozenset[str]:
        out: set[str] = set()
        for l in self.lines:
            out.update(l.tokens)
        return frozenset(out)

    def __len__(self) -> int:
        return len(self.lines)


@dataclass(frozen=True)
class OverlapVocab:
    words: frozenset[str]

    @property
    def size(self) -> int:
        return len(self.words)


@dataclass
class CurationConfig:
    delta: float = 0.0
    top_k: int = 1000
    stopwords: frozenset[str] = field(default_factory=load_stopwords)
    target_fraction: float = 0.5
    max_iterations: int = 10
    # "tokens" penalizes by token counts with repetition; "distinct" by type counts.
    penalty_mode: str = "tokens"

    def __post_init__(self):
        if self.top_k < 1:
            raise ValueError(f"top_k must be >= 1, got {self.top_k}")
        if not 0.0 <= self.target_fraction <= 1.0:
            raise ValueError(f"target_fraction must lie in [0, 1], got {self.target_fraction}")
        if self.max_iterations < 1:
            raise ValueError(f"max_iterations must be >= 1, got {self.max_iterations}")
        if self.penalty_mode not in ("tokens", "distinct"):
            raise ValueError(f"penalty_mode must be tokens or distinct, got {self.penalty_mode!r}")


@dataclass(frozen=True)
class IterationStats:
    iteration: int
    lines_in: int
    lines_out: int
    tokens_out: int
    overlap_size: int


def top_frequent_vocab(c: Corpus, cfg: CurationConfig) -> OverlapVocab:
    """Top-k most frequent non-stopword word types; ties break lexicographically."""
    if not c.lines:
        raise DataError("top_frequent_vocab: empty corpus")
    counts = Counter()
    for line in c.lines:
        for tok in line.tokens:
            if tok not in cfg.stopwords:
                counts[tok] += 1
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return OverlapVocab(frozenset(w for w, _ in ranked[: cfg.top_k]))


def overlap(base: OverlapVocab, target: Corpus | CorpusLine) -> OverlapVocab:
    """Intersection of the base vocabulary with the target's word types."""
    return OverlapVocab(base.words & target.types)


def score_line(
    l: CorpusLine, w: OverlapVocab, c: Corpus, penalty_mode: str = "tokens"
) -> float:
    """Overlap contribution of a line minus its length penalty.

    score = |overlap(w, l)| / |w|  -  len(l) / len(c), where len counts
    tokens with repetition ("tokens" mode) or distinct types ("distinct").
    """
    if w.size == 0:
        raise DataError("score_line: empty overlap vocabulary")
    gain = len(w.words & l.types) / w.size
    if penalty_mode == "distinct":
        denom = len(c.types)
        numer = len(l.types)
    else:
        denom = c.token_count
        numer = len(l.tokens)
    if denom == 0:
        raise DataError("score_line: corpus has no tokens")
    return gain - numer / denom


def curate(
    coarse: Corpus, tqa_text: Corpus, cfg: CurationConfig
) -> tuple[Corpus, list[IterationStats]]:
    """Iteratively retain lines scoring above delta until the stop rule fires.

    Each iteration recomputes the overlap vocabulary between the reference
    text's top-k frequent words and the current corpus, scores every line
    against it, and keeps lines with score > delta. Stops at a fixed point,
    when the line count falls to target_fraction of the input, or after
    max_iterations. Returns the retained corpus and per-iteration stats.
    """
    if not coarse.lines or not tqa_text.lines:
        raise DataError("curate: both corpora must be non-empty")
    reference = top_frequent_vocab(tqa_text, cfg)
    target_lines = cfg.target_fraction * len(coarse.lines)
    current = coarse
    stats: list[IterationStats] = []
    for iteration in range(1, cfg.max_iterations + 1):
        w = overlap(reference, current)
        scores = [score_line(l, w, current, cfg.penalty_mode) for l in current.lines]
        retained = [l for l, s in zip(current.lines, scores) if s > cfg.delta]
        if iteration == 1 and not retained:
            raise DataError(
                f"curate: threshold too aggressive, no line retained "
                f"(delta={cfg.delta}, max score={max(scores):.6g})"
            )
        fixed_point = len(retained) == len(current.lines)
        current = Corpus(lines=retained, source_id=coarse.source_id)
        stats.append(
            IterationStats(
                iteration=iteration,
                lines_in=len(scores),
                lines_out=len(retained),
                tokens_out=current.token_count,
                overlap_size=w.size,
            )
        )
        if fixed_point or len(current.lines) <= target_lines:
            break
    return current, stats


# --------------------------------------------------------------------------
# File I/O
# --------------------------------------------------------------------------


def read_corpus(path, source_id: str | None = None) -> Corpus:
    """Read a one-line-per-candidate UTF-8 text file; leading '#' header lines skipped."""
    with open(path, encoding="utf-8") as fh:
        raw = fh.read().splitlines()
    body = list(raw)
    while body and body[0].startswith("#"):
        body.pop(0)
    return Corpus.from_lines(
        [ln for ln in body if ln.strip()], source_id if source_id is not None else str(path)
    )


def write_corpus(path, corpus: Corpus, header: str | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if header:
            fh.write(header if header.endswith("\n") else header + "\n")
        for line in corpus.lines:
            fh.write(line.text + "\n")


def write_report(path, stats: list[IterationStats], header: str | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if header:
            fh.write(header if header.endswith("\n") else header + "\n")
        writer = csv.writer(fh)
        writer.writerow(["iteration", "lines_in", "lines_out", "tokens_out", "overlap_size"])
        for s in stats:
            writer.writerow([s.iteration, s.lines_in, s.lines_out, s.tokens_out, s.overlap_size])
