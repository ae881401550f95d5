"""Span-masked pretraining example generation.

Masks contiguous token runs whose lengths follow a geometric distribution
truncated to [1, max_span], until 15% of the sequence is covered, then
replaces masked positions with the mask token / a random token / the
original at 80/10/10. Random-mask and whole-word-mask comparison modes
share the same budget and replacement machinery.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from math import ceil

import numpy as np

from .errors import DataError

LABEL_SENTINEL = -100

MODES = ("span", "random", "whole_word")


@dataclass(frozen=True)
class MaskPolicy:
    mode: str = "span"
    budget: float = 0.15
    geo_p: float = 0.2
    max_span: int = 10
    proportions: tuple[float, float, float] = (0.8, 0.1, 0.1)  # mask, random, keep

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 < self.budget < 1.0:
            raise ValueError(f"budget must lie in (0, 1), got {self.budget}")
        if not 0.0 < self.geo_p < 1.0:
            raise ValueError(f"geo_p must lie in (0, 1), got {self.geo_p}")
        if self.max_span < 1:
            raise ValueError(f"max_span must be >= 1, got {self.max_span}")
        if abs(sum(self.proportions) - 1.0) > 1e-12:
            raise ValueError(f"proportions must sum to 1, got {self.proportions}")


@dataclass
class MaskedExample:
    input_ids: np.ndarray
    labels: np.ndarray
    spans: list[tuple[int, int]]
    seed: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "input_ids": self.input_ids.tolist(),
                "labels": self.labels.tolist(),
                "spans": [list(s) for s in self.spans],
                "seed": self.seed,
            }
        )

    @classmethod
    def from_json(cls, line: str) -> "MaskedExample":
        obj = json.loads(line)
        return cls(
            input_ids=np.asarray(obj["input_ids"], dtype=np.int64),
            labels=np.asarray(obj["labels"], dtype=np.int64),
            spans=[tuple(s) for s in obj["spans"]],
            seed=int(obj["seed"]),
        )


@lru_cache(maxsize=32)
def _span_length_cdf(geo_p: float, max_span: int) -> tuple[float, ...]:
    # Geometric(p) pmf renormalized over support {1, ..., max_span}.
    pmf = np.array([geo_p * (1.0 - geo_p) ** (k - 1) for k in range(1, max_span + 1)])
    pmf /= pmf.sum()
    return tuple(np.cumsum(pmf))


def span_length_pmf(policy: MaskPolicy) -> np.ndarray:
    """Closed-form truncated-geometric pmf over {1, ..., max_span}."""
    cdf = np.array(_span_length_cdf(policy.geo_p, policy.max_span))
    return np.diff(cdf, prepend=0.0)


def sample_span_length(rng: np.random.Generator, policy: MaskPolicy) -> int:
    """Draw a span length from Geometric(geo_p) truncated to [1, max_span]."""
    cdf = _span_length_cdf(policy.geo_p, policy.max_span)
    u = rng.random()
    for k, c in enumerate(cdf, start=1):
        if u < c:
            return k
    return policy.max_span


def whole_word_spans(
    tokens, word_boundaries: list[tuple[int, int]] | None
) -> list[tuple[int, int]]:
    """Validate word boundaries as candidate whole-word spans.

    Boundaries must be disjoint, in bounds, and non-overlapping; each
    (start, length) pair names one word.
    """
    if word_boundaries is None:
        raise DataError("whole_word mode requires a word boundary map")
    n = len(tokens)
    seen = np.zeros(n, dtype=bool)
    spans: list[tuple[int, int]] = []
    for start, length in word_boundaries:
        if length < 1 or start < 0 or start + length > n:
            raise DataError(f"word boundary ({start}, {length}) out of bounds for length {n}")
        if seen[start : start + length].any():
            raise DataError(f"word boundary ({start}, {length}) overlaps another word")
        seen[start : start + length] = True
        spans.append((int(start), int(length)))
    return spans


def _place_spans(
    maskable: np.ndarray,
    target: int,
    next_length,
    rng: np.random.Generator,
    max_attempts: int = 100,
) -> list[tuple[int, int]]:
    """Place disjoint spans over maskable positions until target is covered.

    Starts are sampled uniformly over still-free maskable positions; spans
    are clamped at the sequence end. A span colliding with a special token
    or an already-masked position is resampled (fresh start, same length)
    rather than truncated into its neighbor; after max_attempts the free
    prefix from the last start is taken so progress is guaranteed.
    """
    n = maskable.size
    masked = np.zeros(n, dtype=bool)
    spans: list[tuple[int, int]] = []
    covered = 0
    while covered < target:
        length = next_length()
        free = np.flatnonzero(maskable & ~masked)
        start = end = -1
        for _ in range(max_attempts):
            start = int(free[rng.integers(free.size)])
            end = min(start + length, n)  # clamp at sequence end
            if maskable[start:end].all() and not masked[start:end].any():
                break
        else:
            end = start + 1
            limit = min(start + length, n)
            while end < limit and maskable[end] and not masked[end]:
                end += 1
        masked[start:end] = True
        spans.append((start, end - start))
        covered += end - start
    return spans


def mask_sequence(
    tokens,
    vocab,
    policy: MaskPolicy,
    seed: int,
    word_boundaries: list[tuple[int, int]] | None = None,
) -> MaskedExample:
    """Mask a token-id sequence according to the policy; deterministic per seed.

    Masks spans until coverage reaches ceil(budget * n) (the final span may
    overshoot), then assigns each masked position independently to
    mask/random/keep with the policy proportions. Special tokens are never
    masked.
    """
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim != 1:
        raise DataError("mask_sequence expects a flat token-id sequence")
    special = set(vocab.special_ids)
    maskable = ~np.isin(ids, list(special))
    n_maskable = int(maskable.sum())
    if n_maskable == 0:
        raise DataError("mask_sequence: nothing maskable (sequence is all special tokens)")
    n = ids.size
    target = min(ceil(policy.budget * n), n_maskable)
    rng = np.random.default_rng(seed)

    if policy.mode == "whole_word":
        words = whole_word_spans(ids, word_boundaries)
        words = [(s, l) for s, l in words if maskable[s : s + l].all()]
        if not words:
            raise DataError("mask_sequence: no maskable whole words")
        spans = []
        covered = 0
        for wi in rng.permutation(len(words)):
            if covered >= target:
                break
            s, l = words[wi]
            spans.append((s, l))
            covered += l
    else:
        if policy.mode == "span":
            next_length = lambda: sample_span_length(rng, policy)
        else:  # random mask: independent single positions
            next_length = lambda: 1
        spans = _place_spans(maskable, target, next_length, rng)

    input_ids = ids.copy()
    labels = np.full(n, LABEL_SENTINEL, dtype=np.int64)
    replaceable = vocab.non_special_ids
    p_mask, p_random, _ = policy.proportions
    for start, length in spans:
        for pos in range(start, start + length):
            labels[pos] = ids[pos]
            u = rng.random()
            if u < p_mask:
                input_ids[pos] = vocab.mask_id
            elif u < p_mask + p_random:
                input_ids[pos] = replaceable[rng.integers(len(replaceable))]
            # else: keep the original token
    return MaskedExample(input_ids=input_ids, labels=labels, spans=spans, seed=seed)


def reconstruct(example: MaskedExample) -> np.ndarray:
    """Write labels back over the spans; inverse of masking."""
    ids = example.input_ids.copy()
    for start, length in example.spans:
        ids[start : start + length] = example.labels[start : start + length]
    return ids


@dataclass
class MaskStats:
    """Aggregate empirical statistics over a batch of masked examples."""

    sequences: int = 0
    positions: int = 0
    masked: int = 0
    shown_mask: int = 0
    shown_random: int = 0
    shown_keep: int = 0
    span_lengths: dict[int, int] = field(default_factory=dict)

    def update(self, original, example: MaskedExample, mask_id: int) -> None:
        original = np.asarray(original)
        self.sequences += 1
        self.positions += original.size
        for start, length in example.spans:
            self.span_lengths[length] = self.span_lengths.get(length, 0) + 1
            for pos in range(start, start + length):
                self.masked += 1
                shown = example.input_ids[pos]
                if shown == mask_id:
                    self.shown_mask += 1
                elif shown == original[pos]:
                    self.shown_keep += 1
                else:
                    self.shown_random += 1

    def rows(self) -> list[tuple[str, float]]:
        out = [
            ("sequences", self.sequences),
            ("positions", self.positions),
            ("masked", self.masked),
            ("masked_fraction", self.masked / self.positions if self.positions else 0.0),
            ("shown_mask_fraction", self.shown_mask / self.masked if self.masked else 0.0),
            ("shown_random_fraction", self.shown_random / self.masked if self.masked else 0.0),
            ("shown_keep_fraction", self.shown_keep / self.masked if self.masked else 0.0),
        ]
        total_spans = sum(self.span_lengths.values())
        for length in sorted(self.span_lengths):
            out.append((f"span_len_{length}", self.span_lengths[length] / total_spans))
        return out
