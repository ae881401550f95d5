"""Background-context retrieval: three ranking strategies behind one interface.

IR scores sentences by TF-IDF cosine against the full query; NSP is the
same scorer driven by the question alone (a lexical stand-in for a trained
next-sentence ranker); NN ranks by hashed bag-of-words embedding cosine (a
stand-in for a trained nearest-neighbor retriever). Sentence vectors are
restricted to the query's term support, so adding sentences with zero
query overlap never perturbs the existing ranking.
"""

from __future__ import annotations

import json
import math
import re
import zlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tokenizer import split_words

STRATEGY_NAMES = ("IR", "NSP", "NN")

# Abbreviations whose trailing period does not end a sentence.
ABBREVIATIONS = frozenset(
    "fig figs eq eqs sec secs no nos vs etc al e.g i.e cf ca approx "
    "dr mr mrs ms prof st jr sr inc ltd co dept univ ed vol pp".split()
)

_BOUNDARY_RE = re.compile(r"([.!?]+)(\s+|$)")

_HASH_DIM = 256


def split_sentences(text: str) -> list[str]:
    """Split on sentence-final punctuation followed by whitespace.

    A period after a guarded abbreviation does not end the sentence; no
    empty sentences are produced.
    """
    sentences: list[str] = []
    start = 0
    for m in _BOUNDARY_RE.finditer(text):
        prefix = text[start : m.end(1)]
        word = re.findall(r"[A-Za-z][A-Za-z.]*", prefix[: m.start(1) - start])
        if word and word[-1].lower().rstrip(".") in ABBREVIATIONS:
            continue
        piece = prefix.strip()
        if piece:
            sentences.append(piece)
        start = m.end()
    tail = text[start:].strip()
    if tail:
        sentences.append(tail)
    return sentences


def _idf(df: int, n: int) -> float:
    return math.log((1.0 + n) / (1.0 + df)) + 1.0


def tfidf_scores(query_tokens: list[str], sentence_tokens: list[list[str]]) -> np.ndarray:
    """TF-IDF cosine on the query's term support.

    Document frequencies come from the sentence set; both the query vector
    and each sentence vector are built over the query terms only, so
    sentences without query terms score exactly zero and cannot disturb
    the ranking of sentences that do overlap.
    """
    n = len(sentence_tokens)
    if n == 0:
        return np.zeros(0)
    qcounts: dict[str, int] = {}
    for t in query_tokens:
        qcounts[t] = qcounts.get(t, 0) + 1
    if not qcounts:
        return np.zeros(n)
    terms = sorted(qcounts)
    sent_sets = [set(toks) for toks in sentence_tokens]
    df = {t: sum(1 for s in sent_sets if t in s) for t in terms}
    idf = {t: _idf(df[t], n) for t in terms}
    qvec = np.array([qcounts[t] * idf[t] for t in terms])
    qnorm = float(np.linalg.norm(qvec))
    scores = np.zeros(n)
    for i, toks in enumerate(sentence_tokens):
        counts: dict[str, int] = {}
        for t in toks:
            if t in qcounts:
                counts[t] = counts.get(t, 0) + 1
        if not counts:
            continue
        svec = np.array([counts.get(t, 0) * idf[t] for t in terms])
        snorm = float(np.linalg.norm(svec))
        scores[i] = float(qvec @ svec) / (qnorm * snorm)
    return scores


def _hashed_vector(tokens: list[str], dim: int = _HASH_DIM) -> np.ndarray:
    vec = np.zeros(dim)
    for t in tokens:
        h = zlib.crc32(t.encode("utf-8"))
        sign = 1.0 if (h >> 31) & 1 == 0 else -1.0
        vec[h % dim] += sign
    return vec


def hashed_embedding_scores(
    query_tokens: list[str], sentence_tokens: list[list[str]]
) -> np.ndarray:
    """Cosine between signed-hash bag-of-words embeddings."""
    qvec = _hashed_vector(query_tokens)
    qnorm = float(np.linalg.norm(qvec))
    scores = np.zeros(len(sentence_tokens))
    if qnorm == 0.0:
        return scores
    for i, toks in enumerate(sentence_tokens):
        svec = _hashed_vector(toks)
        snorm = float(np.linalg.norm(svec))
        if snorm > 0.0:
            scores[i] = float(qvec @ svec) / (qnorm * snorm)
    return scores


@dataclass(frozen=True)
class RetrievalStrategy:
    name: str
    scorer: Callable[[list[str], list[list[str]]], np.ndarray]


def strategy(name: str) -> RetrievalStrategy:
    key = name.upper()
    if key == "IR":
        return RetrievalStrategy("IR", tfidf_scores)
    if key == "NSP":
        return RetrievalStrategy("NSP", tfidf_scores)
    if key == "NN":
        return RetrievalStrategy("NN", hashed_embedding_scores)
    raise ValueError(f"unknown retrieval strategy {name!r}; use one of {STRATEGY_NAMES}")


@dataclass
class RankedContext:
    sentences: list[str]
    scores: list[float]
    token_budget: int

    @property
    def token_count(self) -> int:
        return sum(len(split_words(s)) for s in self.sentences)

    @property
    def text(self) -> str:
        return " ".join(self.sentences)

    def to_dict(self) -> dict:
        return {
            "sentences": self.sentences,
            "scores": self.scores,
            "token_budget": self.token_budget,
            "token_count": self.token_count,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def retrieve(
    query: str, lesson_text: str, strat: RetrievalStrategy, budget: int
) -> RankedContext:
    """Rank lesson sentences by the strategy and keep them within the budget.

    Sentences are ordered by score descending (ties by document order) and
    kept greedily until adding the next one would exceed the token budget.
    """
    if budget < 1:
        raise ValueError(f"budget must be >= 1, got {budget}")
    sentences = split_sentences(lesson_text)
    if not sentences:
        return RankedContext(sentences=[], scores=[], token_budget=budget)
    query_tokens = split_words(query)
    sent_tokens = [split_words(s) for s in sentences]
    scores = strat.scorer(query_tokens, sent_tokens)
    order = sorted(range(len(sentences)), key=lambda i: (-scores[i], i))
    kept: list[str] = []
    kept_scores: list[float] = []
    total = 0
    for i in order:
        t = len(sent_tokens[i])
        if total + t > budget:
            break
        kept.append(sentences[i])
        kept_scores.append(float(scores[i]))
        total += t
    return RankedContext(sentences=kept, scores=kept_scores, token_budget=budget)
