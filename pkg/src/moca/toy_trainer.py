"""Desk-scale training loops for the masked-LM and multiple-choice objectives.

Plain SGD over the shared parameter store; the two objectives realize the
post-pretrain and fine-tune phases at toy scale and can be run in sequence
over the same parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError, NumericalError
from .numerics import Matrix, Tape, add, linear, masked_cross_entropy, scale
from .cgma_engine import encode_ids
from .gme import ModelParams, MlmHead, named_parameters, option_score_matrix, set_parameter
from .span_masker import LABEL_SENTINEL, MaskedExample
from .text_pipeline import QuestionRecord, build_input, normalize_lso


@dataclass
class TrainConfig:
    steps: int = 500
    batch_size: int = 8
    lr: float = 0.1
    seed: int = 0
    objective: str = "mlm"

    def __post_init__(self):
        if self.steps < 1:
            raise DataError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise DataError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr < 0:
            raise DataError(f"lr must be >= 0, got {self.lr}")
        if self.objective not in ("mlm", "mc"):
            raise DataError(f"objective must be mlm or mc, got {self.objective!r}")


@dataclass
class TrainResult:
    curve: list[float]
    model: ModelParams


def mlm_loss(encoded: Matrix, masked: MaskedExample, head: MlmHead) -> Matrix:
    """Mean cross-entropy over masked positions only."""
    if masked.labels.size != encoded.rows:
        raise DataError(
            f"label length {masked.labels.size} does not match encoder rows {encoded.rows}"
        )
    row_mask = masked.labels != LABEL_SENTINEL
    if not row_mask.any():
        raise DataError("mlm_loss: zero masked positions")
    logits = linear(encoded, head.w, head.b)
    labels = np.where(row_mask, masked.labels, 0)
    return masked_cross_entropy(logits, labels, row_mask)


def mc_loss(scores: Matrix, gold: int) -> Matrix:
    """Cross-entropy of softmax-over-options at the gold index."""
    if scores.rows != 1:
        raise DataError(f"mc_loss expects a 1 x n score row, got {scores.shape}")
    if not 0 <= gold < scores.cols:
        raise DataError(f"gold index {gold} out of range for {scores.cols} options")
    return masked_cross_entropy(scores, np.array([gold]), np.array([True]))


def _pad_example(example: MaskedExample, n: int, pad_id: int) -> MaskedExample:
    size = example.input_ids.size
    if size > n:
        raise DataError(f"masked example length {size} exceeds model length {n}")
    if size == n:
        return example
    ids = np.full(n, pad_id, dtype=np.int64)
    ids[:size] = example.input_ids
    labels = np.full(n, LABEL_SENTINEL, dtype=np.int64)
    labels[:size] = example.labels
    return MaskedExample(input_ids=ids, labels=labels, spans=example.spans, seed=example.seed)


def _mlm_example_loss(model: ModelParams, example: MaskedExample) -> Matrix:
    padded = _pad_example(example, model.config.n, model.vocab.pad_id)
    attn = (padded.input_ids != model.vocab.pad_id).astype(np.int64)
    encoded = encode_ids(padded.input_ids, attn, model.encoder)
    return mlm_loss(encoded, padded, model.mlm_head)


def _mc_example_scores(model: ModelParams, record: QuestionRecord) -> Matrix:
    # Training feeds the stored context directly; retrieval belongs to predict.
    options = normalize_lso(record.options)
    feats = []
    for j, option in enumerate(options):
        seq = build_input(record, j, model.vocab, model.config.n, option_text=option)
        feats.append(encode_ids(seq.ids, seq.attention_mask, model.encoder))
    return option_score_matrix(feats, model.classifier)


def _mc_example_loss(model: ModelParams, record: QuestionRecord) -> Matrix:
    if record.answer_index is None:
        raise DataError(f"record {record.id}: training requires answer_index")
    return mc_loss(_mc_example_scores(model, record), record.answer_index)


def mc_train_accuracy(model: ModelParams, records: list[QuestionRecord]) -> float:
    correct = 0
    for record in records:
        scores = _mc_example_scores(model, record).data[0]
        if int(np.argmax(scores)) == record.answer_index:
            correct += 1
    return correct / len(records)


def train(model: ModelParams, data: list, cfg: TrainConfig) -> TrainResult:
    """SGD over batches cycled in data order; deterministic for a fixed seed.

    data holds MaskedExample items for the mlm objective and QuestionRecord
    items for mc. Returns the per-step loss curve and the updated model.
    """
    if not data:
        raise DataError("train: empty dataset")
    example_loss = _mlm_example_loss if cfg.objective == "mlm" else _mc_example_loss
    curve: list[float] = []
    cursor = 0
    for step in range(cfg.steps):
        batch = [data[(cursor + i) % len(data)] for i in range(cfg.batch_size)]
        cursor = (cursor + cfg.batch_size) % len(data)
        with Tape() as tape:
            total = None
            for item in batch:
                loss = example_loss(model, item)
                total = loss if total is None else add(total, loss)
            batch_loss = scale(total, 1.0 / len(batch))
        value = batch_loss.item()
        if not math.isfinite(value):
            raise NumericalError(f"non-finite loss at step {step}")
        curve.append(value)
        if cfg.lr > 0:
            params = named_parameters(model)
            grads = tape.gradients(batch_loss, [m for _, m in params])
            for (path, m), g in zip(params, grads):
                set_parameter(model, path, Matrix(m.data - cfg.lr * g))
    return TrainResult(curve=curve, model=model)
