"""Gating model ensemble and the end-to-end prediction pipeline.

Three retrieval-variant features are blended with lambda weights, the
text-only and multimodal features are gated by mu, the gated feature's
leading row is scored per option, and the argmax option wins. Also houses
the full model parameter bundle and its binary persistence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, is_dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .errors import DataError, MocaError
from .numerics import Matrix, add, hconcat, linear, load_matrices, save_matrices, scale, take_row
from .cgma_engine import (
    CgmaParams,
    DiagramInput,
    EncoderParams,
    embed_patches,
    encode_ids,
    init_cgma,
    init_encoder,
    progressive_update,
    project_seq,
)
from .retrieval import RetrievalStrategy, strategy as make_strategy, retrieve
from .text_pipeline import QuestionRecord, Vocab, build_input, normalize_lso


@dataclass(frozen=True)
class EnsembleWeights:
    lambda1: float = 1.0 / 3.0
    lambda2: float = 1.0 / 3.0
    mu: float = 0.6

    def __post_init__(self):
        if not (0.0 <= self.lambda1 <= 1.0 and 0.0 <= self.lambda2 <= 1.0):
            raise DataError("lambda weights must lie in [0, 1]")
        if self.lambda1 + self.lambda2 > 1.0 + 1e-12:
            raise DataError("lambda1 + lambda2 must not exceed 1")
        if not 0.0 <= self.mu <= 1.0:
            raise DataError(f"mu must lie in [0, 1], got {self.mu}")

    @property
    def lambda3(self) -> float:
        return 1.0 - self.lambda1 - self.lambda2


@dataclass
class OptionScores:
    scores: list[float]
    probabilities: list[float]
    predicted_index: int


@dataclass
class ClassifierParams:
    w: Matrix  # d x 1
    b: Matrix  # 1 x 1


@dataclass
class MlmHead:
    w: Matrix  # d x vocab
    b: Matrix  # 1 x vocab


@dataclass
class ModelParams:
    config: RunConfig
    vocab: Vocab
    encoder: EncoderParams
    cgma: CgmaParams
    classifier: ClassifierParams
    mlm_head: MlmHead


def init_model(config: RunConfig, vocab: Vocab, seed: int | None = None) -> ModelParams:
    rng = np.random.default_rng(config.seed if seed is None else seed)
    d = config.d
    bound = 1.0 / math.sqrt(d)
    encoder = init_encoder(
        vocab.size, d, config.heads, config.encoder_blocks, rng, config.split_heads
    )
    cgma = init_cgma(
        d,
        config.heads,
        config.layers,
        config.patches,
        config.n,
        config.patch_dim,
        rng,
        config.split_heads,
    )
    classifier = ClassifierParams(
        w=Matrix(rng.uniform(-bound, bound, size=(d, 1))), b=Matrix.zeros(1, 1)
    )
    mlm_head = MlmHead(
        w=Matrix(rng.uniform(-bound, bound, size=(d, vocab.size))),
        b=Matrix.zeros(1, vocab.size),
    )
    return ModelParams(
        config=config,
        vocab=vocab,
        encoder=encoder,
        cgma=cgma,
        classifier=classifier,
        mlm_head=mlm_head,
    )


# --------------------------------------------------------------------------
# Parameter tree walking and persistence
# --------------------------------------------------------------------------


def named_parameters(model: ModelParams) -> list[tuple[str, Matrix]]:
    """Flatten the parameter tree into (dotted.path, Matrix) pairs, in order."""
    out: list[tuple[str, Matrix]] = []

    def walk(node, prefix: str) -> None:
        if isinstance(node, Matrix):
            out.append((prefix, node))
        elif is_dataclass(node) and not isinstance(node, (RunConfig, Vocab)):
            for f in fields(node):
                walk(getattr(node, f.name), f"{prefix}.{f.name}" if prefix else f.name)
        elif isinstance(node, list):
            for i, item in enumerate(node):
                walk(item, f"{prefix}.{i}")

    for f in fields(model):
        if f.name in ("config", "vocab"):
            continue
        walk(getattr(model, f.name), f.name)
    return out


def set_parameter(model: ModelParams, path: str, value: Matrix) -> None:
    parts = path.split(".")
    node = model
    for part in parts[:-1]:
        node = node[int(part)] if part.isdigit() else getattr(node, part)
    last = parts[-1]
    if last.isdigit():
        node[int(last)] = value
    else:
        old = getattr(node, last)
        if old.shape != value.shape:
            raise DataError(f"parameter {path}: shape {value.shape} != expected {old.shape}")
        setattr(node, last, value)


def save_model(model: ModelParams, path) -> None:
    save_matrices(path, named_parameters(model))


def load_model(config: RunConfig, vocab: Vocab, path) -> ModelParams:
    """Rebuild the model structure from config and fill it from a MOCA1 file."""
    model = init_model(config, vocab, seed=config.seed)
    stored = dict(load_matrices(path))
    expected = [name for name, _ in named_parameters(model)]
    missing = [n for n in expected if n not in stored]
    extra = [n for n in stored if n not in set(expected)]
    if missing or extra:
        raise DataError(
            f"parameter file does not match config: missing {missing[:3]}, extra {extra[:3]}"
        )
    for name in expected:
        set_parameter(model, name, stored[name])
    return model


# --------------------------------------------------------------------------
# Ensemble operations
# --------------------------------------------------------------------------


def combine_retrievals(
    f_ir: Matrix, f_nsp: Matrix, f_nn: Matrix, w: EnsembleWeights
) -> Matrix:
    """lambda1 * f_IR + lambda2 * f_NSP + (1 - lambda1 - lambda2) * f_NN."""
    if not f_ir.shape == f_nsp.shape == f_nn.shape:
        raise DataError("combine_retrievals requires identical shapes")
    return add(add(scale(f_ir, w.lambda1), scale(f_nsp, w.lambda2)), scale(f_nn, w.lambda3))


def gate(f_text: Matrix, f_mm: Matrix, mu: float) -> Matrix:
    """(1 - mu) * text feature + mu * multimodal feature."""
    if f_text.shape != f_mm.shape:
        raise DataError("gate requires equal shapes")
    if not 0.0 <= mu <= 1.0:
        raise DataError(f"mu must lie in [0, 1], got {mu}")
    return add(scale(f_text, 1.0 - mu), scale(f_mm, mu))


def option_score(feature: Matrix, clf: ClassifierParams) -> Matrix:
    """Pool the leading row and score it linearly; 1x1 matrix output."""
    return linear(take_row(feature, 0), clf.w, clf.b)


def option_score_matrix(features: list[Matrix], clf: ClassifierParams) -> Matrix:
    """All option scores as a 1 x n matrix on the active tape."""
    if not features:
        raise DataError("no option features to score")
    return hconcat([option_score(f, clf) for f in features])


def classify(features: list[Matrix], clf: ClassifierParams) -> OptionScores:
    """Scores, softmax probabilities, and argmax (ties to the lowest index)."""
    scores = option_score_matrix(features, clf).data[0]
    z = scores - scores.max()
    e = np.exp(z)
    probs = e / e.sum()
    return OptionScores(
        scores=[float(s) for s in scores],
        probabilities=[float(p) for p in probs],
        predicted_index=int(np.argmax(scores)),
    )


# --------------------------------------------------------------------------
# End-to-end prediction
# --------------------------------------------------------------------------


def _stage(name: str):
    class _StageContext:
        def __enter__(self):
            return self

        def __exit__(self, exc_type, exc, tb):
            if exc is not None and not isinstance(exc, MocaError):
                raise DataError(f"pipeline stage {name}: {exc}") from exc
            if isinstance(exc, MocaError) and not getattr(exc, "_staged", False):
                exc._staged = True
                exc.args = (f"pipeline stage {name}: {exc.args[0]}",) + exc.args[1:]
            return False

    return _StageContext()


def _strategy_query(strat: RetrievalStrategy, question: str, option: str) -> str:
    # NSP ranks by question alone; IR and NN see question + option.
    if strat.name == "NSP":
        return question
    return f"{question} {option}"


def _load_diagram(ref: str, base_dir: Path | None) -> DiagramInput:
    # References are .npy pixel grids (H x W or H x W x C).
    path = Path(ref)
    if base_dir is not None and not path.is_absolute():
        path = base_dir / path
    if not path.exists():
        raise DataError(f"diagram file not found: {path}")
    return DiagramInput(pixels=np.load(path))


def _diagram_feature(model: ModelParams, diagram: DiagramInput | None) -> Matrix:
    if diagram is None:
        return Matrix.zeros(model.config.n, model.config.d)
    patches = embed_patches(diagram, model.cgma, grid=model.config.grid)
    return project_seq(patches, model.cgma.align)


@dataclass
class OptionFeatures:
    """Per-option ensembled features, before the mu gate."""

    text: Matrix
    multimodal: Matrix | None


def option_features(
    record: QuestionRecord,
    model: ModelParams,
    weights: EnsembleWeights,
    diagram_dir: Path | None = None,
    allow_missing_id: bool = True,
    apply_lso: bool = True,
) -> list[OptionFeatures]:
    """Run retrieval x3, encoding, and (for diagram questions) the CGMA pass.

    Returns one ensembled text feature per option, plus the multimodal
    feature for diagram multiple-choice records.
    """
    cfg = model.config
    options = normalize_lso(record.options) if apply_lso else list(record.options)
    strategies = [make_strategy(n) for n in ("IR", "NSP", "NN")]
    multimodal = record.qtype == "DMC"

    f_qd = f_id = None
    if multimodal:
        with _stage("diagram"):
            if record.question_diagram is None:
                raise DataError(f"record {record.id}: DMC record without question diagram")
            qd = _load_diagram(record.question_diagram, diagram_dir)
            f_qd = _diagram_feature(model, qd)
            if record.instructional_diagrams:
                feats = [
                    _diagram_feature(model, _load_diagram(ref, diagram_dir))
                    for ref in record.instructional_diagrams
                ]
                stacked = feats[0]
                for f in feats[1:]:
                    stacked = add(stacked, f)
                f_id = scale(stacked, 1.0 / len(feats))
            elif allow_missing_id:
                f_id = Matrix.zeros(cfg.n, cfg.d)  # zero placeholder
            else:
                raise DataError(
                    f"record {record.id}: no instructional diagram; "
                    "pass allow_missing_id=True to use a zero placeholder"
                )

    out: list[OptionFeatures] = []
    for j, option in enumerate(options):
        text_feats: list[Matrix] = []
        mm_feats: list[Matrix] = []
        for strat in strategies:
            with _stage(f"retrieval[{strat.name}]"):
                ctx = retrieve(
                    _strategy_query(strat, record.question, option),
                    record.context,
                    strat,
                    cfg.retrieval_budget,
                )
            with _stage("encode"):
                seq = build_input(
                    record, j, model.vocab, cfg.n, context=ctx.text, option_text=option
                )
                f_text = encode_ids(seq.ids, seq.attention_mask, model.encoder)
            text_feats.append(f_text)
            if multimodal:
                with _stage("cgma"):
                    updated = progressive_update(f_text, f_qd, f_id, model.cgma)
                mm_feats.append(updated.instructional_diagram)
        with _stage("ensemble"):
            f_text_ens = combine_retrievals(*text_feats, weights)
            f_mm_ens = combine_retrievals(*mm_feats, weights) if multimodal else None
        out.append(OptionFeatures(text=f_text_ens, multimodal=f_mm_ens))
    return out


def predict(
    record: QuestionRecord,
    model: ModelParams,
    weights: EnsembleWeights,
    diagram_dir: Path | None = None,
    allow_missing_id: bool = True,
    apply_lso: bool = True,
) -> OptionScores:
    """Full pipeline: retrieval, encoding, CGMA gating, classification, argmax."""
    feats = option_features(
        record,
        model,
        weights,
        diagram_dir=diagram_dir,
        allow_missing_id=allow_missing_id,
        apply_lso=apply_lso,
    )
    with _stage("classify"):
        gated = [
            f.text if f.multimodal is None else gate(f.text, f.multimodal, weights.mu)
            for f in feats
        ]
        return classify(gated, model.classifier)


def gate_sweep(
    records: list[QuestionRecord],
    model: ModelParams,
    weights: EnsembleWeights,
    mu_values,
    diagram_dir: Path | None = None,
) -> list[tuple[float, float, int]]:
    """Accuracy per mu over the record set; features are computed once."""
    if not records:
        raise DataError("gate_sweep: empty evaluation set")
    mu_values = [float(m) for m in mu_values]
    for m in mu_values:
        if not 0.0 <= m <= 1.0:
            raise DataError(f"gate_sweep mu {m} outside [0, 1]")
    cached = []
    for record in records:
        if record.answer_index is None:
            raise DataError(f"record {record.id}: gate_sweep needs answer_index")
        cached.append((record, option_features(record, model, weights, diagram_dir)))
    rows = []
    for mu in mu_values:
        correct = 0
        for record, feats in cached:
            gated = [
                f.text if f.multimodal is None else gate(f.text, f.multimodal, mu)
                for f in feats
            ]
            if classify(gated, model.classifier).predicted_index == record.answer_index:
                correct += 1
        rows.append((mu, correct / len(records), len(records)))
    return rows
