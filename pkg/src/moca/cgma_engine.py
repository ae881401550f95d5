"""Cross-guided multimodal attention.

Guided attention draws queries from the target feature and keys/values
from the guiding feature: softmax(Q K^T / sqrt(d)) V per head, heads
concatenated and projected, then residual + layer norm, feedforward, and a
second layer norm. A block runs L parallel layers over the same inputs and
projects their concatenation. The progressive update runs text<->question
diagram guidance on the original inputs, fuses the two results, and uses
the fusion to guide the instructional-diagram update.

Also provides the deterministic patch embedder, the patch-to-sequence
alignment projection, the toy text encoder built from the same blocks, and
attention-weight capture/interpolation for inspection dumps.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .numerics import (
    Matrix,
    NEG_MASK_VALUE,
    add,
    attention_apply,
    embed_rows,
    gelu,
    hconcat,
    layer_norm,
    linear,
    matmul,
    scale,
    softmax_rows,
    transpose,
)

FF_WIDTH_FACTOR = 4  # feedforward hidden width = 4 * d


@dataclass
class HeadParams:
    wq: Matrix
    wk: Matrix
    wv: Matrix


@dataclass
class LayerNormParams:
    gamma: Matrix
    beta: Matrix


@dataclass
class GuidedAttentionParams:
    heads: list[HeadParams]
    wh: Matrix  # (H * head_out) x d
    ln_attn: LayerNormParams
    ff_w1: Matrix
    ff_b1: Matrix
    ff_w2: Matrix
    ff_b2: Matrix
    ln_ff: LayerNormParams


@dataclass
class MultiLayerParams:
    layers: list[GuidedAttentionParams]
    wl: Matrix  # (L * d) x d


@dataclass
class CgmaParams:
    qd_block: MultiLayerParams    # question diagram guided by text
    text_block: MultiLayerParams  # text guided by question diagram
    id_block: MultiLayerParams    # instructional diagram guided by the fusion
    w_fuse: Matrix                # (2d) x d
    align: Matrix                 # P x N sequence alignment
    patch_w: Matrix               # patch_dim x d embedder
    patch_b: Matrix               # 1 x d


@dataclass
class EncoderParams:
    embed: Matrix  # vocab x d
    blocks: list[GuidedAttentionParams]


@dataclass
class DiagramInput:
    pixels: np.ndarray | None = None          # (H, W) or (H, W, C)
    patch_features: np.ndarray | None = None  # (P, patch_dim)

    def __post_init__(self):
        if (self.pixels is None) == (self.patch_features is None):
            raise DataError("DiagramInput needs exactly one of pixels or patch_features")


# --------------------------------------------------------------------------
# Initialization
# --------------------------------------------------------------------------


def _uniform(rng: np.random.Generator, rows: int, cols: int, bound: float) -> Matrix:
    return Matrix(rng.uniform(-bound, bound, size=(rows, cols)))


def init_guided_attention(
    d: int, heads: int, rng: np.random.Generator, split_heads: bool = False
) -> GuidedAttentionParams:
    """uniform(-1/sqrt(d), 1/sqrt(d)) weights, identity layer norms, zero biases.

    Each head runs at full width d by default (projection heads d x d and
    W_H of shape (H*d) x d); split_heads switches to the conventional d/H
    head width.
    """
    bound = 1.0 / math.sqrt(d)
    hw = d // heads if split_heads else d
    hidden = FF_WIDTH_FACTOR * d
    return GuidedAttentionParams(
        heads=[
            HeadParams(
                wq=_uniform(rng, d, hw, bound),
                wk=_uniform(rng, d, hw, bound),
                wv=_uniform(rng, d, hw, bound),
            )
            for _ in range(heads)
        ],
        wh=_uniform(rng, heads * hw, d, bound),
        ln_attn=LayerNormParams(gamma=Matrix(np.ones((1, d))), beta=Matrix.zeros(1, d)),
        ff_w1=_uniform(rng, d, hidden, bound),
        ff_b1=Matrix.zeros(1, hidden),
        ff_w2=_uniform(rng, hidden, d, bound),
        ff_b2=Matrix.zeros(1, d),
        ln_ff=LayerNormParams(gamma=Matrix(np.ones((1, d))), beta=Matrix.zeros(1, d)),
    )


def init_multi_layer(
    d: int, heads: int, layers: int, rng: np.random.Generator, split_heads: bool = False
) -> MultiLayerParams:
    return MultiLayerParams(
        layers=[init_guided_attention(d, heads, rng, split_heads) for _ in range(layers)],
        wl=_uniform(rng, layers * d, d, 1.0 / math.sqrt(d)),
    )


def init_cgma(
    d: int,
    heads: int,
    layers: int,
    patches: int,
    n: int,
    patch_dim: int,
    rng: np.random.Generator,
    split_heads: bool = False,
) -> CgmaParams:
    bound = 1.0 / math.sqrt(d)
    return CgmaParams(
        qd_block=init_multi_layer(d, heads, layers, rng, split_heads),
        text_block=init_multi_layer(d, heads, layers, rng, split_heads),
        id_block=init_multi_layer(d, heads, layers, rng, split_heads),
        w_fuse=_uniform(rng, 2 * d, d, bound),
        align=_uniform(rng, patches, n, 1.0 / math.sqrt(patches)),
        patch_w=_uniform(rng, patch_dim, d, 1.0 / math.sqrt(patch_dim)),
        patch_b=Matrix.zeros(1, d),
    )


def init_encoder(
    vocab_size: int, d: int, heads: int, blocks: int, rng: np.random.Generator,
    split_heads: bool = False,
) -> EncoderParams:
    return EncoderParams(
        embed=_uniform(rng, vocab_size, d, 1.0 / math.sqrt(d)),
        blocks=[init_guided_attention(d, heads, rng, split_heads) for _ in range(blocks)],
    )


# --------------------------------------------------------------------------
# Forward operations
# --------------------------------------------------------------------------


def guided_attention(
    target: Matrix,
    guide: Matrix,
    p: GuidedAttentionParams,
    key_mask: np.ndarray | None = None,
    capture: list[np.ndarray] | None = None,
) -> Matrix:
    """One multi-head guided-attention layer: target attends over guide.

    key_mask (1 = attend, 0 = ignore) pushes masked key logits to a large
    negative value whose softmax weight underflows to exactly zero. When
    `capture` is a list, each head's N x N weight matrix is appended.
    """
    if target.cols != guide.cols:
        raise DataError(f"feature width mismatch: target {target.shape}, guide {guide.shape}")
    mask_row = None
    if key_mask is not None:
        key_mask = np.asarray(key_mask, dtype=np.float64).reshape(1, -1)
        if key_mask.shape[1] != guide.rows:
            raise DataError("key_mask length must match guide rows")
        mask_row = Matrix((key_mask - 1.0) * -NEG_MASK_VALUE)
    head_outs = []
    for hp in p.heads:
        q = matmul(target, hp.wq)
        k = matmul(guide, hp.wk)
        v = matmul(guide, hp.wv)
        logits = scale(matmul(q, transpose(k)), 1.0 / math.sqrt(q.cols))
        if mask_row is not None:
            logits = add(logits, mask_row)
        weights = softmax_rows(logits)
        if capture is not None:
            capture.append(weights.data)
        head_outs.append(attention_apply(weights, v))
    attended = matmul(hconcat(head_outs), p.wh)
    normed = layer_norm(add(target, attended), p.ln_attn.gamma, p.ln_attn.beta)
    ff = linear(gelu(linear(normed, p.ff_w1, p.ff_b1)), p.ff_w2, p.ff_b2)
    return layer_norm(add(normed, ff), p.ln_ff.gamma, p.ln_ff.beta)


def multi_layer_block(
    target: Matrix,
    guide: Matrix,
    block: MultiLayerParams,
    key_mask: np.ndarray | None = None,
    capture: list[np.ndarray] | None = None,
) -> Matrix:
    """L parallel layers over the same (target, guide), concatenated and projected."""
    if not block.layers:
        raise DataError("multi_layer_block needs at least one layer")
    outs = [
        guided_attention(target, guide, lp, key_mask=key_mask, capture=capture)
        for lp in block.layers
    ]
    stacked = outs[0] if len(outs) == 1 else hconcat(outs)
    if stacked.cols != block.wl.rows:
        raise DataError(
            f"layer projection mismatch: {stacked.cols} features vs W_L {block.wl.shape}"
        )
    return matmul(stacked, block.wl)


@dataclass
class ProgressiveFeatures:
    text: Matrix
    question_diagram: Matrix
    instructional_diagram: Matrix
    fused: Matrix
    attention: dict[str, list[np.ndarray]] = field(default_factory=dict)


def progressive_update(
    f_t: Matrix,
    f_qd: Matrix,
    f_id: Matrix,
    params: CgmaParams,
    capture: bool = False,
) -> ProgressiveFeatures:
    """Two-stage progressive feature update.

    Stage one updates the question-diagram feature guided by text and the
    text feature guided by the question diagram, both reading the original
    inputs (order-independent). Their concatenation is projected into a
    fused guidance which drives the instructional-diagram update in stage
    two.
    """
    shapes = {f_t.shape, f_qd.shape, f_id.shape}
    if len(shapes) != 1:
        raise DataError(f"progressive_update needs equal shapes, got {sorted(shapes)}")
    caps: dict[str, list[np.ndarray]] = {"qd": [], "text": [], "id": []} if capture else {}
    f_qd2 = multi_layer_block(
        f_qd, f_t, params.qd_block, capture=caps.get("qd") if capture else None
    )
    f_t2 = multi_layer_block(
        f_t, f_qd, params.text_block, capture=caps.get("text") if capture else None
    )
    fused = matmul(hconcat([f_t2, f_qd2]), params.w_fuse)
    f_id2 = multi_layer_block(
        f_id, fused, params.id_block, capture=caps.get("id") if capture else None
    )
    return ProgressiveFeatures(
        text=f_t2,
        question_diagram=f_qd2,
        instructional_diagram=f_id2,
        fused=fused,
        attention=caps,
    )


def embed_patches(diagram: DiagramInput, params: CgmaParams, grid: int = 14) -> Matrix:
    """Flatten each grid cell and embed it linearly; rows in row-major grid order."""
    if diagram.patch_features is not None:
        flat = np.asarray(diagram.patch_features, dtype=np.float64)
        if flat.ndim != 2:
            raise DataError("patch_features must be 2-D (patches x patch_dim)")
    else:
        img = np.asarray(diagram.pixels, dtype=np.float64)
        if img.ndim == 2:
            img = img[:, :, None]
        if img.ndim != 3:
            raise DataError(f"pixel grid must be HxW or HxWxC, got shape {img.shape}")
        h, w, c = img.shape
        if h % grid or w % grid:
            raise DataError(
                f"image {h}x{w} not divisible into a {grid}x{grid} grid; "
                f"resize to multiples of {grid}"
            )
        ph, pw = h // grid, w // grid
        flat = (
            img.reshape(grid, ph, grid, pw, c)
            .transpose(0, 2, 1, 3, 4)
            .reshape(grid * grid, ph * pw * c)
        )
    if flat.shape[1] != params.patch_w.rows:
        raise DataError(
            f"patch dim {flat.shape[1]} does not match embedder input {params.patch_w.rows}"
        )
    return linear(Matrix(flat), params.patch_w, params.patch_b)


def project_seq(f: Matrix, align: Matrix) -> Matrix:
    """align^T @ f: map P patch rows onto the N-token sequence axis."""
    if f.rows != align.rows:
        raise DataError(f"project_seq mismatch: features {f.shape} vs align {align.shape}")
    return matmul(transpose(align), f)


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    """Standard fixed sine/cosine position table."""
    pos = np.arange(n)[:, None].astype(np.float64)
    div = np.exp(np.arange(0, d, 2) * (-math.log(10000.0) / d))
    table = np.zeros((n, d))
    table[:, 0::2] = np.sin(pos * div)
    table[:, 1::2] = np.cos(pos * div)[:, : d // 2]
    return table


def encode_ids(
    ids: np.ndarray,
    attention_mask: np.ndarray,
    enc: EncoderParams,
    capture: list[np.ndarray] | None = None,
) -> Matrix:
    """Token embedding + positions, then self-attention blocks with pad masking."""
    ids = np.asarray(ids, dtype=np.int64)
    x = embed_rows(ids, enc.embed)
    x = add(x, Matrix(sinusoidal_positions(ids.size, enc.embed.cols)))
    for block in enc.blocks:
        x = guided_attention(x, x, block, key_mask=attention_mask, capture=capture)
    return x


def encode_text(seq, enc: EncoderParams, capture: list[np.ndarray] | None = None) -> Matrix:
    """Encode a built TokenSeq into an N x d feature."""
    return encode_ids(seq.ids, seq.attention_mask, enc, capture=capture)


# --------------------------------------------------------------------------
# Parameter-tree flattening and the block gradient check
# --------------------------------------------------------------------------


def flatten_matrices(node) -> list[Matrix]:
    """Collect Matrix leaves from a dataclass/list tree in field order."""
    from dataclasses import fields, is_dataclass

    out: list[Matrix] = []
    if isinstance(node, Matrix):
        out.append(node)
    elif is_dataclass(node):
        for f in fields(node):
            out.extend(flatten_matrices(getattr(node, f.name)))
    elif isinstance(node, (list, tuple)):
        for item in node:
            out.extend(flatten_matrices(item))
    return out


def rebuild_with(node, values):
    """Rebuild a dataclass/list tree with Matrix leaves drawn from `values`."""
    from dataclasses import fields, is_dataclass

    if isinstance(node, Matrix):
        return next(values)
    if is_dataclass(node):
        return type(node)(**{f.name: rebuild_with(getattr(node, f.name), values) for f in fields(node)})
    if isinstance(node, list):
        return [rebuild_with(item, values) for item in node]
    if isinstance(node, tuple):
        return tuple(rebuild_with(item, values) for item in node)
    return node


def progressive_grad_check(
    n: int, d: int, heads: int, layers: int, seed: int, eps: float = 1e-5
) -> float:
    """Central-difference check of the full progressive update.

    Loss is the sum of the three updated features; parameters are every
    matrix in the three guided-attention blocks plus the fusion projection.
    Returns the max relative error.
    """
    from .numerics import grad_check, msum

    rng = np.random.default_rng(seed)
    params = init_cgma(d, heads, layers, patches=n, n=n, patch_dim=d, rng=rng)
    f_t = Matrix(rng.standard_normal((n, d)))
    f_qd = Matrix(rng.standard_normal((n, d)))
    f_id = Matrix(rng.standard_normal((n, d)))
    checked = (params.qd_block, params.text_block, params.id_block, params.w_fuse)
    flat = flatten_matrices(checked)

    def fn(ps: list[Matrix]) -> Matrix:
        qd_block, text_block, id_block, w_fuse = rebuild_with(checked, iter(ps))
        probe = CgmaParams(
            qd_block=qd_block,
            text_block=text_block,
            id_block=id_block,
            w_fuse=w_fuse,
            align=params.align,
            patch_w=params.patch_w,
            patch_b=params.patch_b,
        )
        upd = progressive_update(f_t, f_qd, f_id, probe)
        return add(
            add(msum(upd.text), msum(upd.question_diagram)),
            msum(upd.instructional_diagram),
        )

    return grad_check(fn, flat, eps)


# --------------------------------------------------------------------------
# Attention inspection
# --------------------------------------------------------------------------


def interpolate_axis(grid_weights: np.ndarray, new_len: int, axis: int = 1) -> np.ndarray:
    """Linearly interpolate an attention grid along one axis, renormalizing rows.

    Equal source and target lengths return the grid unchanged.
    """
    grid_weights = np.asarray(grid_weights, dtype=np.float64)
    old_len = grid_weights.shape[axis]
    if new_len == old_len:
        return grid_weights.copy()
    if new_len < 1 or old_len < 1:
        raise ValueError("interpolation lengths must be positive")
    moved = np.moveaxis(grid_weights, axis, 0)
    if old_len == 1:
        out = np.repeat(moved, new_len, axis=0)
    else:
        x = np.arange(new_len) * (old_len - 1) / (new_len - 1)
        lo = np.floor(x).astype(int)
        hi = np.minimum(lo + 1, old_len - 1)
        frac = (x - lo)[:, None]
        out = moved[lo] * (1.0 - frac) + moved[hi] * frac
    out = np.moveaxis(out, 0, axis)
    sums = out.sum(axis=1, keepdims=True)
    sums[sums == 0.0] = 1.0
    return out / sums


def dump_attention(
    captured: list[np.ndarray],
    path,
    interpolate_to: int | None = None,
    axis: int = 1,
    header: str | None = None,
) -> int:
    """Write per-head attention weights as CSV (head, query_index, key_index, weight).

    Optionally interpolates each grid along `axis` to `interpolate_to`
    entries (e.g. back to the 196-patch grid). Returns the row count.
    """
    if not captured:
        raise DataError("dump_attention: no attention weights captured; run a forward pass")
    rows = 0
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if header:
            fh.write(header if header.endswith("\n") else header + "\n")
        writer = csv.writer(fh)
        writer.writerow(["head", "query_index", "key_index", "weight"])
        for head, grid_weights in enumerate(captured):
            g = grid_weights
            if interpolate_to is not None:
                g = interpolate_axis(g, interpolate_to, axis=axis)
            for qi in range(g.shape[0]):
                for ki in range(g.shape[1]):
                    writer.writerow([head, qi, ki, repr(float(g[qi, ki]))])
                    rows += 1
    return rows
