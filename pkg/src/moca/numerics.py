"""Dense matrix kernel with forward operations and reverse-mode gradients.

Every learned transformation in this repo is built from the primitives in
this module. Matrices are immutable 2-D float arrays; a Tape records each
primitive applied while it is active and replays per-operation backward
rules in exact reverse order, accumulating gradients additively.

Reductions that feed attention outputs (softmax row sums and the
weights-times-values contraction) use an order-invariant summation so that
attention over a permuted key set reproduces bit-identical outputs.
"""

from __future__ import annotations

import math
import struct
from typing import Callable, Sequence

import numpy as np

from .errors import DataError, NumericalError

_DTYPE = np.float64

# Tanh-form GELU constants.
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715

# Finite stand-in for -inf in attention logits; exp() of it underflows to 0.
NEG_MASK_VALUE = -1.0e9


def set_precision(name: str) -> None:
    """Select the bulk dtype: "float64" (default) or "float32".

    Gradient checks require float64; the 32-bit mode exists only for
    throughput on large runs.
    """
    global _DTYPE
    if name == "float64":
        _DTYPE = np.float64
    elif name == "float32":
        _DTYPE = np.float32
    else:
        raise ValueError(f"unknown precision {name!r}; use float64 or float32")


def precision() -> str:
    return "float64" if _DTYPE == np.float64 else "float32"


class Matrix:
    """Immutable 2-D matrix. Rejects non-finite entries at construction."""

    __slots__ = ("data",)

    def __init__(self, data, dtype=None):
        arr = np.array(data, dtype=dtype or _DTYPE)
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise ValueError(f"Matrix requires 2-D data, got shape {arr.shape}")
        if arr.size and not np.isfinite(arr).all():
            raise NumericalError("non-finite entries rejected at Matrix construction")
        arr.setflags(write=False)
        self.data = arr

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @classmethod
    def zeros(cls, rows: int, cols: int) -> "Matrix":
        return cls(np.zeros((rows, cols), dtype=_DTYPE))

    @classmethod
    def eye(cls, n: int) -> "Matrix":
        return cls(np.eye(n, dtype=_DTYPE))

    @classmethod
    def full(cls, rows: int, cols: int, value: float) -> "Matrix":
        return cls(np.full((rows, cols), value, dtype=_DTYPE))

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() requires a 1x1 matrix, got {self.shape}")
        return float(self.data[0, 0])

    def __float__(self) -> float:
        return self.item()

    def __repr__(self) -> str:
        return f"Matrix({self.rows}x{self.cols})"


# --------------------------------------------------------------------------
# Gradient tape
# --------------------------------------------------------------------------

_TAPES: list["Tape"] = []


class Tape:
    """Records primitive operations for one computation (single-threaded).

    Each record holds the output matrix, its input matrices, and a backward
    closure mapping the output adjoint to per-input adjoints (None for
    non-differentiable inputs). Backward replay visits records in exact
    reverse order of recording and accumulates adjoints additively.
    """

    def __init__(self):
        self.records: list[tuple[Matrix, tuple[Matrix, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPES.pop()
        assert popped is self, "tapes must unwind in LIFO order"

    def gradients(self, loss: Matrix, params: Sequence[Matrix]) -> list[np.ndarray]:
        """d(loss)/d(param) for each param; zeros for params off the tape."""
        if loss.data.size != 1:
            raise ValueError(f"loss must be 1x1, got {loss.shape}")
        adjoint: dict[int, np.ndarray] = {id(loss): np.ones((1, 1), dtype=loss.data.dtype)}
        for out, inputs, backward in reversed(self.records):
            g = adjoint.get(id(out))
            if g is None:
                continue
            for inp, gi in zip(inputs, backward(g)):
                if gi is None:
                    continue
                acc = adjoint.get(id(inp))
                adjoint[id(inp)] = gi if acc is None else acc + gi
        return [
            adjoint.get(id(p), np.zeros(p.shape, dtype=p.data.dtype)).copy()
            for p in params
        ]


def _record(out: Matrix, inputs: tuple[Matrix, ...], backward: Callable) -> Matrix:
    if _TAPES:
        _TAPES[-1].records.append((out, inputs, backward))
    return out


# --------------------------------------------------------------------------
# Order-invariant reduction
# --------------------------------------------------------------------------

_SLICE_BITS = 38  # per-slice mantissa width; exact in-bin sums up to 2**14 addends
_SLICES = 3


def invariant_sum(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Sum along `axis` with a result independent of addend order.

    Each addend is split into fixed-width mantissa slices anchored at the
    axis maximum's binade. Slice values are exact multiples of a common
    ulp and their partial sums stay exactly representable, so any
    permutation of the addends produces bit-identical output. The
    discarded tail is below 2**-113 of the axis maximum.
    """
    x = np.moveaxis(np.asarray(x, dtype=np.float64), axis, -1)
    n = x.shape[-1]
    if n == 0:
        return np.zeros(x.shape[:-1])
    if n > (1 << 14):
        raise ValueError(f"invariant_sum supports up to {1 << 14} addends, got {n}")
    absmax = np.max(np.abs(x), axis=-1, keepdims=True)
    # Below this, slice granularity would go subnormal; fall back to exact fsum.
    if absmax.size and 0.0 < absmax.min() < 2.0**-900:
        flat = x.reshape(-1, n)
        out = np.array([math.fsum(row) for row in flat])
        return out.reshape(x.shape[:-1])
    with np.errstate(divide="ignore"):
        _, exp = np.frexp(absmax)  # absmax = f * 2**exp, f in [0.5, 1)
    residual = x
    total = np.zeros(x.shape[:-1])
    for j in range(_SLICES):
        t = exp - _SLICE_BITS * (j + 1)
        shift = np.ldexp(1.5, 52 + t)
        sliced = (residual + shift) - shift  # residual rounded to multiples of 2**t
        total = total + sliced.sum(axis=-1)  # exact: all partials representable
        residual = residual - sliced  # exact by construction
    return total


# --------------------------------------------------------------------------
# Primitive operations
# --------------------------------------------------------------------------


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Matrix product a @ b."""
    if a.cols != b.rows:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = Matrix(a.data @ b.data)

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _record(out, (a, b), backward)


def add(a: Matrix, b: Matrix) -> Matrix:
    """Elementwise sum; b may be a 1-row matrix broadcast over a's rows."""
    if a.shape != b.shape and not (b.rows == 1 and b.cols == a.cols):
        raise ValueError(f"add shape mismatch: {a.shape} + {b.shape}")
    out = Matrix(a.data + b.data)
    broadcast = b.shape != a.shape

    def backward(g):
        gb = g.sum(axis=0, keepdims=True) if broadcast else g
        return g, gb

    return _record(out, (a, b), backward)


def scale(a: Matrix, s: float) -> Matrix:
    """Multiply every entry by the scalar s."""
    out = Matrix(a.data * s)

    def backward(g):
        return (g * s,)

    return _record(out, (a,), backward)


def transpose(a: Matrix) -> Matrix:
    out = Matrix(a.data.T)

    def backward(g):
        return (g.T,)

    return _record(out, (a,), backward)


def hconcat(mats: Sequence[Matrix]) -> Matrix:
    """Concatenate along the feature axis."""
    if not mats:
        raise ValueError("hconcat of zero matrices")
    if len({m.rows for m in mats}) != 1:
        raise ValueError(f"hconcat row mismatch: {[m.shape for m in mats]}")
    out = Matrix(np.hstack([m.data for m in mats]))
    widths = [m.cols for m in mats]

    def backward(g):
        splits = np.cumsum(widths)[:-1]
        return tuple(np.hsplit(g, splits))

    return _record(out, tuple(mats), backward)


def softmax_rows(m: Matrix) -> Matrix:
    """Row-wise softmax, stabilized by row-max subtraction.

    Row normalizers use the order-invariant sum, so jointly permuting a
    row's entries permutes the output bit-exactly.
    """
    if m.data.size == 0:
        return Matrix(np.zeros(m.shape))
    z = m.data - m.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    denom = invariant_sum(e, axis=1)[:, None]
    out = Matrix(e / denom)
    s = out.data

    def backward(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _record(out, (m,), backward)


def attention_apply(weights: Matrix, values: Matrix) -> Matrix:
    """weights @ values with an order-invariant contraction.

    Used for the attention-weighted value sum: jointly permuting weight
    columns and value rows leaves the output bit-identical.
    """
    if weights.cols != values.rows:
        raise ValueError(f"attention_apply shape mismatch: {weights.shape} @ {values.shape}")
    prod = weights.data[:, :, None] * values.data[None, :, :]
    out = Matrix(invariant_sum(prod, axis=1))

    def backward(g):
        return g @ values.data.T, weights.data.T @ g

    return _record(out, (weights, values), backward)


def layer_norm(m: Matrix, gamma: Matrix, beta: Matrix, eps: float = 1e-5) -> Matrix:
    """Per-row normalization to mean 0 / variance 1, then affine scale+shift."""
    if eps <= 0:
        raise ValueError(f"layer_norm eps must be positive, got {eps}")
    d = m.cols
    if gamma.shape != (1, d) or beta.shape != (1, d):
        raise ValueError(
            f"layer_norm gamma/beta must be 1x{d}, got {gamma.shape} and {beta.shape}"
        )
    mu = m.data.mean(axis=1, keepdims=True)
    centered = m.data - mu
    var = (centered**2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = Matrix(xhat * gamma.data + beta.data)

    def backward(g):
        dxhat = g * gamma.data
        dvar = (dxhat * centered * -0.5 * inv**3).sum(axis=1, keepdims=True)
        dmu = (-dxhat * inv).sum(axis=1, keepdims=True) + dvar * (-2.0 / d) * centered.sum(
            axis=1, keepdims=True
        )
        dx = dxhat * inv + dvar * 2.0 * centered / d + dmu / d
        dgamma = (g * xhat).sum(axis=0, keepdims=True)
        dbeta = g.sum(axis=0, keepdims=True)
        return dx, dgamma, dbeta

    return _record(out, (m, gamma, beta), backward)


def linear(m: Matrix, w: Matrix, bias: Matrix) -> Matrix:
    """m @ w + broadcast bias; composed from verified primitives."""
    if m.cols != w.rows:
        raise ValueError(f"linear shape mismatch: {m.shape} @ {w.shape}")
    if bias.shape != (1, w.cols):
        raise ValueError(f"linear bias must be 1x{w.cols}, got {bias.shape}")
    return add(matmul(m, w), bias)


def gelu(m: Matrix) -> Matrix:
    """Tanh-form GELU activation."""
    x = m.data
    inner = _GELU_C * (x + _GELU_A * x**3)
    t = np.tanh(inner)
    out = Matrix(0.5 * x * (1.0 + t))

    def backward(g):
        sech2 = 1.0 - t**2
        dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * sech2 * dinner),)

    return _record(out, (m,), backward)


def msum(m: Matrix) -> Matrix:
    """Sum of all entries as a 1x1 matrix."""
    out = Matrix([[float(m.data.sum())]])

    def backward(g):
        return (np.full(m.shape, g[0, 0]),)

    return _record(out, (m,), backward)


def embed_rows(ids: np.ndarray, table: Matrix) -> Matrix:
    """Gather table rows by integer id; gradients scatter-add into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ValueError(f"embed_rows expects a 1-D id array, got shape {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.rows):
        raise DataError(
            f"token id out of range: max id {int(ids.max())} vs table rows {table.rows}"
        )
    out = Matrix(table.data[ids])

    def backward(g):
        gt = np.zeros(table.shape)
        np.add.at(gt, ids, g)
        return (gt,)

    return _record(out, (table,), backward)


def take_row(m: Matrix, index: int) -> Matrix:
    """Select one row as a 1xD matrix."""
    if not 0 <= index < m.rows:
        raise ValueError(f"row index {index} out of range for {m.shape}")
    out = Matrix(m.data[index : index + 1])

    def backward(g):
        gm = np.zeros(m.shape)
        gm[index] = g[0]
        return (gm,)

    return _record(out, (m,), backward)


def masked_cross_entropy(logits: Matrix, labels: np.ndarray, row_mask: np.ndarray) -> Matrix:
    """Mean cross-entropy of softmax(logits) rows selected by row_mask.

    labels holds the target column per row; rows with row_mask False are
    ignored entirely.
    """
    labels = np.asarray(labels, dtype=np.int64)
    row_mask = np.asarray(row_mask, dtype=bool)
    if labels.shape != (logits.rows,) or row_mask.shape != (logits.rows,):
        raise ValueError("labels and row_mask must be 1-D with one entry per logit row")
    sel = np.flatnonzero(row_mask)
    if sel.size == 0:
        raise DataError("masked_cross_entropy: no selected rows")
    if labels[sel].min() < 0 or labels[sel].max() >= logits.cols:
        raise DataError("label id out of range for logits width")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = -logp[sel, labels[sel]].mean()
    out = Matrix([[loss]])
    probs = np.exp(logp)

    def backward(g):
        gl = np.zeros(logits.shape)
        gl[sel] = probs[sel]
        gl[sel, labels[sel]] -= 1.0
        return (gl * (g[0, 0] / sel.size),)

    return _record(out, (logits,), backward)


# --------------------------------------------------------------------------
# Gradient checking
# --------------------------------------------------------------------------


def grad_check(
    fn: Callable[[list[Matrix]], Matrix],
    params: Sequence[Matrix],
    eps: float = 1e-5,
) -> float:
    """Compare tape gradients of fn(params) against central differences.

    Returns max over all parameter entries of
    |analytic - fd| / max(1, |fd|). fn must be deterministic and is
    re-evaluated without a tape for every perturbed entry.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"grad_check eps must lie in [1e-7, 1e-3], got {eps}")
    params = list(params)
    with Tape() as tape:
        loss = fn(params)
    if not math.isfinite(loss.item()):
        raise NumericalError("grad_check: non-finite loss at the base point")
    analytic = tape.gradients(loss, params)

    def eval_at(i: int, idx, value: float) -> float:
        arr = params[i].data.copy()
        arr[idx] = value
        probe = params.copy()
        probe[i] = Matrix(arr)
        v = fn(probe).item()
        if not math.isfinite(v):
            raise NumericalError(f"grad_check: non-finite loss perturbing parameter {i} at {idx}")
        return v

    max_err = 0.0
    for i, p in enumerate(params):
        for idx in np.ndindex(*p.shape):
            base = p.data[idx]
            fd = (eval_at(i, idx, base + eps) - eval_at(i, idx, base - eps)) / (2.0 * eps)
            err = abs(analytic[i][idx] - fd) / max(1.0, abs(fd))
            if err > max_err:
                max_err = err
    return max_err


# --------------------------------------------------------------------------
# Parameter persistence
# --------------------------------------------------------------------------

MAGIC = b"MOCA1"


def save_matrices(path, named: Sequence[tuple[str, Matrix]]) -> None:
    """Write named matrices in the MOCA1 binary format.

    Layout: magic "MOCA1", matrix count (u32 LE), then per matrix: name
    length (u32 LE), UTF-8 name, rows (u32 LE), cols (u32 LE), and
    rows*cols little-endian float64 values. Round-trips bit-exactly.
    """
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(named)))
        for name, m in named:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<II", m.rows, m.cols))
            fh.write(np.ascontiguousarray(m.data, dtype="<f8").tobytes())


def load_matrices(path) -> list[tuple[str, Matrix]]:
    """Read a MOCA1 parameter file; inverse of save_matrices."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(MAGIC)] != MAGIC:
        raise DataError(f"{path}: missing MOCA1 magic")
    offset = len(MAGIC)

    def take(n: int) -> bytes:
        nonlocal offset
        if offset + n > len(blob):
            raise DataError(f"{path}: truncated parameter file")
        chunk = blob[offset : offset + n]
        offset += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    out: list[tuple[str, Matrix]] = []
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        rows, cols = struct.unpack("<II", take(8))
        data = np.frombuffer(take(rows * cols * 8), dtype="<f8").reshape(rows, cols)
        out.append((name, Matrix(data.astype(np.float64))))
    if offset != len(blob):
        raise DataError(f"{path}: trailing bytes after last matrix")
    return out
