"""Dense float64 tensors with tape-based reverse-mode differentiation.

All learned blocks in this package are built from the primitives here.
A forward pass executed inside a ``GradientTape`` context records every
primitive once; ``gradients_of`` then replays the tape backward.  Outside
a tape context the same functions run as plain numpy forward code, which
is what evaluation rollouts use.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "GradientTape",
    "TapeError",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "bmatmul",
    "relu",
    "softmax_last",
    "row_softmax",
    "layer_norm",
    "set_max_pool",
    "segment_max_pool",
    "scatter_rows",
    "gather_rows",
    "reshape",
    "transpose",
    "concat",
    "slice_axis",
    "sum_all",
    "mean_all",
    "sum_axis",
    "conv1d",
    "upsample2",
    "gradients_of",
    "finite_diff_check",
]


class TapeError(RuntimeError):
    """Internal inconsistency in a gradient tape (e.g. a cycle)."""


class Tensor:
    """Immutable-by-convention wrapper around a float64 ndarray.

    Holds no graph structure itself; the active tape records op
    provenance separately, so tensors stay cheap to create and safe to
    share across threads that only read them.
    """

    __slots__ = ("data", "trainable", "name")

    def __init__(self, data, trainable: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.trainable = trainable
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.data.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_ACTIVE_TAPE: "GradientTape | None" = None


class _Record:
    __slots__ = ("out_id", "in_ids", "vjp", "refs")

    def __init__(self, out_id, in_ids, vjp, refs):
        self.out_id = out_id
        self.in_ids = in_ids
        self.vjp = vjp
        self.refs = refs  # pins tensors so ids stay unique for the tape's life


class GradientTape:
    """Ordered record of primitive ops for one forward pass.

    Node ids are assigned in creation order, so the record list is
    already topologically sorted; the backward sweep walks it once in
    reverse.  A tape is confined to one logical thread and never reused
    across forward passes.
    """

    def __init__(self):
        self._records: list[_Record] = []
        self._ids: dict[int, int] = {}
        self._next_id = 0

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise TapeError("a gradient tape is already active")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def node_id(self, t: Tensor) -> int:
        key = id(t)
        nid = self._ids.get(key)
        if nid is None:
            nid = self._next_id
            self._next_id += 1
            self._ids[key] = nid
        return nid

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp) -> None:
        in_ids = tuple(self.node_id(t) for t in inputs)
        out_id = self.node_id(out)
        self._records.append(_Record(out_id, in_ids, vjp, (out,) + inputs))

    def __len__(self):
        return len(self._records)


def _emit(out: Tensor, inputs: tuple[Tensor, ...], vjp_builder) -> Tensor:
    """Record an op on the active tape, if any.

    ``vjp_builder`` is called lazily only when recording, so the forward
    path outside a tape pays nothing for gradient bookkeeping.
    """
    tape = _ACTIVE_TAPE
    if tape is not None:
        tape.record(out, inputs, vjp_builder())
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcasted gradient back down to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, extent in enumerate(shape):
        if extent == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)

    def build():
        ash, bsh = a.shape, b.shape
        return lambda g: (_unbroadcast(g, ash), _unbroadcast(g, bsh))

    return _emit(out, (a, b), build)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)

    def build():
        ash, bsh = a.shape, b.shape
        return lambda g: (_unbroadcast(g, ash), _unbroadcast(-g, bsh))

    return _emit(out, (a, b), build)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)

    def build():
        ad, bd = a.data, b.data
        return lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape))

    return _emit(out, (a, b), build)


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(-a.data)
    return _emit(out, (a,), lambda: lambda g: (-g,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.maximum(a.data, 0.0))

    def build():
        mask = a.data > 0
        return lambda g: (g * mask,)

    return _emit(out, (a,), build)


# ---------------------------------------------------------------------------
# matrix products


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects rank-2 operands, got {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)

    def build():
        ad, bd = a.data, b.data
        return lambda g: (g @ bd.T, ad.T @ g)

    return _emit(out, (a, b), build)


def bmatmul(a, b) -> Tensor:
    """Stacked matmul over identical leading batch axes (no broadcasting)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 3 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"bmatmul shape mismatch: {a.shape} @ {b.shape}")
    out = Tensor(np.matmul(a.data, b.data))

    def build():
        ad, bd = a.data, b.data
        return lambda g: (
            np.matmul(g, bd.swapaxes(-1, -2)),
            np.matmul(ad.swapaxes(-1, -2), g),
        )

    return _emit(out, (a, b), build)


# ---------------------------------------------------------------------------
# normalization and softmax


def softmax_last(x) -> Tensor:
    """Numerically stable softmax over the last axis, any rank."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(s)

    def build():
        sd = s

        def vjp(g):
            dot = (g * sd).sum(axis=-1, keepdims=True)
            return (sd * (g - dot),)

        return vjp

    return _emit(out, (x,), build)


def row_softmax(m) -> Tensor:
    """Softmax applied independently to each row of a rank-2 tensor."""
    m = as_tensor(m)
    if m.ndim != 2:
        raise ValueError(f"row_softmax expects a rank-2 tensor, got shape {m.shape}")
    return softmax_last(m)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to mean 0 / variance 1, then apply affine."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise ValueError("layer_norm requires a non-empty last axis")
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(
            f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match last axis {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = Tensor(xhat * gain.data + bias.data)

    def build():
        gd = gain.data

        def vjp(g):
            ghat = g * gd
            m1 = ghat.mean(axis=-1, keepdims=True)
            m2 = (ghat * xhat).mean(axis=-1, keepdims=True)
            dx = (ghat - m1 - xhat * m2) * inv
            axes = tuple(range(g.ndim - 1))
            dgain = (g * xhat).sum(axis=axes)
            dbias = g.sum(axis=axes)
            return (dx, dgain, dbias)

        return vjp

    return _emit(out, (x, gain, bias), build)


# ---------------------------------------------------------------------------
# set pooling


def segment_max_pool(rows, starts: np.ndarray) -> Tensor:
    """Columnwise max over contiguous row segments.

    ``starts`` holds S+1 boundaries; segment s is rows[starts[s]:starts[s+1]].
    Gradient flows to the first argmax row of each segment and column.
    """
    rows = as_tensor(rows)
    if rows.ndim != 2:
        raise ValueError(f"segment_max_pool expects rank-2 rows, got {rows.shape}")
    starts = np.asarray(starts, dtype=np.int64)
    nseg = len(starts) - 1
    ncol = rows.shape[1]
    data = rows.data
    out = np.empty((nseg, ncol))
    argrows = np.empty((nseg, ncol), dtype=np.int64)
    for s in range(nseg):
        a, b = starts[s], starts[s + 1]
        if b <= a:
            raise ValueError(f"segment {s} is empty")
        seg = data[a:b]
        am = seg.argmax(axis=0)
        out[s] = seg[am, np.arange(ncol)]
        argrows[s] = am + a
    result = Tensor(out)

    def build():
        cols = np.broadcast_to(np.arange(ncol), (nseg, ncol))
        rshape = rows.shape

        def vjp(g):
            dr = np.zeros(rshape)
            np.add.at(dr, (argrows, cols), g)
            return (dr,)

        return vjp

    return _emit(result, (rows,), build)


def set_max_pool(rows) -> Tensor:
    """Element-wise maximum over all rows of a rank-2 tensor."""
    rows = as_tensor(rows)
    if rows.ndim != 2:
        raise ValueError(f"set_max_pool expects rank-2 input, got shape {rows.shape}")
    if rows.shape[0] == 0:
        raise ValueError("set_max_pool of an empty row set is undefined")
    pooled = segment_max_pool(rows, np.array([0, rows.shape[0]]))
    return reshape(pooled, (rows.shape[1],))


def scatter_rows(src, row_index: np.ndarray, out_rows: int) -> Tensor:
    """Place rows of ``src`` at the given (unique) row indices of a zero matrix."""
    src = as_tensor(src)
    row_index = np.asarray(row_index, dtype=np.int64)
    out = np.zeros((out_rows, src.shape[1]))
    out[row_index] = src.data
    result = Tensor(out)
    return _emit(result, (src,), lambda: lambda g: (g[row_index],))


def gather_rows(src, row_index: np.ndarray) -> Tensor:
    src = as_tensor(src)
    row_index = np.asarray(row_index, dtype=np.int64)
    result = Tensor(src.data[row_index])

    def build():
        shape = src.shape

        def vjp(g):
            ds = np.zeros(shape)
            np.add.at(ds, row_index, g)
            return (ds,)

        return vjp

    return _emit(result, (src,), build)


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data.reshape(shape))

    def build():
        orig = x.shape
        return lambda g: (g.reshape(orig),)

    return _emit(out, (x,), build)


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.ascontiguousarray(x.data.transpose(axes)))

    def build():
        inv = np.argsort(axes)
        return lambda g: (g.transpose(inv),)

    return _emit(out, (x,), build)


def concat(parts, axis: int) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))

    def build():
        sizes = [p.shape[axis] for p in parts]
        splits = np.cumsum(sizes)[:-1]
        return lambda g: tuple(np.split(g, splits, axis=axis))

    return _emit(out, tuple(parts), build)


def slice_axis(x, axis: int, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = Tensor(x.data[idx])

    def build():
        shape = x.shape

        def vjp(g):
            dx = np.zeros(shape)
            dx[idx] = g
            return (dx,)

        return vjp

    return _emit(out, (x,), build)


def sum_all(x) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data.sum())

    def build():
        shape = x.shape
        return lambda g: (np.broadcast_to(g, shape).copy(),)

    return _emit(out, (x,), build)


def mean_all(x) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data.mean())

    def build():
        shape = x.shape
        n = x.size
        return lambda g: (np.broadcast_to(g / n, shape).copy(),)

    return _emit(out, (x,), build)


def sum_axis(x, axis: int) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data.sum(axis=axis))

    def build():
        shape = x.shape
        ax = axis % x.ndim
        return lambda g: (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),)

    return _emit(out, (x,), build)


# ---------------------------------------------------------------------------
# 1-D convolution over the trailing axis


def conv1d(x, w, b, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of (B, Cin, L) with kernels (Cout, Cin, K) plus bias."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    bsz, cin, length = x.shape
    cout, cin_w, k = w.shape
    if cin != cin_w:
        raise ValueError(f"conv1d channel mismatch: input {cin} vs kernel {cin_w}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad))) if pad else x.data
    lout = (length + 2 * pad - k) // stride + 1
    windows = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)[:, :, ::stride]
    # (B, Cin, Lout, K) -> (B, Cin*K, Lout)
    cols = np.ascontiguousarray(windows.transpose(0, 1, 3, 2)).reshape(bsz, cin * k, lout)
    w2 = w.data.reshape(cout, cin * k)
    out = Tensor(np.matmul(w2, cols) + b.data[:, None])

    def build():
        lpad = length + 2 * pad

        def vjp(g):
            db = g.sum(axis=(0, 2))
            dw2 = np.einsum("bol,bil->oi", g, cols)
            dcols = np.matmul(w2.T, g).reshape(bsz, cin, k, lout)
            dxp = np.zeros((bsz, cin, lpad))
            for kk in range(k):
                dxp[:, :, kk : kk + stride * lout : stride] += dcols[:, :, kk, :]
            dx = dxp[:, :, pad : lpad - pad] if pad else dxp
            return (dx, dw2.reshape(cout, cin, k), db)

        return vjp

    return _emit(out, (x, w, b), build)


def upsample2(x) -> Tensor:
    """Nearest-neighbour doubling of the trailing axis of (B, C, L)."""
    x = as_tensor(x)
    out = Tensor(np.repeat(x.data, 2, axis=-1))

    def build():
        b, c, length = x.shape
        return lambda g: (g.reshape(b, c, length, 2).sum(axis=-1),)

    return _emit(out, (x,), build)


# ---------------------------------------------------------------------------
# backward pass and verification


def gradients_of(loss: Tensor, tape: GradientTape, params) -> dict[Tensor, np.ndarray]:
    """Gradient of a scalar loss with respect to each tensor in ``params``.

    Parameters that never entered the tape get zero gradients.  The tape
    is replayed strictly backward; an op whose output id does not exceed
    its input ids indicates a corrupted (cyclic) record.
    """
    if loss.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    params = list(params)
    acc: dict[int, np.ndarray] = {tape.node_id(loss): np.ones(loss.shape)}
    for rec in reversed(tape._records):
        if any(rec.out_id <= i for i in rec.in_ids):
            raise TapeError("tape record is not topologically ordered (cycle?)")
        g = acc.pop(rec.out_id, None)
        if g is None:
            continue
        for in_id, gin in zip(rec.in_ids, rec.vjp(g)):
            prev = acc.get(in_id)
            acc[in_id] = gin if prev is None else prev + gin
    out: dict[Tensor, np.ndarray] = {}
    for p in params:
        nid = tape._ids.get(id(p))
        g = acc.get(nid) if nid is not None else None
        out[p] = np.zeros(p.shape) if g is None else g
    return out


def finite_diff_check(f, at: Tensor, step: float = 1e-5) -> float:
    """Worst relative error between tape gradients and central differences.

    ``f`` maps a tensor to a scalar tensor and must be deterministic.
    The relative error denominator is max(|analytic|, |numeric|, 1e-8).
    """
    x = Tensor(np.array(at.data, copy=True), trainable=True)
    tape = GradientTape()
    with tape:
        y = f(x)
    analytic = gradients_of(y, tape, [x])[x]

    probe = np.array(at.data, copy=True)
    numeric = np.zeros_like(probe)
    flat = probe.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(Tensor(probe)).data)
        flat[i] = orig - step
        fm = float(f(Tensor(probe)).data)
        flat[i] = orig
        nflat[i] = (fp - fm) / (2.0 * step)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float((np.abs(analytic - numeric) / denom).max())
