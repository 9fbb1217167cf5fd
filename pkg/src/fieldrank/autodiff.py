"""Dense tensors with tape-based reverse-mode automatic differentiation.

All arithmetic is float64. Operations record their backward rule onto the
innermost active ``Tape`` (a context manager); with no active tape they are
plain forward computations, which is what inference uses. Gradients
accumulate additively into ``Tensor.grad`` when a tensor feeds several
consumers.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError


class Tensor:
    """A row-major float64 array plus a gradient slot."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def copy(self) -> "Tensor":
        out = Tensor(self.data.copy(), requires_grad=self.requires_grad)
        if self.grad is not None:
            out.grad = self.grad.copy()
        return out

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def constant(data) -> Tensor:
    """A tensor that never receives gradients (masks, fixed inputs)."""
    return Tensor(data, requires_grad=False)


class SparseVector:
    """Sparse vector over a fixed-dimensional space: unique indices, float values."""

    __slots__ = ("dim", "indices", "values")

    def __init__(self, dim: int, indices=(), values=()):
        self.dim = int(dim)
        idx = np.asarray(indices, dtype=np.int64).reshape(-1)
        val = np.asarray(values, dtype=np.float64).reshape(-1)
        if idx.shape != val.shape:
            raise ConfigError("SparseVector indices and values must have equal length")
        if idx.size:
            if idx.min() < 0 or idx.max() >= self.dim:
                raise ConfigError(f"SparseVector index out of range for dim {self.dim}")
            if np.unique(idx).size != idx.size:
                raise ConfigError("SparseVector indices must be unique")
        self.indices = idx
        self.values = val

    @classmethod
    def empty(cls, dim: int) -> "SparseVector":
        return cls(dim)

    @classmethod
    def from_entries(cls, dim: int, entries: Sequence[tuple[int, float]]) -> "SparseVector":
        if not entries:
            return cls(dim)
        idx, val = zip(*entries)
        return cls(dim, idx, val)

    @property
    def entries(self) -> list[tuple[int, float]]:
        return list(zip(self.indices.tolist(), self.values.tolist()))

    def is_empty(self) -> bool:
        return self.indices.size == 0

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.dim, dtype=np.float64)
        if self.indices.size:
            out[self.indices] = self.values
        return out

    def __repr__(self) -> str:
        return f"SparseVector(dim={self.dim}, nnz={self.indices.size})"


_TAPE_STACK: list["Tape"] = []


def active_tape() -> "Tape | None":
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tape:
    """Ordered record of operations; replaying it in reverse computes gradients."""

    def __init__(self):
        # each record: (output tensor, input tensors, backward callable taking out-grad)
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable[[np.ndarray], None]]] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> bool:
        _TAPE_STACK.pop()
        return False

    def __len__(self) -> int:
        return len(self._records)

    def record(self, output: Tensor, inputs: tuple[Tensor, ...],
               backward: Callable[[np.ndarray], None]) -> None:
        self._records.append((output, inputs, backward))

    def backward(self, loss: Tensor) -> None:
        """Seed d(loss)/d(loss) = 1 and propagate along the tape in reverse.

        Every requires_grad tensor that fed a recorded op ends up with a
        gradient; tensors on no path to the loss get an exact zero.
        """
        if loss.data.shape != ():
            raise ConfigError("backward requires a scalar loss")
        if self._consumed:
            raise RuntimeError("tape has already been replayed")
        if self._records and not any(out is loss for out, _, _ in self._records):
            raise ConfigError("loss tensor was not produced under this tape")
        self._consumed = True

        loss.grad = np.ones((), dtype=np.float64)
        for out, _, backward in reversed(self._records):
            if out.grad is not None:
                backward(out.grad)
        for _, inputs, _ in self._records:
            for t in inputs:
                if t.requires_grad and t.grad is None:
                    t.grad = np.zeros_like(t.data)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _emit(out_data: np.ndarray, inputs: tuple[Tensor, ...],
          backward: Callable[[np.ndarray], None]) -> Tensor:
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=requires)
    tape = active_tape()
    if tape is not None and requires:
        tape.record(out, inputs, backward)
    return out


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ConfigError(f"add shape mismatch: {a.data.shape} vs {b.data.shape}")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g)
        if b.requires_grad:
            _accumulate(b, g)

    return _emit(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ConfigError(f"sub shape mismatch: {a.data.shape} vs {b.data.shape}")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g)
        if b.requires_grad:
            _accumulate(b, -g)

    return _emit(a.data - b.data, (a, b), backward)


def add_n(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ConfigError("add_n requires at least one tensor")
    shape = parts[0].data.shape
    out_data = parts[0].data.copy()
    for p in parts[1:]:
        if p.data.shape != shape:
            raise ConfigError("add_n shape mismatch")
        out_data += p.data

    def backward(g):
        for p in parts:
            if p.requires_grad:
                _accumulate(p, g)

    return _emit(out_data, tuple(parts), backward)


def scale(x: Tensor, factor: float) -> Tensor:
    factor = float(factor)

    def backward(g):
        if x.requires_grad:
            _accumulate(x, factor * g)

    return _emit(x.data * factor, (x,), backward)


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ConfigError(f"hadamard shape mismatch: {a.data.shape} vs {b.data.shape}")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, b.data * g)
        if b.requires_grad:
            _accumulate(b, a.data * g)

    return _emit(a.data * b.data, (a, b), backward)


def tanh(x: Tensor) -> Tensor:
    out_data = np.tanh(x.data)

    def backward(g):
        if x.requires_grad:
            _accumulate(x, (1.0 - out_data * out_data) * g)

    return _emit(out_data, (x,), backward)


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), overflow-safe; derivative is the logistic sigmoid."""
    out_data = np.logaddexp(0.0, x.data)

    def backward(g):
        if x.requires_grad:
            sigmoid = 0.5 * (np.tanh(0.5 * x.data) + 1.0)
            _accumulate(x, sigmoid * g)

    return _emit(out_data, (x,), backward)


def concat(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ConfigError("concat requires at least one tensor")
    for p in parts:
        if p.data.ndim != 1:
            raise ConfigError("concat operates on 1-D tensors")
    sizes = [p.data.shape[0] for p in parts]
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                _accumulate(p, g[lo:hi])

    return _emit(np.concatenate([p.data for p in parts]), tuple(parts), backward)


def slice1d(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 1:
        raise ConfigError("slice1d operates on 1-D tensors")
    if not (0 <= start <= stop <= x.data.shape[0]):
        raise ConfigError(f"slice [{start}:{stop}] out of range for dim {x.data.shape[0]}")

    def backward(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[start:stop] = g
            _accumulate(x, gx)

    return _emit(x.data[start:stop].copy(), (x,), backward)


def stack(parts: Sequence[Tensor]) -> Tensor:
    """Stack equal-length 1-D tensors into a matrix, one row each."""
    if not parts:
        raise ConfigError("stack requires at least one tensor")
    dim = parts[0].data.shape
    for p in parts:
        if p.data.ndim != 1 or p.data.shape != dim:
            raise ConfigError("stack requires equal-length 1-D tensors")

    def backward(g):
        for i, p in enumerate(parts):
            if p.requires_grad:
                _accumulate(p, g[i])

    return _emit(np.stack([p.data for p in parts]), tuple(parts), backward)


def sum_rows(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ConfigError("sum_rows operates on 2-D tensors")

    def backward(g):
        if x.requires_grad:
            _accumulate(x, np.broadcast_to(g, x.data.shape).copy())

    return _emit(x.data.sum(axis=0), (x,), backward)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    if int(np.prod(shape, dtype=np.int64)) != x.data.size:
        raise ConfigError(f"cannot reshape {x.data.shape} to {shape}")

    def backward(g):
        if x.requires_grad:
            _accumulate(x, g.reshape(x.data.shape))

    return _emit(x.data.reshape(shape), (x,), backward)


def take_rows(x: Tensor, indices) -> Tensor:
    """Gather rows of a matrix; repeated rows accumulate gradient."""
    if x.data.ndim != 2:
        raise ConfigError("take_rows operates on 2-D tensors")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= x.data.shape[0]):
        raise ConfigError("take_rows index out of range")

    def backward(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.add.at(gx, idx, g)
            _accumulate(x, gx)

    return _emit(x.data[idx], (x,), backward)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2:
        raise ConfigError("slice_cols operates on 2-D tensors")
    if not (0 <= start <= stop <= x.data.shape[1]):
        raise ConfigError(f"column slice [{start}:{stop}] out of range")

    def backward(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[:, start:stop] = g
            _accumulate(x, gx)

    return _emit(x.data[:, start:stop].copy(), (x,), backward)


def hconcat(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate matrices with equal row counts along the column axis."""
    if not parts:
        raise ConfigError("hconcat requires at least one tensor")
    rows = parts[0].data.shape[0]
    for p in parts:
        if p.data.ndim != 2 or p.data.shape[0] != rows:
            raise ConfigError("hconcat requires 2-D tensors with equal row counts")
    widths = [p.data.shape[1] for p in parts]
    offsets = np.concatenate([[0], np.cumsum(widths)])

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                _accumulate(p, g[:, lo:hi])

    return _emit(np.concatenate([p.data for p in parts], axis=1), tuple(parts), backward)


def segment_mean_rows(x: Tensor, offsets, divisors) -> Tensor:
    """Mean of contiguous row segments; an empty segment yields an exact zero row.

    ``offsets`` has one more entry than there are segments and must cover all
    rows; ``divisors`` gives the denominator per segment (callers pass
    max(1, segment length) for masked averages).
    """
    if x.data.ndim != 2:
        raise ConfigError("segment_mean_rows operates on 2-D tensors")
    offs = np.asarray(offsets, dtype=np.int64)
    divs = np.asarray(divisors, dtype=np.float64)
    if offs.ndim != 1 or offs.size < 2 or divs.shape != (offs.size - 1,):
        raise ConfigError("need one divisor per segment")
    if offs[0] != 0 or offs[-1] != x.data.shape[0] or np.any(np.diff(offs) < 0):
        raise ConfigError("segment offsets must be nondecreasing and cover all rows")
    if np.any(divs <= 0):
        raise ConfigError("segment divisors must be positive")
    counts = np.diff(offs)
    recip = 1.0 / divs

    # empty segments occupy zero rows, so the starts of the nonempty segments
    # are exact reduceat boundaries; empty segments keep an exact zero row
    out_data = np.zeros((counts.size, x.data.shape[1]))
    nonempty = counts > 0
    if np.any(nonempty):
        out_data[nonempty] = np.add.reduceat(x.data, offs[:-1][nonempty], axis=0)
    out_data *= recip[:, None]

    def backward(g):
        if x.requires_grad:
            _accumulate(x, np.repeat(g * recip[:, None], counts, axis=0))

    return _emit(out_data, (x,), backward)


def matvec(x: Tensor, w: Tensor) -> Tensor:
    """Matrix times vector: [n, h] @ [h] -> [n]."""
    if x.data.ndim != 2 or w.data.ndim != 1 or x.data.shape[1] != w.data.shape[0]:
        raise ConfigError("matvec expects [n, h] @ [h]")

    def backward(g):
        if x.requires_grad:
            _accumulate(x, np.outer(g, w.data))
        if w.requires_grad:
            _accumulate(w, x.data.T @ g)

    return _emit(x.data @ w.data, (x, w), backward)


def add_scalar(x: Tensor, s: Tensor) -> Tensor:
    """Broadcast-add a scalar tensor to every element."""
    if s.data.shape != ():
        raise ConfigError("add_scalar expects a scalar second argument")

    def backward(g):
        if x.requires_grad:
            _accumulate(x, g)
        if s.requires_grad:
            _accumulate(s, np.asarray(g.sum()))

    return _emit(x.data + s.data, (x, s), backward)


def sum_all(x: Tensor) -> Tensor:
    def backward(g):
        if x.requires_grad:
            _accumulate(x, np.full_like(x.data, float(g)))

    return _emit(np.asarray(x.data.sum()), (x,), backward)


def vdot(a: Tensor, b: Tensor) -> Tensor:
    """Scalar dot product of two 1-D tensors."""
    if a.data.ndim != 1 or a.data.shape != b.data.shape:
        raise ConfigError("vdot requires equal-length 1-D tensors")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, float(g) * b.data)
        if b.requires_grad:
            _accumulate(b, float(g) * a.data)

    return _emit(np.asarray(a.data @ b.data), (a, b), backward)


# ---------------------------------------------------------------------------
# network ops
# ---------------------------------------------------------------------------

def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Affine map: rows of a matrix input are mapped independently."""
    in_dim, out_dim = weights.data.shape
    if bias.data.shape != (out_dim,):
        raise ConfigError("dense bias shape mismatch")
    if x.data.ndim == 1:
        if x.data.shape[0] != in_dim:
            raise ConfigError(f"dense input dim {x.data.shape[0]} != {in_dim}")
        out_data = x.data @ weights.data + bias.data

        def backward(g):
            if x.requires_grad:
                _accumulate(x, weights.data @ g)
            if weights.requires_grad:
                _accumulate(weights, np.outer(x.data, g))
            if bias.requires_grad:
                _accumulate(bias, g)

    elif x.data.ndim == 2:
        if x.data.shape[1] != in_dim:
            raise ConfigError(f"dense input dim {x.data.shape[1]} != {in_dim}")
        out_data = x.data @ weights.data + bias.data

        def backward(g):
            if x.requires_grad:
                _accumulate(x, g @ weights.data.T)
            if weights.requires_grad:
                _accumulate(weights, x.data.T @ g)
            if bias.requires_grad:
                _accumulate(bias, g.sum(axis=0))

    else:
        raise ConfigError("dense expects a 1-D or 2-D input")
    return _emit(out_data, (x, weights, bias), backward)


def conv1d(x: Tensor, weights: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """Valid 1-D convolution over rows, no implicit padding.

    out[p] = bias + sum over w of x[p*stride + w] @ weights[w]. A 3-D input
    [batch, seq, c_in] convolves every sequence in the batch.
    """
    if x.data.ndim not in (2, 3) or weights.data.ndim != 3:
        raise ConfigError("conv1d expects input [.., seq, c_in] and weights "
                          "[ws, c_in, c_out]")
    seq, c_in = x.data.shape[-2:]
    ws, w_cin, c_out = weights.data.shape
    if w_cin != c_in:
        raise ConfigError(f"conv1d channel mismatch: input {c_in}, weights {w_cin}")
    if bias.data.shape != (c_out,):
        raise ConfigError("conv1d bias shape mismatch")
    stride = int(stride)
    if stride < 1:
        raise ConfigError("conv1d stride must be positive")
    if seq < ws:
        raise ConfigError(f"conv1d input length {seq} shorter than window {ws}")
    out_seq = (seq - ws) // stride + 1
    span = (out_seq - 1) * stride + 1
    batched = x.data.ndim == 3

    def window(arr, w):
        return arr[:, w:w + span:stride, :] if batched else arr[w:w + span:stride]

    out_shape = (x.data.shape[0], out_seq, c_out) if batched else (out_seq, c_out)
    out_data = np.broadcast_to(bias.data, out_shape).copy()
    for w in range(ws):
        out_data += window(x.data, w) @ weights.data[w]

    def backward(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            for w in range(ws):
                window(gx, w)[...] += g @ weights.data[w].T
            _accumulate(x, gx)
        if weights.requires_grad:
            gw = np.empty_like(weights.data)
            for w in range(ws):
                rows = window(x.data, w)
                if batched:
                    gw[w] = np.tensordot(rows, g, axes=([0, 1], [0, 1]))
                else:
                    gw[w] = rows.T @ g
            _accumulate(weights, gw)
        if bias.requires_grad:
            axes = (0, 1) if batched else 0
            _accumulate(bias, g.sum(axis=axes))

    return _emit(out_data, (x, weights, bias), backward)


def pool(x: Tensor, kind: str, valid_rows: int | None = None) -> Tensor:
    """Column-wise max or mean over rows.

    ``valid_rows`` restricts pooling to the first rows (used when averaging
    should ignore padded positions). Max-pool backward routes all gradient to
    the first argmax row per column. A 3-D input [batch, seq, c] pools every
    sequence independently (fixed-length pooling only).
    """
    if x.data.ndim == 3:
        if valid_rows is not None:
            raise ConfigError("batched pool supports fixed-length pooling only")
        return _pool_batched(x, kind)
    if x.data.ndim != 2 or x.data.shape[0] < 1:
        raise ConfigError("pool expects a non-empty 2-D input")
    seq, c = x.data.shape
    n = seq if valid_rows is None else int(valid_rows)
    if not 1 <= n <= seq:
        raise ConfigError(f"pool valid_rows {n} out of range [1, {seq}]")
    region = x.data[:n]

    if kind == "max":
        arg = np.argmax(region, axis=0)  # first occurrence wins ties
        out_data = region[arg, np.arange(c)]

        def backward(g):
            if x.requires_grad:
                gx = np.zeros_like(x.data)
                gx[arg, np.arange(c)] = g
                _accumulate(x, gx)

    elif kind == "avg":
        out_data = region.sum(axis=0) / n

        def backward(g):
            if x.requires_grad:
                gx = np.zeros_like(x.data)
                gx[:n] = g / n
                _accumulate(x, gx)

    else:
        raise ConfigError(f"unknown pooling kind {kind!r}")
    return _emit(out_data, (x,), backward)


def _pool_batched(x: Tensor, kind: str) -> Tensor:
    if x.data.shape[1] < 1:
        raise ConfigError("pool expects at least one row per sequence")
    if kind == "max":
        arg = np.argmax(x.data, axis=1)  # [batch, c], first occurrence
        out_data = np.take_along_axis(x.data, arg[:, None, :], axis=1)[:, 0, :]

        def backward(g):
            if x.requires_grad:
                gx = np.zeros_like(x.data)
                np.put_along_axis(gx, arg[:, None, :], g[:, None, :], axis=1)
                _accumulate(x, gx)

    elif kind == "avg":
        n = x.data.shape[1]
        out_data = x.data.sum(axis=1) / n

        def backward(g):
            if x.requires_grad:
                _accumulate(x, np.repeat(g[:, None, :], n, axis=1) / n)

    else:
        raise ConfigError(f"unknown pooling kind {kind!r}")
    return _emit(out_data, (x,), backward)


def l2_normalize_rows(x: Tensor) -> Tensor:
    """Scale rows (last axis) to unit L2 norm; all-zero rows stay zero."""
    if x.data.ndim < 2:
        raise ConfigError("l2_normalize_rows expects at least a 2-D input")
    norms = np.linalg.norm(x.data, axis=-1, keepdims=True)
    safe = np.where(norms > 0.0, norms, 1.0)
    out_data = x.data / safe
    zero_rows = norms == 0.0

    def backward(g):
        if x.requires_grad:
            dots = np.sum(g * out_data, axis=-1, keepdims=True)
            gx = (g - dots * out_data) / safe
            gx = np.where(zero_rows, 0.0, gx)
            _accumulate(x, gx)

    return _emit(out_data, (x,), backward)


def sparse_embed(vectors: Sequence[SparseVector], embedding: Tensor) -> Tensor:
    """Multiply each sparse row against the embedding matrix.

    Row t is the sparse dot of vectors[t] against the embedding rows; an
    empty vector (padding) yields an all-zero row and contributes nothing to
    the embedding gradient.
    """
    if embedding.data.ndim != 2:
        raise ConfigError("embedding must be 2-D")
    n_rows, emb_dim = embedding.data.shape
    out_data = np.zeros((len(vectors), emb_dim), dtype=np.float64)
    for t, sv in enumerate(vectors):
        if sv.dim != n_rows:
            raise ConfigError(f"sparse dim {sv.dim} != embedding rows {n_rows}")
        if sv.indices.size:
            out_data[t] = sv.values @ embedding.data[sv.indices]

    def backward(g):
        if embedding.requires_grad:
            if embedding.grad is None:
                embedding.grad = np.zeros_like(embedding.data)
            for t, sv in enumerate(vectors):
                if sv.indices.size:
                    # indices are unique within a vector, so fancy += is safe
                    embedding.grad[sv.indices] += np.outer(sv.values, g[t])

    return _emit(out_data, (embedding,), backward)


def sparse_embed_packed(indices, values, token_counts, embedding: Tensor) -> Tensor:
    """Batched sparse embedding over flattened (index, value) runs.

    ``token_counts[t]`` entries of ``indices``/``values`` belong to token t,
    in order; a zero count is a padding token and yields an all-zero row with
    no gradient contribution. Equivalent to ``sparse_embed`` on the unpacked
    vectors, but one op for a whole batch.
    """
    if embedding.data.ndim != 2:
        raise ConfigError("embedding must be 2-D")
    idx = np.asarray(indices, dtype=np.int64)
    vals = np.asarray(values, dtype=np.float64)
    counts = np.asarray(token_counts, dtype=np.int64)
    if idx.shape != vals.shape or idx.ndim != 1:
        raise ConfigError("indices and values must be equal-length 1-D arrays")
    if counts.sum() != idx.size:
        raise ConfigError("token_counts must account for every entry")
    if idx.size and (idx.min() < 0 or idx.max() >= embedding.data.shape[0]):
        raise ConfigError("embedding index out of range")
    n_rows, emb_dim = embedding.data.shape
    n_tokens = counts.size

    out_data = np.zeros((n_tokens, emb_dim))
    if idx.size:
        gathered = embedding.data[idx] * vals[:, None]
        starts = np.concatenate([[0], np.cumsum(counts)])[:-1]
        # empty tokens occupy zero entries, so the starts of nonempty tokens
        # are exact reduceat boundaries; padding tokens keep exact zero rows
        nonempty = counts > 0
        out_data[nonempty] = np.add.reduceat(gathered, starts[nonempty], axis=0)

    def backward(g):
        if embedding.requires_grad and idx.size:
            if embedding.grad is None:
                embedding.grad = np.zeros_like(embedding.data)
            contrib = np.repeat(g, counts, axis=0) * vals[:, None]
            # group duplicate indices by sorting, then one fancy +=
            order = np.argsort(idx, kind="stable")
            sorted_idx = idx[order]
            firsts = np.concatenate([[True], sorted_idx[1:] != sorted_idx[:-1]])
            boundaries = np.flatnonzero(firsts)
            sums = np.add.reduceat(contrib[order], boundaries, axis=0)
            embedding.grad[sorted_idx[boundaries]] += sums

    return _emit(out_data, (embedding,), backward)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor],
               epsilon: float = 1e-5, coord_limit: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Compare tape gradients of ``f()`` against central finite differences.

    ``f`` must be deterministic and close over ``params``. Returns the max
    over checked coordinates of |analytic - numeric| / max(1, |numeric|).
    When ``coord_limit`` is set, parameters with more coordinates are checked
    at every coordinate with nonzero analytic gradient plus a random sample
    of the rest (needed for large embedding matrices).
    """
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
                for p in params]

    max_err = 0.0
    for p, full_grad in zip(params, analytic):
        flat_data = p.data.reshape(-1)
        flat_grad = full_grad.reshape(-1)
        n = flat_data.size
        if coord_limit is None or n <= coord_limit:
            coords = range(n)
        else:
            nonzero = np.flatnonzero(flat_grad)
            zero = np.setdiff1d(np.arange(n), nonzero)
            sampler = rng if rng is not None else np.random.default_rng(0)
            extra = sampler.choice(zero, size=min(coord_limit, zero.size), replace=False)
            coords = np.concatenate([nonzero, extra]).tolist()
        for i in coords:
            orig = flat_data[i]
            flat_data[i] = orig + epsilon
            f_plus = float(f().data)
            flat_data[i] = orig - epsilon
            f_minus = float(f().data)
            flat_data[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            err = abs(flat_grad[i] - numeric) / max(1.0, abs(numeric))
            if err > max_err:
                max_err = err
    return max_err
