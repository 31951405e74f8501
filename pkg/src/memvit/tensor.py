"""Dense tensor arithmetic with tape-based reverse-mode autodiff.

The op set is exactly what a transformer encoder needs: linear maps,
masked softmax, layer norm, GELU, token-axis surgery, and a classification
loss. Arrays are contiguous row-major numpy buffers in a single float
precision per run (float32 for training, float64 for gradient checking).

Two conventions matter for reproducibility and are relied on elsewhere:

* Reductions whose operand sets can change between runs (softmax
  normalization, log-sum-exp) accumulate sequentially over the last axis
  (via ``cumsum``). A sequential sum is bit-invariant under insertion of
  exact zeros, which is what makes mask exclusion exact rather than
  approximate.
* Masked-out softmax positions are excluded from the reduction entirely,
  never approximated with a large negative constant: a denied key gets
  weight +0.0 and contributes nothing, bit for bit, to the normalizer.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Tape",
    "tensor",
    "add",
    "add_bias",
    "mul",
    "scale",
    "sum_all",
    "matmul",
    "transpose_last2",
    "concat_tokens",
    "truncate_tokens",
    "split_tokens",
    "split_last",
    "slice_last",
    "gather_tokens",
    "split_heads",
    "merge_heads",
    "tile_leading",
    "drop_token_axis",
    "layernorm",
    "gelu",
    "softmax_masked",
    "cross_entropy_logits",
    "backward",
]

FLOAT_DTYPES = (np.float32, np.float64)

# Debug switch: validate finiteness of every op output. Off by default
# because it adds a full pass over each array; the trainer checks the loss
# and gradients instead.
CHECK_FINITE = False


class Tensor:
    """A dense row-major float array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_owns_grad")

    def __init__(self, data: np.ndarray, requires_grad: bool = False, name: str = "",
                 _alloc_grad: bool = False):
        if data.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
            raise TypeError(f"tensor dtype must be float32 or float64, got {data.dtype}")
        # ascontiguousarray would promote 0-d losses to 1-d; only copy when needed.
        self.data = data if data.flags["C_CONTIGUOUS"] else np.ascontiguousarray(data)
        self.requires_grad = requires_grad
        # Leaves get an eager grad buffer; intermediates allocate lazily in
        # accumulate_grad so dead branches cost nothing during backward.
        self.grad: np.ndarray | None = (
            np.zeros_like(self.data) if (requires_grad and _alloc_grad) else None
        )
        self._owns_grad = self.grad is not None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def zero_grad(self) -> None:
        if self.grad is not None:
            if not self._owns_grad:
                self.grad = np.zeros_like(self.data)
                self._owns_grad = True
            else:
                self.grad[...] = 0.0

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def copy(self) -> "Tensor":
        t = Tensor(self.data.copy(), requires_grad=self.requires_grad, name=self.name)
        if self.grad is not None:
            t.grad = self.grad.copy()
        return t

    def accumulate_grad(self, g: np.ndarray) -> None:
        # First contribution borrows the buffer (safe: upstream grads are
        # final by reverse-topological order); later ones copy-then-add so
        # a buffer shared between siblings is never mutated in place.
        if self.grad is None:
            self.grad = g
            self._owns_grad = False
        elif not self._owns_grad:
            self.grad = self.grad + g
            self._owns_grad = True
        else:
            self.grad += g

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad}{tag})"


def tensor(data, requires_grad: bool = False, dtype=np.float32, name: str = "") -> Tensor:
    """Create a leaf tensor from array-like data."""
    arr = np.asarray(data, dtype=dtype)
    return Tensor(arr, requires_grad=requires_grad, name=name, _alloc_grad=requires_grad)


class _Node:
    __slots__ = ("out", "backward_fn")

    def __init__(self, out: Tensor, backward_fn: Callable[[np.ndarray], None]):
        self.out = out
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, so the list is topologically
    sorted by construction. A tape supports exactly one backward pass;
    re-running backward without re-recording raises.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def record(self, out: Tensor, backward_fn: Callable[[np.ndarray], None]) -> None:
        self.nodes.append(_Node(out, backward_fn))

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self


_TAPE_STACK: list[Tape] = []


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _finish(out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap an op result, recording it on the active tape when gradients are needed."""
    if CHECK_FINITE and not np.all(np.isfinite(out_data)):
        raise FloatingPointError("non-finite values in op output")
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    tape = _active_tape()
    if tape is not None and needs:
        tape.record(out, backward_fn)
    return out


def _check_same_dtype(*tensors: Tensor) -> np.dtype:
    dt = tensors[0].data.dtype
    for t in tensors[1:]:
        if t.data.dtype != dt:
            raise TypeError(f"mixed precisions in one op: {dt} vs {t.data.dtype}")
    return dt


def _seq_sum_last(x: np.ndarray, keepdims: bool = False) -> np.ndarray:
    """Strictly sequential left-to-right sum over the last axis."""
    if x.shape[-1] == 0:
        return np.zeros(x.shape[:-1] + ((1,) if keepdims else ()), dtype=x.dtype)
    out = np.cumsum(x, axis=-1)[..., -1:]
    return out if keepdims else out[..., 0]


# ---------------------------------------------------------------------------
# Elementwise and reduction ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors."""
    _check_same_dtype(a, b)
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")

    def bw(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g)

    return _finish(a.data + b.data, (a, b), bw)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a 1-D bias over the last axis of ``x``."""
    _check_same_dtype(x, b)
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ValueError(f"bias shape {b.shape} does not match feature dim of {x.shape}")

    def bw(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g.reshape(-1, g.shape[-1]).sum(axis=0))

    return _finish(x.data + b.data, (x, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of two same-shape tensors."""
    _check_same_dtype(a, b)
    if a.shape != b.shape:
        raise ValueError(f"mul shape mismatch: {a.shape} vs {b.shape}")

    def bw(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(g * b.data)
        if b.requires_grad:
            b.accumulate_grad(g * a.data)

    return _finish(a.data * b.data, (a, b), bw)


def scale(x: Tensor, s: float) -> Tensor:
    """Multiply by a python scalar constant."""
    c = x.data.dtype.type(s)

    def bw(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate_grad(g * c)

    return _finish(x.data * c, (x,), bw)


def sum_all(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""

    def bw(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate_grad(np.full_like(x.data, g))

    return _finish(np.asarray(x.data.sum(), dtype=x.data.dtype), (x,), bw)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product ``a @ b``.

    ``a`` is ``[..., M, K]``; ``b`` is either ``[K, N]`` (shared weight) or
    ``[..., K, N]`` with leading dims identical to ``a``'s.
    """
    _check_same_dtype(a, b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul operands must have at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dims disagree: {a.shape} x {b.shape}")
    if b.data.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul leading dims disagree: {a.shape} x {b.shape}")
    b_shared = b.data.ndim == 2
    k = a.shape[-1]

    if b_shared:
        # Collapse leading dims so BLAS sees one big gemm instead of a
        # python-level loop of tiny per-batch products.
        n = b.shape[-1]
        out_shape = a.shape[:-1] + (n,)
        out_data = (a.data.reshape(-1, k) @ b.data).reshape(out_shape)

        def bw(g: np.ndarray) -> None:
            g2 = g.reshape(-1, n)
            if a.requires_grad:
                a.accumulate_grad((g2 @ b.data.T).reshape(a.shape))
            if b.requires_grad:
                b.accumulate_grad(a.data.reshape(-1, k).T @ g2)
    else:
        out_data = a.data @ b.data

        def bw(g: np.ndarray) -> None:
            if a.requires_grad:
                a.accumulate_grad(g @ np.swapaxes(b.data, -1, -2))
            if b.requires_grad:
                b.accumulate_grad(np.swapaxes(a.data, -1, -2) @ g)

    return _finish(out_data, (a, b), bw)


def transpose_last2(x: Tensor) -> Tensor:
    """Swap the last two axes."""

    def bw(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate_grad(np.swapaxes(g, -1, -2))

    return _finish(np.ascontiguousarray(np.swapaxes(x.data, -1, -2)), (x,), bw)


# ---------------------------------------------------------------------------
# Token-axis surgery (axis -2 is the token axis)
# ---------------------------------------------------------------------------


def concat_tokens(*parts: Tensor) -> Tensor:
    """Concatenate along the token axis, first argument first.

    A single part passes through untouched so that degenerate layouts add
    no graph nodes.
    """
    parts = tuple(p for p in parts if p.shape[-2] != 0)
    if len(parts) == 1:
        return parts[0]
    if not parts:
        raise ValueError("concat_tokens of no nonempty parts")
    _check_same_dtype(*parts)
    lead = parts[0].shape[:-2]
    feat = parts[0].shape[-1]
    for p in parts[1:]:
        if p.shape[:-2] != lead or p.shape[-1] != feat:
            raise ValueError(f"concat_tokens shape mismatch: {[p.shape for p in parts]}")
    sizes = [p.shape[-2] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(g: np.ndarray) -> None:
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p.accumulate_grad(g[..., lo:hi, :])

    return _finish(np.concatenate([p.data for p in parts], axis=-2), parts, bw)


def truncate_tokens(x: Tensor, keep: int) -> Tensor:
    """Keep the first ``keep`` tokens; dropped tokens get zero gradient."""
    if keep > x.shape[-2]:
        raise ValueError(f"cannot keep {keep} of {x.shape[-2]} tokens")

    def bw(g: np.ndarray) -> None:
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[..., :keep, :] = g
            x.accumulate_grad(gx)

    return _finish(np.ascontiguousarray(x.data[..., :keep, :]), (x,), bw)


def split_tokens(x: Tensor, sizes: Sequence[int]) -> tuple[Tensor, ...]:
    """Split along the token axis into consecutive chunks of the given sizes."""
    if sum(sizes) != x.shape[-2]:
        raise ValueError(f"split sizes {list(sizes)} do not cover {x.shape[-2]} tokens")
    offsets = np.cumsum([0] + list(sizes))
    outs = []
    for lo, hi in zip(offsets[:-1], offsets[1:]):
        lo_i, hi_i = int(lo), int(hi)

        def bw(g: np.ndarray, lo_i=lo_i, hi_i=hi_i) -> None:
            if x.requires_grad:
                gx = np.zeros_like(x.data)
                gx[..., lo_i:hi_i, :] = g
                x.accumulate_grad(gx)

        outs.append(_finish(np.ascontiguousarray(x.data[..., lo_i:hi_i, :]), (x,), bw))
    return tuple(outs)


def split_last(x: Tensor, sizes: Sequence[int]) -> tuple[Tensor, ...]:
    """Split along the last axis into consecutive chunks of the given sizes."""
    if sum(sizes) != x.shape[-1]:
        raise ValueError(f"split sizes {list(sizes)} do not cover last dim {x.shape[-1]}")
    offsets = np.cumsum([0] + list(sizes))
    outs = []
    for lo, hi in zip(offsets[:-1], offsets[1:]):
        lo_i, hi_i = int(lo), int(hi)

        def bw(g: np.ndarray, lo_i=lo_i, hi_i=hi_i) -> None:
            if x.requires_grad:
                gx = np.zeros_like(x.data)
                gx[..., lo_i:hi_i] = g
                x.accumulate_grad(gx)

        outs.append(_finish(np.ascontiguousarray(x.data[..., lo_i:hi_i]), (x,), bw))
    return tuple(outs)


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous slice along the last axis."""
    if not (0 <= start <= stop <= x.shape[-1]):
        raise ValueError(f"bad slice [{start}:{stop}] of last dim {x.shape[-1]}")

    def bw(g: np.ndarray) -> None:
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[..., start:stop] = g
            x.accumulate_grad(gx)

    return _finish(np.ascontiguousarray(x.data[..., start:stop]), (x,), bw)


def gather_tokens(x: Tensor, idx: Sequence[int]) -> Tensor:
    """Select tokens by index along the token axis (a copy, in index order)."""
    idx_arr = np.asarray(idx, dtype=np.intp)
    if idx_arr.size and (idx_arr.min() < 0 or idx_arr.max() >= x.shape[-2]):
        raise IndexError(f"token index out of range for {x.shape[-2]} tokens")

    def bw(g: np.ndarray) -> None:
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.add.at(gx, (..., idx_arr, slice(None)), g)
            x.accumulate_grad(gx)

    return _finish(np.ascontiguousarray(np.take(x.data, idx_arr, axis=-2)), (x,), bw)


def split_heads(x: Tensor, heads: int) -> Tensor:
    """Reshape ``[..., T, D]`` to ``[..., H, T, D/H]``."""
    *lead, t, d = x.shape
    if d % heads != 0:
        raise ValueError(f"feature dim {d} not divisible by {heads} heads")
    hd = d // heads

    def bw(g: np.ndarray) -> None:
        if x.requires_grad:
            gx = np.moveaxis(g, -3, -2).reshape(*lead, t, d)
            x.accumulate_grad(np.ascontiguousarray(gx))

    out = np.moveaxis(x.data.reshape(*lead, t, heads, hd), -2, -3)
    return _finish(np.ascontiguousarray(out), (x,), bw)


def merge_heads(x: Tensor) -> Tensor:
    """Reshape ``[..., H, T, Dh]`` back to ``[..., T, H*Dh]``."""
    *lead, h, t, hd = x.shape

    def bw(g: np.ndarray) -> None:
        if x.requires_grad:
            gx = np.moveaxis(g.reshape(*lead, t, h, hd), -2, -3)
            x.accumulate_grad(np.ascontiguousarray(gx))

    out = np.moveaxis(x.data, -3, -2).reshape(*lead, t, h * hd)
    return _finish(np.ascontiguousarray(out), (x,), bw)


def tile_leading(x: Tensor, n: int) -> Tensor:
    """Broadcast by stacking ``n`` copies along a new leading axis.

    The gradient sums over the copies.
    """

    def bw(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate_grad(g.sum(axis=0))

    return _finish(np.ascontiguousarray(np.broadcast_to(x.data, (n,) + x.shape)), (x,), bw)


def drop_token_axis(x: Tensor) -> Tensor:
    """Squeeze a singleton token axis: ``[..., 1, D]`` to ``[..., D]``."""
    if x.shape[-2] != 1:
        raise ValueError(f"token axis is {x.shape[-2]}, expected 1")

    def bw(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate_grad(g[..., None, :].reshape(x.shape))

    return _finish(np.ascontiguousarray(x.data[..., 0, :]), (x,), bw)


# ---------------------------------------------------------------------------
# Normalization, activation, attention softmax, loss
# ---------------------------------------------------------------------------


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Per-vector layer normalization over the last axis, then affine.

    Uses biased variance (divide by D) with ``eps`` added inside the
    square root.
    """
    _check_same_dtype(x, gamma, beta)
    if eps <= 0:
        raise ValueError("eps must be positive")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError(f"gamma/beta must be ({d},)")
    dt = x.data.dtype
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + dt.type(eps))
    xhat = centered * inv_std
    out = xhat * gamma.data + beta.data

    def bw(g: np.ndarray) -> None:
        if gamma.requires_grad:
            gamma.accumulate_grad((g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            beta.accumulate_grad(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gy = g * gamma.data
            s1 = gy.mean(axis=-1, keepdims=True)
            s2 = (gy * xhat).mean(axis=-1, keepdims=True)
            x.accumulate_grad(inv_std * (gy - s1 - xhat * s2))

    return _finish(out, (x, gamma, beta), bw)


_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-CDF GELU: ``x * Phi(x)`` with Phi via erf."""
    dt = x.data.dtype
    phi = 0.5 * (1.0 + erf(x.data / dt.type(_SQRT2)))
    out = x.data * phi

    def bw(g: np.ndarray) -> None:
        if x.requires_grad:
            pdf = dt.type(_INV_SQRT_2PI) * np.exp(-0.5 * x.data * x.data)
            x.accumulate_grad(g * (phi + x.data * pdf))

    return _finish(out.astype(dt, copy=False), (x,), bw)


def softmax_masked(logits: Tensor, mask: np.ndarray | None) -> Tensor:
    """Softmax over the last axis with hard exclusion of masked-out keys.

    ``mask`` is a boolean ``[Q, K]`` array shared across leading dims, or
    None for all-allowed. Denied positions get weight exactly +0.0 and are
    excluded from the normalizing sum (which accumulates sequentially), so
    deleting a denied key from the input leaves the remaining weights
    bit-identical. Every query row must allow at least one key.
    """
    dt = logits.data.dtype
    if mask is None:
        shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != logits.shape[-2:]:
            raise ValueError(f"mask shape {mask.shape} does not match logits {logits.shape}")
        if not mask.any(axis=-1).all():
            raise ValueError("softmax_masked: some query row allows no key")
        neg_inf = dt.type(-np.inf)
        allowed = np.where(mask, logits.data, neg_inf)
        shifted = allowed - allowed.max(axis=-1, keepdims=True)
        # exp(-inf) is exactly +0.0, so denied keys vanish from the
        # sequential normalizer below without any epsilon tricks.
        e = np.exp(shifted)
    total = _seq_sum_last(e, keepdims=True)
    w = e / total

    def bw(g: np.ndarray) -> None:
        if logits.requires_grad:
            gw = g * w
            logits.accumulate_grad(gw - w * _seq_sum_last(gw, keepdims=True))

    return _finish(w, (logits,), bw)


def cross_entropy_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-softmax of the true class, max-stabilized."""
    if logits.data.ndim != 2:
        raise ValueError(f"logits must be [B, C], got {logits.shape}")
    b, c = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (b,):
        raise ValueError(f"labels must be [{b}], got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"label outside [0, {c})")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    total = _seq_sum_last(e, keepdims=True)
    log_probs = shifted - np.log(total)
    nll = -log_probs[np.arange(b), labels]
    out = np.asarray(nll.mean(), dtype=logits.data.dtype)

    def bw(g: np.ndarray) -> None:
        if logits.requires_grad:
            p = e / total
            p[np.arange(b), labels] -= 1.0
            logits.accumulate_grad(g * p / logits.data.dtype.type(b))

    return _finish(out, (logits,), bw)


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(p) into every requires_grad tensor on the tape.

    Node closures run in reverse recording order, which is a valid reverse
    topological order, so accumulation is deterministic.
    """
    if tape.consumed:
        raise RuntimeError("tape already consumed by a backward pass; re-record the forward")
    if loss.data.ndim != 0:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    if not tape.nodes or tape.nodes[-1].out is not loss:
        recorded = any(n.out is loss for n in tape.nodes)
        if not recorded:
            raise ValueError("loss was not recorded on this tape")
    tape.consumed = True
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        g = node.out.grad
        if g is None:
            continue
        node.backward_fn(g)
