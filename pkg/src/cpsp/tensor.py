"""Dense float64 tensors with a reverse-mode tape and an exact retained-buffer census.

Every differentiable primitive in the package lives here.  Each one documents
its *retention policy*: exactly which float buffers the tape keeps alive for
the backward pass.  ``Tape.live_elements`` counts every distinct retained
buffer once (parameter buffers and integer index arrays are excluded — they
are resident regardless of training), and the closed-form activation
predictor in :mod:`cpsp.accounting` is written against this policy, term by
term.  Changing what a primitive saves requires changing the predictor.

Retention policy summary (per recorded node; B = leading batch dims):

===================  =========================================================
primitive            retained float buffers
===================  =========================================================
matmul(a, b)         a, b
add / add_rowvec     nothing
add_posmat / scale   nothing
mul(a, b)            a, b
mul_rowvec(a, v)     a, v
layer_norm(x, g, b)  x_hat (shape of x), inv_std (x without last axis)
gelu(x)              x and the tanh factor (same shape)
softmax_rows(x)      the output
cross_entropy        softmax probabilities (labels are ints, not counted)
cosine_rows(q, k)    q, k, row norms of q, norm of k, the output
multi_head_attention x, q, k, v (k/v include any prefix rows), attention
                     probabilities, the pre-projection context
take_row / take_cols nothing
concat_tokens        nothing
tile_token / reshape nothing
sum_all / mean_all   nothing
===================  =========================================================

A node is recorded only when at least one input requires a gradient, so
frozen subgraphs (a frozen prompt pool, blocks upstream of the first prompt
injection) contribute nothing to the census.

Single-threaded per tape; distinct tapes in distinct processes share no
state.  All arrays are float64 and every primitive raises
:class:`NonFiniteError` if a NaN or Inf would escape.
"""

from __future__ import annotations

import math
import threading

import numpy as np

__all__ = [
    "ContractError",
    "DimensionError",
    "MacMeter",
    "NonFiniteError",
    "Tape",
    "Tensor",
    "add",
    "add_posmat",
    "add_rowvec",
    "as_tensor",
    "backward",
    "concat_tokens",
    "cosine_rows",
    "cross_entropy",
    "detach",
    "gelu",
    "layer_norm",
    "matmul",
    "mean_all",
    "mul",
    "mul_rowvec",
    "multi_head_attention",
    "no_grad",
    "reshape",
    "scale",
    "softmax_rows",
    "stack_cols",
    "sum_all",
    "take_cols",
    "take_row",
    "tile_token",
]


class DimensionError(ValueError):
    """Shapes passed to a primitive do not line up."""


class ContractError(ValueError):
    """A documented precondition was violated."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf tried to escape a primitive."""


_LOCAL = threading.local()


def _tape_stack() -> list:
    stack = getattr(_LOCAL, "tapes", None)
    if stack is None:
        stack = _LOCAL.tapes = []
    return stack


def _meter_stack() -> list:
    stack = getattr(_LOCAL, "meters", None)
    if stack is None:
        stack = _LOCAL.meters = []
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class no_grad:
    """Context manager that masks any enclosing tape: nothing is recorded."""

    def __enter__(self):
        _tape_stack().append(None)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False


def active_meter():
    stack = _meter_stack()
    return stack[-1] if stack else None


class MacMeter:
    """Multiply-accumulate counter covering one or more forward/backward passes.

    Only contraction-style primitives count (matmul, the fused attention, the
    cosine dot products); elementwise ops, layer norm, softmax and the loss
    count zero.  A backward pass adds twice the forward MACs of every node it
    traverses — the standard two-matmuls-per-matmul convention — regardless of
    which operand gradients are actually materialised.
    """

    def __init__(self):
        self.forward = 0
        self.backward = 0

    @property
    def total(self) -> int:
        return self.forward + self.backward

    def __enter__(self) -> "MacMeter":
        _meter_stack().append(self)
        return self

    def __exit__(self, *exc):
        _meter_stack().pop()
        return False


def _count_macs(n: int) -> None:
    meter = active_meter()
    if meter is not None:
        meter.forward += int(n)


class _Node:
    __slots__ = ("op", "inputs", "saved", "bwd", "fwd_macs")

    def __init__(self, op, inputs, saved, bwd, fwd_macs=0):
        self.op = op
        self.inputs = inputs        # tuple[Tensor]
        self.saved = saved          # tuple[(ndarray, counts_in_census: bool)]
        self.bwd = bwd              # grad_out -> tuple[ndarray | None] per input
        self.fwd_macs = fwd_macs


class Tape:
    """Ordered record of differentiable operations with a live-element census.

    ``live_elements`` is maintained incrementally and always equals
    :meth:`census`, an independent walk over the retained buffers
    (deduplicated by buffer identity, parameters excluded).  ``backward``
    consumes the tape: nodes are dropped and the census returns to zero.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.live_elements = 0
        self.peak_live_elements = 0
        self._seen_ids: set[int] = set()
        self._consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def record(self, node: _Node) -> None:
        if self._consumed:
            raise ContractError("tape already consumed by backward()")
        self.nodes.append(node)
        for arr, counts in node.saved:
            if counts and id(arr) not in self._seen_ids:
                self._seen_ids.add(id(arr))
                self.live_elements += arr.size
        if self.live_elements > self.peak_live_elements:
            self.peak_live_elements = self.live_elements

    def census(self) -> int:
        """Recompute live elements by walking every retained buffer."""
        seen: set[int] = set()
        total = 0
        for node in self.nodes:
            for arr, counts in node.saved:
                if counts and id(arr) not in seen:
                    seen.add(id(arr))
                    total += arr.size
        return total

    def _consume(self) -> None:
        self.nodes.clear()
        self._seen_ids.clear()
        self.live_elements = 0
        self._consumed = True


class Tensor:
    """Shape-tagged float64 array with an optional gradient slot.

    ``is_param`` marks long-lived model parameters; their buffers never count
    toward the tape census.  Gradients accumulate into ``grad`` on leaves
    with ``requires_grad`` when :func:`backward` runs.
    """

    __slots__ = ("data", "grad", "requires_grad", "is_param", "node")

    def __init__(self, data, requires_grad=False, is_param=False, _check=True):
        arr = np.asarray(data, dtype=np.float64)
        if _check and not np.isfinite(arr).all():
            raise NonFiniteError("non-finite values in tensor construction")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.is_param = bool(is_param)
        self.node = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flags = []
        if self.requires_grad:
            flags.append("grad")
        if self.is_param:
            flags.append("param")
        return f"Tensor(shape={self.data.shape}{', ' + ','.join(flags) if flags else ''})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def detach(t: Tensor) -> Tensor:
    """Same buffer, no gradient linkage."""
    out = Tensor.__new__(Tensor)
    out.data = t.data
    out.grad = None
    out.requires_grad = False
    out.is_param = t.is_param
    out.node = None
    return out


def _finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite output of {op}")
    return arr


def _make_output(op, out_data, inputs, saved, bwd, fwd_macs=0) -> Tensor:
    """Wrap an op result; record a node only if a gradient can flow."""
    _finite(out_data, op)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.is_param = False
    out.node = None
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out.requires_grad = bool(needs)
    if needs:
        node = _Node(op, tuple(inputs), tuple(saved), bwd, fwd_macs)
        out.node = node
        tape.record(node)
    return out


def _saved(t: Tensor):
    """Retention entry for a tensor: parameters never count in the census."""
    return (t.data, not t.is_param)


def _saved_arr(arr: np.ndarray, counts=True):
    return (arr, counts)


# ---------------------------------------------------------------------------
# arithmetic primitives
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Stacked matrix product ``a @ b``.

    ``a`` may carry leading batch axes; ``b`` is either 2-D (shared across the
    stack) or has the same leading axes.  Retains both operands.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError(f"matmul needs >=2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    if b.data.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch dims disagree: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    m, k, n = a.shape[-2], a.shape[-1], b.shape[-1]
    batch = int(np.prod(out.shape[:-2], dtype=np.int64)) if out.ndim > 2 else 1
    macs = batch * m * k * n
    _count_macs(macs)

    a_data, b_data = a.data, b.data

    def bwd(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(b_data, -1, -2)
        if b.requires_grad:
            gb = np.swapaxes(a_data, -1, -2) @ g
            if b_data.ndim == 2 and gb.ndim > 2:
                gb = gb.sum(axis=tuple(range(gb.ndim - 2)))
        return ga, gb

    return _make_output("matmul", out, (a, b), (_saved(a), _saved(b)), bwd, macs)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors.  Retains nothing."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"add shapes disagree: {a.shape} vs {b.shape}")

    def bwd(g):
        return (g if a.requires_grad else None, g if b.requires_grad else None)

    return _make_output("add", a.data + b.data, (a, b), (), bwd)


def add_rowvec(a: Tensor, v: Tensor) -> Tensor:
    """Add a vector along the last axis (bias add).  Retains nothing."""
    a, v = as_tensor(a), as_tensor(v)
    if v.data.ndim != 1 or a.shape[-1] != v.shape[0]:
        raise DimensionError(f"add_rowvec shapes disagree: {a.shape} + {v.shape}")

    def bwd(g):
        ga = g if a.requires_grad else None
        gv = g.reshape(-1, v.shape[0]).sum(axis=0) if v.requires_grad else None
        return ga, gv

    return _make_output("add_rowvec", a.data + v.data, (a, v), (), bwd)


def add_posmat(a: Tensor, p: Tensor) -> Tensor:
    """Add a (n, D) matrix to every batch row of a (B, n, D) tensor."""
    a, p = as_tensor(a), as_tensor(p)
    if a.data.ndim != 3 or p.data.ndim != 2 or a.shape[1:] != p.shape:
        raise DimensionError(f"add_posmat shapes disagree: {a.shape} + {p.shape}")

    def bwd(g):
        ga = g if a.requires_grad else None
        gp = g.sum(axis=0) if p.requires_grad else None
        return ga, gp

    return _make_output("add_posmat", a.data + p.data, (a, p), (), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product.  Retains both operands."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mul shapes disagree: {a.shape} vs {b.shape}")
    a_data, b_data = a.data, b.data

    def bwd(g):
        ga = g * b_data if a.requires_grad else None
        gb = g * a_data if b.requires_grad else None
        return ga, gb

    return _make_output("mul", a_data * b_data, (a, b), (_saved(a), _saved(b)), bwd)


def mul_rowvec(a: Tensor, v: Tensor) -> Tensor:
    """Scale the last axis elementwise by a vector.  Retains both operands."""
    a, v = as_tensor(a), as_tensor(v)
    if v.data.ndim != 1 or a.shape[-1] != v.shape[0]:
        raise DimensionError(f"mul_rowvec shapes disagree: {a.shape} * {v.shape}")
    a_data, v_data = a.data, v.data

    def bwd(g):
        ga = g * v_data if a.requires_grad else None
        gv = (g * a_data).reshape(-1, v.shape[0]).sum(axis=0) if v.requires_grad else None
        return ga, gv

    return _make_output("mul_rowvec", a_data * v_data, (a, v), (_saved(a), _saved(v)), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python constant.  Retains nothing."""
    a = as_tensor(a)
    c = float(c)

    def bwd(g):
        return (g * c if a.requires_grad else None,)

    return _make_output("scale", a.data * c, (a,), (), bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine.

    Retains the normalized activations ``x_hat`` and the per-row ``inv_std``.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm affine shapes disagree with feature dim {d}")
    mean = x.data.mean(axis=-1, keepdims=True)
    x_hat = x.data - mean
    var = np.einsum("...i,...i->...", x_hat, x_hat)[..., None] / d
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat *= inv_std
    out = x_hat * gamma.data
    out += beta.data
    g_data = gamma.data

    def bwd(g):
        gx = gg = gb = None
        if gamma.requires_grad:
            gg = np.einsum("bi,bi->i", g.reshape(-1, d), x_hat.reshape(-1, d))
        if beta.requires_grad:
            gb = g.reshape(-1, d).sum(axis=0)
        if x.requires_grad:
            gh = g * g_data
            m1 = gh.mean(axis=-1, keepdims=True)
            m2 = np.einsum("...i,...i->...", gh, x_hat)[..., None] / d
            gh -= m1
            gh -= x_hat * m2
            gh *= inv_std
            gx = gh
        return gx, gg, gb

    saved = (_saved_arr(x_hat), _saved_arr(inv_std))
    return _make_output("layer_norm", out, (x, gamma, beta), saved, bwd)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximation GELU.  Retains the input and the tanh factor."""
    x = as_tensor(x)
    x_data = x.data
    t = x_data * x_data
    t *= 0.044715
    t += 1.0
    t *= x_data
    t *= _GELU_C
    np.tanh(t, out=t)
    out = t + 1.0
    out *= x_data
    out *= 0.5

    def bwd(g):
        if not x.requires_grad:
            return (None,)
        # d/dx [0.5 x (1+t)] = 0.5 (1+t) + 0.5 x (1-t^2) C (1 + 3*0.044715 x^2)
        sech2 = t * t
        np.subtract(1.0, sech2, out=sech2)
        d = x_data * x_data
        d *= 0.134145
        d += 1.0
        d *= _GELU_C
        d *= sech2
        d *= x_data
        d += 1.0
        d += t
        d *= 0.5
        d *= g
        return (d,)

    return _make_output("gelu", out, (x,), (_saved(x), _saved_arr(t)), bwd)


def _softmax_last(z: np.ndarray) -> np.ndarray:
    e = np.subtract(z, z.max(axis=-1, keepdims=True))
    np.exp(e, out=e)
    e /= e.sum(axis=-1, keepdims=True)
    return e


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax over the last axis, max-subtracted.  Retains the output."""
    x = as_tensor(x)
    out = _softmax_last(x.data)

    def bwd(g):
        if not x.requires_grad:
            return (None,)
        dot = np.einsum("...i,...i->...", g, out)[..., None]
        gx = g - dot
        gx *= out
        return (gx,)

    return _make_output("softmax_rows", out, (x,), (_saved_arr(out),), bwd)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer labels under row softmax.

    Retains the softmax probabilities; the label array is integer-typed and
    does not count toward the census.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.data.ndim != 2:
        raise DimensionError(f"cross_entropy expects (B, C) logits, got {logits.shape}")
    b, c = logits.shape
    if labels.shape != (b,):
        raise DimensionError(f"labels shape {labels.shape} does not match batch {b}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ContractError("labels must be integers")
    if labels.min() < 0 or labels.max() >= c:
        raise IndexError(f"label out of range [0, {c})")
    z = logits.data
    zmax = z.max(axis=-1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=-1))
    nll = lse - z[np.arange(b), labels]
    out = np.array(nll.mean())
    probs = _softmax_last(z)

    def bwd(g):
        if not logits.requires_grad:
            return (None,)
        dz = probs.copy()
        dz[np.arange(b), labels] -= 1.0
        return (dz * (g / b),)

    return _make_output("cross_entropy", out, (logits,), (_saved_arr(probs),), bwd)


def cosine_rows(q: Tensor, k: Tensor) -> Tensor:
    """Cosine similarity of each row of ``q`` (B, D) against a vector ``k`` (D,).

    Zero-norm rows (or a zero-norm ``k``) yield cosine 0 with zero gradients.
    Retains q, k, the row norms of q, the norm of k and the output.
    """
    q, k = as_tensor(q), as_tensor(k)
    if q.data.ndim != 2 or k.data.ndim != 1 or q.shape[1] != k.shape[0]:
        raise DimensionError(f"cosine_rows shapes disagree: {q.shape} vs {k.shape}")
    q_data, k_data = q.data, k.data
    qn = np.linalg.norm(q_data, axis=1)
    kn = np.array(np.linalg.norm(k_data))
    denom = qn * kn
    ok = denom > 0.0
    cos = np.zeros(q.shape[0])
    np.divide(q_data @ k_data, denom, out=cos, where=ok)
    macs = q.shape[0] * q.shape[1]
    _count_macs(macs)

    def bwd(g):
        gq = gk = None
        ge = np.where(ok, g, 0.0)
        if q.requires_grad:
            gq = ge[:, None] * (
                k_data[None, :] / np.where(ok, denom, 1.0)[:, None]
                - cos[:, None] * q_data / np.where(ok, qn * qn, 1.0)[:, None]
            )
        if k.requires_grad:
            kn_safe = float(kn) if kn > 0 else 1.0
            gk = (ge / np.where(ok, denom, 1.0)) @ q_data - (
                (ge * cos).sum() / (kn_safe * kn_safe)
            ) * k_data
        return gq, gk

    saved = (_saved(q), _saved(k), _saved_arr(qn), _saved_arr(kn), _saved_arr(cos))
    return _make_output("cosine_rows", cos, (q, k), saved, bwd, macs)


# ---------------------------------------------------------------------------
# structural primitives (retain nothing)
# ---------------------------------------------------------------------------


def take_row(x: Tensor, i: int) -> Tensor:
    """Select index ``i`` along the second-to-last axis."""
    x = as_tensor(x)
    if x.data.ndim < 2:
        raise DimensionError("take_row needs >=2-D input")
    n = x.shape[-2]
    if not 0 <= i < n:
        raise IndexError(f"row {i} out of range [0, {n})")
    out = np.ascontiguousarray(x.data[..., i, :])

    def bwd(g):
        if not x.requires_grad:
            return (None,)
        gx = np.zeros_like(x.data)
        gx[..., i, :] = g
        return (gx,)

    return _make_output("take_row", out, (x,), (), bwd)


def take_cols(x: Tensor, cols) -> Tensor:
    """Select columns of a (B, C) tensor."""
    x = as_tensor(x)
    cols = np.asarray(cols)
    if x.data.ndim != 2:
        raise DimensionError("take_cols expects a 2-D input")
    if cols.min() < 0 or cols.max() >= x.shape[1]:
        raise IndexError("column index out of range")
    out = np.ascontiguousarray(x.data[:, cols])

    def bwd(g):
        if not x.requires_grad:
            return (None,)
        gx = np.zeros_like(x.data)
        np.add.at(gx, (slice(None), cols), g)
        return (gx,)

    return _make_output("take_cols", out, (x,), (), bwd)


def concat_tokens(parts: list) -> Tensor:
    """Concatenate (B, n_i, D) tensors along the token axis."""
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise DimensionError("concat_tokens needs at least one part")
    sizes = [p.shape[-2] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=-2)

    def bwd(g):
        grads = []
        at = 0
        for p, s in zip(parts, sizes):
            grads.append(g[..., at : at + s, :] if p.requires_grad else None)
            at += s
        return tuple(grads)

    return _make_output("concat_tokens", out, tuple(parts), (), bwd)


def tile_token(v: Tensor, batch: int) -> Tensor:
    """Broadcast a (D,) vector to a (batch, 1, D) token block."""
    v = as_tensor(v)
    if v.data.ndim != 1:
        raise DimensionError("tile_token expects a vector")
    out = np.tile(v.data, (batch, 1, 1))

    def bwd(g):
        return (g.sum(axis=(0, 1)) if v.requires_grad else None,)

    return _make_output("tile_token", out, (v,), (), bwd)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    """Reshape through an explicit copy so every buffer is a real allocation."""
    x = as_tensor(x)
    if int(np.prod(shape)) != x.size:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}")
    out = np.ascontiguousarray(x.data).reshape(shape).copy()
    in_shape = x.data.shape

    def bwd(g):
        return (g.reshape(in_shape) if x.requires_grad else None,)

    return _make_output("reshape", out, (x,), (), bwd)


def stack_cols(cols: list) -> Tensor:
    """Stack (B,) tensors into a (B, m) tensor."""
    cols = [as_tensor(c) for c in cols]
    if not cols or any(c.data.ndim != 1 for c in cols):
        raise DimensionError("stack_cols expects 1-D tensors")
    out = np.stack([c.data for c in cols], axis=1)

    def bwd(g):
        return tuple(g[:, j] if c.requires_grad else None for j, c in enumerate(cols))

    return _make_output("stack_cols", out, tuple(cols), (), bwd)


def sum_all(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.array(x.data.sum())
    in_shape = x.data.shape

    def bwd(g):
        return (np.broadcast_to(g, in_shape).copy() if x.requires_grad else None,)

    return _make_output("sum_all", out, (x,), (), bwd)


def mean_all(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.array(x.data.mean())
    in_shape, n = x.data.shape, x.size

    def bwd(g):
        return (np.broadcast_to(g / n, in_shape).copy() if x.requires_grad else None,)

    return _make_output("mean_all", out, (x,), (), bwd)


# ---------------------------------------------------------------------------
# fused multi-head attention
# ---------------------------------------------------------------------------


def multi_head_attention(
    x: Tensor,
    w_qkv: Tensor,
    b_qkv: Tensor,
    w_out: Tensor,
    b_out: Tensor,
    num_heads: int,
    prefix_k: Tensor | None = None,
    prefix_v: Tensor | None = None,
    return_aux: bool = False,
):
    """One fused self-attention block with optional key/value prefix rows.

    ``x`` is (B, n, D); prefixes, when given, are (B, P, D) and are
    prepended to keys and values only (queries remain the n tokens).

    Retains x, q, k, v (k/v include prefix rows), the softmax probabilities
    and the pre-projection context.  Forward MACs: the three projections, the
    two attention contractions and the output projection.

    With ``return_aux`` the raw per-head probabilities (B, H, n, n_k) and the
    head-concatenated values (B, n_k, D) are returned alongside for tracing;
    the aux arrays are plain numpy and never taped.
    """
    x = as_tensor(x)
    if x.data.ndim != 3:
        raise DimensionError(f"attention expects (B, n, D) input, got {x.shape}")
    bsz, n, dim = x.shape
    if dim % num_heads != 0:
        raise DimensionError(f"feature dim {dim} not divisible by {num_heads} heads")
    if w_qkv.shape != (dim, 3 * dim) or w_out.shape != (dim, dim):
        raise DimensionError("attention weight shapes disagree with feature dim")
    head_dim = dim // num_heads
    inv_sqrt = 1.0 / math.sqrt(head_dim)

    qkv = x.data @ w_qkv.data
    qkv += b_qkv.data
    q = np.ascontiguousarray(
        qkv[:, :, :dim].reshape(bsz, n, num_heads, head_dim).transpose(0, 2, 1, 3)
    )
    k_tok = qkv[:, :, dim : 2 * dim].reshape(bsz, n, num_heads, head_dim).transpose(0, 2, 1, 3)
    v_tok = qkv[:, :, 2 * dim :].reshape(bsz, n, num_heads, head_dim).transpose(0, 2, 1, 3)

    n_pre = 0
    if prefix_k is not None or prefix_v is not None:
        if prefix_k is None or prefix_v is None:
            raise ContractError("prefix_k and prefix_v must be given together")
        if prefix_k.shape != prefix_v.shape or prefix_k.data.ndim != 3:
            raise DimensionError("prefix shapes disagree")
        n_pre = prefix_k.shape[1]
        kp = prefix_k.data.reshape(bsz, n_pre, num_heads, head_dim).transpose(0, 2, 1, 3)
        vp = prefix_v.data.reshape(bsz, n_pre, num_heads, head_dim).transpose(0, 2, 1, 3)
        k = np.ascontiguousarray(np.concatenate([kp, k_tok], axis=2))
        v = np.ascontiguousarray(np.concatenate([vp, v_tok], axis=2))
    else:
        k = np.ascontiguousarray(k_tok)
        v = np.ascontiguousarray(v_tok)
    n_k = n + n_pre

    scores = q @ np.swapaxes(k, -1, -2)
    scores *= inv_sqrt
    probs = _softmax_last(scores)
    ctx = probs @ v
    ctx2 = np.ascontiguousarray(ctx.transpose(0, 2, 1, 3)).reshape(bsz, n, dim)
    out = ctx2 @ w_out.data
    out += b_out.data

    macs = bsz * (n * dim * 3 * dim + 2 * num_heads * n * n_k * head_dim + n * dim * dim)
    _count_macs(macs)

    x_data = x.data
    w_qkv_d, w_out_d = w_qkv.data, w_out.data
    inputs = [x, w_qkv, b_qkv, w_out, b_out]
    if n_pre:
        inputs += [prefix_k, prefix_v]

    def bwd(g):
        need = [t.requires_grad for t in inputs]
        g_ctx2 = g @ w_out_d.T
        g_wo = ctx2.reshape(-1, dim).T @ g.reshape(-1, dim) if need[3] else None
        g_bo = g.reshape(-1, dim).sum(axis=0) if need[4] else None

        g_ctx = np.ascontiguousarray(
            g_ctx2.reshape(bsz, n, num_heads, head_dim).transpose(0, 2, 1, 3)
        )
        g_probs = g_ctx @ np.swapaxes(v, -1, -2)
        g_scores = g_probs
        g_scores -= np.einsum("bhij,bhij->bhi", g_probs, probs)[..., None]
        g_scores *= probs
        g_scores *= inv_sqrt
        g_v = np.swapaxes(probs, -1, -2) @ g_ctx

        g_pk = g_pv = None
        if n_pre:
            g_k = np.swapaxes(g_scores, -1, -2) @ q
            if need[5]:
                g_pk = np.ascontiguousarray(
                    g_k[:, :, :n_pre].transpose(0, 2, 1, 3)
                ).reshape(bsz, n_pre, dim)
            if need[6]:
                g_pv = np.ascontiguousarray(
                    g_v[:, :, :n_pre].transpose(0, 2, 1, 3)
                ).reshape(bsz, n_pre, dim)
            g_k_tok = g_k[:, :, n_pre:]
            g_v_tok = g_v[:, :, n_pre:]
        else:
            g_k_tok = np.swapaxes(g_scores, -1, -2) @ q
            g_v_tok = g_v

        g_x = g_wqkv = g_bqkv = None
        if need[0] or need[1] or need[2]:
            g_q = g_scores @ k
            g_qkv = np.empty((bsz, n, 3 * dim))
            g_qkv[:, :, :dim] = g_q.transpose(0, 2, 1, 3).reshape(bsz, n, dim)
            g_qkv[:, :, dim : 2 * dim] = g_k_tok.transpose(0, 2, 1, 3).reshape(bsz, n, dim)
            g_qkv[:, :, 2 * dim :] = g_v_tok.transpose(0, 2, 1, 3).reshape(bsz, n, dim)
            if need[0]:
                g_x = g_qkv @ w_qkv_d.T
            if need[1]:
                g_wqkv = x_data.reshape(-1, dim).T @ g_qkv.reshape(-1, 3 * dim)
            if need[2]:
                g_bqkv = g_qkv.reshape(-1, 3 * dim).sum(axis=0)

        grads = [g_x, g_wqkv, g_bqkv, g_wo, g_bo]
        if n_pre:
            grads += [g_pk, g_pv]
        return tuple(grads)

    saved = (
        _saved(x),
        _saved_arr(q),
        _saved_arr(k),
        _saved_arr(v),
        _saved_arr(probs),
        _saved_arr(ctx2),
    )
    result = _make_output("multi_head_attention", out, tuple(inputs), saved, bwd, macs)
    if return_aux:
        return result, {"probs": probs, "values_concat": np.swapaxes(v, 1, 2).reshape(bsz, n_k, dim)}
    return result


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Reverse-sweep the active tape from a scalar loss.

    Populates ``grad`` on every reachable ``requires_grad`` leaf, adds twice
    the forward MACs of each traversed node to the active meter, and consumes
    the tape (census drops to zero).
    """
    if not isinstance(loss, Tensor):
        raise ContractError("backward expects a Tensor")
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        raise ContractError("loss was not produced by a taped forward")
    tape = active_tape()
    if tape is None or not any(node is loss.node for node in tape.nodes):
        raise ContractError("loss does not belong to the active tape")

    grads: dict[int, np.ndarray] = {id(loss.node): np.ones_like(loss.data)}
    meter = active_meter()
    bwd_macs = 0
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        bwd_macs += 2 * node.fwd_macs
        input_grads = node.bwd(g)
        for t, gi in zip(node.inputs, input_grads):
            if gi is None:
                continue
            if t.node is not None:
                key = id(t.node)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
            elif t.requires_grad:
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                t.grad += gi
    if meter is not None:
        meter.backward += bwd_macs
    tape._consume()
