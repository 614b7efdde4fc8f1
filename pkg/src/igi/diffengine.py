"""Dense-tensor reverse-mode automatic differentiation on an explicit tape.

Values are C-contiguous float arrays ("tensors"); float32 inputs stay
float32, everything else is coerced to float64.  Every operation appends
a :class:`Node` to a :class:`Tape`; ``Tape.backward`` walks the recorded
nodes in reverse and accumulates vector-Jacobian products.  A tape can
be *replayed*: leaf values may be swapped out with ``set_leaf`` and all
downstream values recomputed in recording order, which is how the
training loop avoids rebuilding the graph every epoch.

Matrix primitives treat the last two axes as the matrix and broadcast
any leading axes, so a batch of graphs runs as one tape node per
operation instead of one per graph.

The primitive set is exactly what the model and losses need; each entry
in ``_PRIMITIVES`` carries a shape check, a forward kernel, and a VJP.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

Array = np.ndarray


class DiffEngineError(Exception):
    """Base class for tape construction and execution failures."""


class ShapeError(DiffEngineError):
    """Operand shapes are invalid for the requested primitive."""


class DomainError(DiffEngineError):
    """An input lies outside a primitive's documented domain."""


def as_tensor(value, *, check_finite: bool = True) -> Array:
    """Coerce ``value`` to a C-contiguous float array.

    float32 input is kept as float32; any other dtype becomes float64.
    Raises :class:`DomainError` if the result contains NaN or Inf, since
    every primitive's contract assumes finite inputs.
    """
    arr = np.asarray(value)
    dtype = np.float32 if arr.dtype == np.float32 else np.float64
    arr = np.ascontiguousarray(arr, dtype=dtype)
    if check_finite and not np.isfinite(arr).all():
        raise DomainError("tensor contains non-finite entries")
    return arr


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Reduce ``grad`` back to ``shape`` by summing broadcast axes."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(kind: str, a: tuple, b: tuple) -> None:
    try:
        np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"{kind}: shapes {a} and {b} do not broadcast") from None


def _check_matmul(kind, shapes, attrs):
    a, b = shapes
    if len(a) < 2 or len(b) < 2 or a[-1] != b[-2]:
        raise ShapeError(f"{kind}: cannot multiply {a} by {b}")
    _check_broadcast(kind, a[:-2], b[:-2])


def _check_elemwise_pair(kind, shapes, attrs):
    _check_broadcast(kind, shapes[0], shapes[1])


def _check_unary(kind, shapes, attrs):
    pass


def _check_2d(kind, shapes, attrs):
    if len(shapes[0]) != 2:
        raise ShapeError(f"{kind}: expected a 2-D operand, got shape {shapes[0]}")


def _check_matrixlike(kind, shapes, attrs):
    if len(shapes[0]) < 2:
        raise ShapeError(f"{kind}: expected at least 2 dimensions, got shape {shapes[0]}")


def _check_concat_cols(kind, shapes, attrs):
    if not shapes:
        raise ShapeError(f"{kind}: needs at least one input")
    lead = None
    for s in shapes:
        if len(s) < 2:
            raise ShapeError(f"{kind}: operands must be at least 2-D, got shape {s}")
        if lead is None:
            lead = s[:-1]
        elif s[:-1] != lead:
            raise ShapeError(f"{kind}: leading dimensions differ ({lead} vs {s[:-1]})")


def _check_masked_softmax(kind, shapes, attrs):
    if len(shapes) != 2 or shapes[0] != shapes[1] or len(shapes[0]) < 2:
        raise ShapeError(f"{kind}: logits {shapes[0]} and mask {shapes[1]} must be equal shapes, 2-D or higher")


def _check_reshape(kind, shapes, attrs):
    shape = attrs["shape"]
    if int(np.prod(shapes[0])) != int(np.prod(shape)):
        raise ShapeError(f"{kind}: cannot reshape {shapes[0]} to {shape}")


def _check_attn_coeffs(kind, shapes, attrs):
    u, vt, mask = shapes
    ok = (len(u) >= 2 and u[:-2] == vt[:-2] == mask[:-2]
          and u[-1] == 1 and vt[-2] == 1 and u[-2] == vt[-1]
          and mask[-2:] == (u[-2], u[-2]))
    if not ok:
        raise ShapeError(f"{kind}: expected (..,m,1), (..,1,m), (..,m,m); got {u}, {vt}, {mask}")


def _check_gather_rows(kind, shapes, attrs):
    if len(shapes[0]) != 2:
        raise ShapeError(f"{kind}: expected a 2-D operand, got shape {shapes[0]}")
    rows = shapes[0][0]
    idx = attrs["indices"]
    if idx.size and (idx.min() < 0 or idx.max() >= rows):
        raise ShapeError(f"{kind}: row index out of range for {rows} rows")


def _check_rowpair_lastdim(kind, shapes, attrs):
    a, b = shapes
    if len(a) != 2 or len(b) != 2 or a[1] != b[1]:
        raise ShapeError(f"{kind}: shapes {a} and {b} must be 2-D with equal last dimension")


# ---------------------------------------------------------------------------
# Forward kernels and VJPs.
#
# forward(vals, attrs) -> Array
# backward(grad, vals, out, attrs) -> list of per-input gradients (None for
# inputs that are not differentiable, e.g. the softmax mask).
# ---------------------------------------------------------------------------


def _fw_matmul(vals, attrs):
    a, b = vals
    if b.ndim == 2 and a.ndim > 2 and a.flags.c_contiguous:
        # Stack-of-GEMMs with a shared right operand: one flat GEMM is
        # much faster than the per-slice calls matmul would issue.
        return (a.reshape(-1, a.shape[-1]) @ b).reshape(a.shape[:-1] + (b.shape[-1],))
    return a @ b


def _bw_matmul(g, vals, out, attrs):
    a, b = vals
    flat = b.ndim == 2 and a.ndim > 2 and a.flags.c_contiguous and g.flags.c_contiguous
    if flat:
        g2 = g.reshape(-1, g.shape[-1])
        da = (g2 @ b.T).reshape(a.shape)
        db = a.reshape(-1, a.shape[-1]).T @ g2
    else:
        da = _unbroadcast(g @ np.swapaxes(b, -1, -2), a.shape)
        db = _unbroadcast(np.swapaxes(a, -1, -2) @ g, b.shape)
    return [da, db]


def _fw_add(vals, attrs):
    return vals[0] + vals[1]


def _bw_add(g, vals, out, attrs):
    return [_unbroadcast(g, vals[0].shape), _unbroadcast(g, vals[1].shape)]


def _fw_sub(vals, attrs):
    return vals[0] - vals[1]


def _bw_sub(g, vals, out, attrs):
    return [_unbroadcast(g, vals[0].shape), _unbroadcast(-g, vals[1].shape)]


def _fw_mul(vals, attrs):
    return vals[0] * vals[1]


def _bw_mul(g, vals, out, attrs):
    a, b = vals
    return [_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)]


def _fw_smul(vals, attrs):
    return vals[0] * attrs["scalar"]


def _bw_smul(g, vals, out, attrs):
    return [g * attrs["scalar"]]


def _fw_neg(vals, attrs):
    return -vals[0]


def _bw_neg(g, vals, out, attrs):
    return [-g]


def _fw_recip(vals, attrs):
    x = vals[0]
    if np.any(x == 0.0):
        raise DomainError("reciprocal of zero")
    return 1.0 / x


def _bw_recip(g, vals, out, attrs):
    # d(1/x)/dx = -1/x^2 = -out^2
    return [-g * out * out]


def _fw_exp(vals, attrs):
    return np.exp(vals[0])


def _bw_exp(g, vals, out, attrs):
    return [g * out]


def _fw_log(vals, attrs):
    x = vals[0]
    if np.any(x <= 0.0):
        raise DomainError("log requires strictly positive input")
    return np.log(x)


def _bw_log(g, vals, out, attrs):
    return [g / vals[0]]


def _fw_sqrt(vals, attrs):
    x = vals[0]
    if np.any(x < 0.0):
        raise DomainError("sqrt requires non-negative input")
    return np.sqrt(x)


def _bw_sqrt(g, vals, out, attrs):
    # Subgradient 0 at exactly x == 0 (the only non-differentiable point).
    return [np.where(out > 0.0, g / (2.0 * np.where(out > 0.0, out, 1.0)), 0.0)]


def _fw_tanh(vals, attrs):
    return np.tanh(vals[0])


def _bw_tanh(g, vals, out, attrs):
    return [g * (1.0 - out * out)]


def _fw_leaky_relu(vals, attrs):
    # max(x,0) + slope*min(x,0) equals the branchy form bitwise and avoids
    # np.where, which is an order of magnitude slower on large arrays.
    x = vals[0]
    return np.maximum(x, 0.0) + attrs["slope"] * np.minimum(x, 0.0)


def _bw_leaky_relu(g, vals, out, attrs):
    # bool * python float would promote the factor to float64, so scale
    # first and copy the unscaled gradient back over the positive slots.
    gs = g * attrs["slope"]
    np.copyto(gs, g, where=vals[0] > 0.0)
    return [gs]


def _fw_relu(vals, attrs):
    return np.maximum(vals[0], 0.0)


def _bw_relu(g, vals, out, attrs):
    return [g * (vals[0] > 0.0)]


def _fw_elu(vals, attrs):
    x = vals[0]
    return np.maximum(x, 0.0) + np.expm1(np.minimum(x, 0.0))


def _bw_elu(g, vals, out, attrs):
    # For x <= 0 the local derivative is exp(x) = elu(x) + 1; for x > 0 the
    # mask zeroes the out term and leaves 1.
    return [g * (1.0 + out * (vals[0] <= 0.0))]


def _fw_concat_cols(vals, attrs):
    return np.concatenate(vals, axis=-1)


def _bw_concat_cols(g, vals, out, attrs):
    grads = []
    start = 0
    for v in vals:
        stop = start + v.shape[-1]
        grads.append(g[..., start:stop])
        start = stop
    return grads


def _fw_row_sum(vals, attrs):
    return vals[0].sum(axis=1, keepdims=True)


def _bw_row_sum(g, vals, out, attrs):
    return [np.broadcast_to(g, vals[0].shape)]


def _fw_row_mean(vals, attrs):
    return vals[0].mean(axis=1, keepdims=True)


def _bw_row_mean(g, vals, out, attrs):
    x = vals[0]
    return [np.broadcast_to(g / x.shape[1], x.shape)]


def _fw_full_sum(vals, attrs):
    return np.asarray(vals[0].sum())


def _bw_full_sum(g, vals, out, attrs):
    return [np.broadcast_to(g, vals[0].shape)]


def _fw_transpose(vals, attrs):
    return np.swapaxes(vals[0], -1, -2)


def _bw_transpose(g, vals, out, attrs):
    return [np.swapaxes(g, -1, -2)]


def _fw_reshape(vals, attrs):
    return np.reshape(vals[0], attrs["shape"])


def _bw_reshape(g, vals, out, attrs):
    return [np.reshape(g, vals[0].shape)]


def _fw_masked_softmax(vals, attrs):
    logits, mask = vals
    keep = mask != 0.0
    any_kept = keep.any(axis=-1, keepdims=True)
    # Max over kept entries for stability; 0 placeholder on fully masked rows.
    row_max = np.amax(logits, axis=-1, keepdims=True, where=keep, initial=-np.inf)
    row_max = np.where(any_kept, row_max, 0.0)
    # Masked entries are dropped to -inf before exp, so even a masked logit
    # far above the kept maximum cannot overflow into inf * 0.
    e = np.exp(np.where(keep, logits - row_max, -np.inf))
    denom = e.sum(axis=-1, keepdims=True)
    return e / np.where(any_kept, denom, 1.0)


def _bw_masked_softmax(g, vals, out, attrs):
    # Masked entries have out == 0, so the usual softmax VJP zeroes them.
    inner = (g * out).sum(axis=-1, keepdims=True)
    return [out * (g - inner), None]


def _fw_masked_log_softmax(vals, attrs):
    logits, mask = vals
    keep = mask != 0.0
    any_kept = keep.any(axis=-1, keepdims=True)
    row_max = np.amax(logits, axis=-1, keepdims=True, where=keep, initial=-np.inf)
    row_max = np.where(any_kept, row_max, 0.0)
    shifted = np.where(keep, logits - row_max, -np.inf)
    denom = np.exp(shifted).sum(axis=-1, keepdims=True)
    # Fused log keeps a kept entry finite even when its probability would
    # underflow to an exact float zero.  Masked entries report 0.
    out = shifted - np.log(np.where(any_kept, denom, 1.0))
    return np.where(keep, out, 0.0)


def _bw_masked_log_softmax(g, vals, out, attrs):
    logits, mask = vals
    keep = mask != 0.0
    # exp(out) recovers the softmax on kept entries; masked out == 0 would
    # exponentiate to 1, so both factors are re-masked explicitly.
    probs = np.where(keep, np.exp(out), 0.0)
    inner = np.where(keep, g, 0.0).sum(axis=-1, keepdims=True)
    return [np.where(keep, g - probs * inner, 0.0), None]


def _fw_attn_coeffs(vals, attrs):
    u, vt, mask = vals
    slope = attrs["slope"]
    cache = attrs.setdefault("_cache", {})
    if cache.get("mask_ref") is not mask:
        # The mask is structural and rarely changes; its -inf additive form
        # is reused across replays.
        cache["mask_ref"] = mask
        cache["neg"] = np.where(mask != 0.0, 0.0, -np.inf).astype(u.dtype, copy=False)
    z = u + vt
    z += cache["neg"]
    mx = z.max(axis=-1, keepdims=True)
    mx[np.isneginf(mx)] = 0.0  # fully masked rows
    lmx = np.where(mx > 0.0, mx, slope * mx)
    cache["pos"] = z > 0.0
    # leaky_relu(z) composed exactly from maximum/minimum; masked entries
    # stay -inf and exponentiate to an exact 0.  Shifting by leaky(max(z))
    # is valid because leaky_relu is monotone.
    e = np.minimum(z, 0.0)
    e *= slope
    e += np.maximum(z, 0.0)
    e -= lmx
    np.exp(e, out=e)
    denom = e.sum(axis=-1, keepdims=True)
    e /= np.where(denom > 0.0, denom, 1.0)
    return e


def _bw_attn_coeffs(g, vals, out, attrs):
    u, vt, mask = vals
    slope = attrs["slope"]
    cache = attrs.get("_cache") or {}
    pos = cache.get("pos")
    if pos is None:  # backward without a recorded forward; masked entries moot
        pos = (u + vt) > 0.0
    inner = (g * out).sum(axis=-1, keepdims=True)
    gz = out * (g - inner)  # masked entries: out == 0 exactly
    _flush_subnormals(gz)  # softmax tails breed slow denormals
    gs = gz * slope
    np.copyto(gs, gz, where=pos)
    du = gs.sum(axis=-1, keepdims=True)
    dv = gs.sum(axis=-2, keepdims=True)
    return [du, dv, None]


def _fw_gather_rows(vals, attrs):
    return vals[0][attrs["indices"], :]


def _bw_gather_rows(g, vals, out, attrs):
    acc = np.zeros_like(vals[0])
    if attrs["unique"]:
        acc[attrs["indices"]] = g
    else:
        np.add.at(acc, attrs["indices"], g)
    return [acc]


def _fw_sq_row_dist(vals, attrs):
    h, m = vals
    # Direct (m, c, d) expansion: exact 0 when a row equals a centre, which
    # the expanded |h|^2 - 2hm + |m|^2 form cannot guarantee in fp.
    diff = h[:, None, :] - m[None, :, :]
    return np.einsum("mcd,mcd->mc", diff, diff)


def _bw_sq_row_dist(g, vals, out, attrs):
    h, m = vals
    diff = h[:, None, :] - m[None, :, :]
    dh = 2.0 * np.einsum("mc,mcd->md", g, diff)
    dm = -2.0 * np.einsum("mc,mcd->cd", g, diff)
    return [dh, dm]


def _cosine_parts(a, b):
    na = np.sqrt((a * a).sum(axis=1, keepdims=True))
    nb = np.sqrt((b * b).sum(axis=1, keepdims=True))
    na_safe = np.where(na > 0.0, na, 1.0)
    nb_safe = np.where(nb > 0.0, nb, 1.0)
    cos = (a @ b.T) / (na_safe * nb_safe.T)
    cos = cos * (na > 0.0) * (nb > 0.0).T
    return cos, na, nb, na_safe, nb_safe


def _fw_cosine_rows(vals, attrs):
    return _cosine_parts(vals[0], vals[1])[0]


def _bw_cosine_rows(g, vals, out, attrs):
    a, b = vals
    cos, na, nb, na_safe, nb_safe = _cosine_parts(a, b)
    g = g * (na > 0.0) * (nb > 0.0).T  # zero-norm rows: value pinned at 0
    scaled = g / (na_safe * nb_safe.T)
    da = scaled @ b - a * ((g * cos).sum(axis=1, keepdims=True) / (na_safe * na_safe))
    db = scaled.T @ a - b * ((g * cos).sum(axis=0)[:, None] / (nb_safe * nb_safe))
    return [da, db]


class _Primitive:
    __slots__ = ("kind", "arity", "check", "forward", "backward")

    def __init__(self, kind, arity, check, forward, backward):
        self.kind = kind
        self.arity = arity  # None = variadic
        self.check = check
        self.forward = forward
        self.backward = backward


_PRIMITIVES: dict[str, _Primitive] = {}


def _register(kind, arity, check, forward, backward):
    _PRIMITIVES[kind] = _Primitive(kind, arity, check, forward, backward)


_register("matmul", 2, _check_matmul, _fw_matmul, _bw_matmul)
_register("add", 2, _check_elemwise_pair, _fw_add, _bw_add)
_register("sub", 2, _check_elemwise_pair, _fw_sub, _bw_sub)
_register("mul", 2, _check_elemwise_pair, _fw_mul, _bw_mul)
_register("smul", 1, _check_unary, _fw_smul, _bw_smul)
_register("neg", 1, _check_unary, _fw_neg, _bw_neg)
_register("recip", 1, _check_unary, _fw_recip, _bw_recip)
_register("exp", 1, _check_unary, _fw_exp, _bw_exp)
_register("log", 1, _check_unary, _fw_log, _bw_log)
_register("sqrt", 1, _check_unary, _fw_sqrt, _bw_sqrt)
_register("tanh", 1, _check_unary, _fw_tanh, _bw_tanh)
_register("leaky_relu", 1, _check_unary, _fw_leaky_relu, _bw_leaky_relu)
_register("relu", 1, _check_unary, _fw_relu, _bw_relu)
_register("elu", 1, _check_unary, _fw_elu, _bw_elu)
_register("concat_cols", None, _check_concat_cols, _fw_concat_cols, _bw_concat_cols)
_register("row_sum", 1, _check_2d, _fw_row_sum, _bw_row_sum)
_register("row_mean", 1, _check_2d, _fw_row_mean, _bw_row_mean)
_register("full_sum", 1, _check_unary, _fw_full_sum, _bw_full_sum)
_register("transpose", 1, _check_matrixlike, _fw_transpose, _bw_transpose)
_register("reshape", 1, _check_reshape, _fw_reshape, _bw_reshape)
_register("masked_softmax", 2, _check_masked_softmax, _fw_masked_softmax, _bw_masked_softmax)
_register("masked_log_softmax", 2, _check_masked_softmax, _fw_masked_log_softmax, _bw_masked_log_softmax)
_register("attn_coeffs", 3, _check_attn_coeffs, _fw_attn_coeffs, _bw_attn_coeffs)
_register("gather_rows", 1, _check_gather_rows, _fw_gather_rows, _bw_gather_rows)
_register("sq_row_dist", 2, _check_rowpair_lastdim, _fw_sq_row_dist, _bw_sq_row_dist)
_register("cosine_rows", 2, _check_rowpair_lastdim, _fw_cosine_rows, _bw_cosine_rows)


def primitive_kinds() -> tuple[str, ...]:
    """All registered primitive names."""
    return tuple(_PRIMITIVES)


def _flush_subnormals(arr: Array) -> Array:
    """Zero out float32 entries below the smallest normal magnitude.

    Subnormal operands make x86 float arithmetic one to two orders of
    magnitude slower, and gradient entries below 1e-38 carry no usable
    signal, so backward treats them as exact zeros.  Works on the raw
    bits (zero exponent field) so the flush itself does no float math.
    float64 gradients never get that small here, and read-only views
    (broadcast results) are left alone; their base buffer is either
    fresh or was already flushed when it was consumed.
    """
    if arr.dtype == np.float32 and arr.flags.writeable and arr.flags.c_contiguous:
        bits = arr.view(np.int32)
        bits[(bits & 0x7F800000) == 0] = 0
    return arr


class Node:
    """One recorded computation step: a leaf value or a primitive application."""

    __slots__ = ("id", "kind", "inputs", "value", "requires_grad", "attrs")

    def __init__(self, id: int, kind: str, inputs: tuple["Node", ...],
                 value: Array, requires_grad: bool, attrs: dict | None):
        self.id = id
        self.kind = kind
        self.inputs = inputs
        self.value = value
        self.requires_grad = requires_grad
        self.attrs = attrs

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self):
        return f"Node(id={self.id}, kind={self.kind!r}, shape={self.value.shape})"


class Tape:
    """Append-only record of a differentiable computation.

    Node ids are tape positions, so every input id precedes its consumer
    and the recorded graph is acyclic by construction.
    """

    def __init__(self):
        self._nodes: list[Node] = []

    @property
    def nodes(self) -> Sequence[Node]:
        return self._nodes

    def leaf(self, value, requires_grad: bool = False) -> Node:
        node = Node(len(self._nodes), "leaf", (), as_tensor(value), requires_grad, None)
        self._nodes.append(node)
        return node

    def apply(self, kind: str, *inputs: Node, **attrs) -> Node:
        """Apply primitive ``kind`` to ``inputs`` and record the result."""
        prim = _PRIMITIVES.get(kind)
        if prim is None:
            raise ShapeError(f"unknown primitive {kind!r}")
        if prim.arity is not None and len(inputs) != prim.arity:
            raise ShapeError(f"{kind}: expected {prim.arity} inputs, got {len(inputs)}")
        prim.check(kind, tuple(n.value.shape for n in inputs), attrs)
        vals = [n.value for n in inputs]
        value = prim.forward(vals, attrs)
        requires = any(n.requires_grad for n in inputs)
        node = Node(len(self._nodes), kind, tuple(inputs), value, requires, attrs or None)
        self._nodes.append(node)
        return node

    # Convenience wrappers -------------------------------------------------

    def matmul(self, a, b):
        return self.apply("matmul", a, b)

    def add(self, a, b):
        return self.apply("add", a, b)

    def sub(self, a, b):
        return self.apply("sub", a, b)

    def mul(self, a, b):
        return self.apply("mul", a, b)

    def smul(self, a, scalar: float):
        return self.apply("smul", a, scalar=float(scalar))

    def neg(self, a):
        return self.apply("neg", a)

    def recip(self, a):
        return self.apply("recip", a)

    def exp(self, a):
        return self.apply("exp", a)

    def log(self, a):
        return self.apply("log", a)

    def sqrt(self, a):
        return self.apply("sqrt", a)

    def tanh(self, a):
        return self.apply("tanh", a)

    def leaky_relu(self, a, slope: float = 0.2):
        return self.apply("leaky_relu", a, slope=float(slope))

    def relu(self, a):
        return self.apply("relu", a)

    def elu(self, a):
        return self.apply("elu", a)

    def concat_cols(self, *parts):
        return self.apply("concat_cols", *parts)

    def row_sum(self, a):
        return self.apply("row_sum", a)

    def row_mean(self, a):
        return self.apply("row_mean", a)

    def full_sum(self, a):
        return self.apply("full_sum", a)

    def transpose(self, a):
        return self.apply("transpose", a)

    def reshape(self, a, shape: Iterable[int]):
        return self.apply("reshape", a, shape=tuple(int(s) for s in shape))

    def masked_softmax(self, logits, mask):
        return self.apply("masked_softmax", logits, mask)

    def masked_log_softmax(self, logits, mask):
        """Row log-softmax over kept entries; masked entries report 0.

        Equals log(masked_softmax(logits, mask)) on kept entries but stays
        finite when a probability underflows, so cross-entropy terms can be
        built without a separate log.
        """
        return self.apply("masked_log_softmax", logits, mask)

    def attn_coeffs(self, scores_src, scores_dst, mask, slope: float = 0.2):
        """Fused attention: row-softmax of masked LeakyReLU(u + v^T).

        ``scores_src`` is (.., m, 1), ``scores_dst`` is (.., 1, m) and
        ``mask`` is (.., m, m); entries where ``mask`` is zero come out
        exactly 0 and fully masked rows are all-zero.  The mask itself is
        treated as constant structure (it gets no gradient, and its -inf
        form is cached between replays).
        """
        return self.apply("attn_coeffs", scores_src, scores_dst, mask, slope=float(slope))

    def gather_rows(self, a, indices: Iterable[int]):
        idx = np.asarray(list(indices), dtype=np.intp)
        unique = bool(np.unique(idx).size == idx.size)
        return self.apply("gather_rows", a, indices=idx, unique=unique)

    def sq_row_dist(self, rows, centres):
        return self.apply("sq_row_dist", rows, centres)

    def cosine_rows(self, rows, refs):
        return self.apply("cosine_rows", rows, refs)

    # Execution ------------------------------------------------------------

    def set_leaf(self, node: Node, value) -> None:
        """Swap a leaf's value (same shape) for a later :meth:`replay`."""
        if node.kind != "leaf":
            raise ShapeError("set_leaf target is not a leaf")
        arr = as_tensor(value)
        if arr.shape != node.value.shape:
            raise ShapeError(f"set_leaf: shape {arr.shape} != recorded {node.value.shape}")
        if arr.dtype != node.value.dtype:
            raise ShapeError(f"set_leaf: dtype {arr.dtype} != recorded {node.value.dtype}")
        node.value = arr

    def replay(self) -> None:
        """Recompute every non-leaf value from current leaf values, in order."""
        prims = _PRIMITIVES
        for node in self._nodes:
            if node.kind != "leaf":
                prim = prims[node.kind]
                node.value = prim.forward([n.value for n in node.inputs], node.attrs)

    def backward(self, root: Node, wrt: Sequence[Node] | None = None) -> dict[int, Array]:
        """Reverse-accumulate gradients of scalar ``root``.

        Returns a map from node id to a gradient of the node's value shape.
        With ``wrt`` given, only those nodes are reported; otherwise every
        requires-grad node is present (zeros if it does not reach ``root``).
        """
        if root.value.size != 1:
            raise ShapeError(f"backward root must be scalar, got shape {root.value.shape}")
        grads: dict[int, Array] = {root.id: np.ones_like(root.value)}
        prims = _PRIMITIVES
        for node in reversed(self._nodes[: root.id + 1]):
            g = grads.get(node.id)
            if g is None or not node.inputs:
                continue
            _flush_subnormals(g)
            in_grads = prims[node.kind].backward(g, [n.value for n in node.inputs],
                                                 node.value, node.attrs)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                prev = grads.get(inp.id)
                grads[inp.id] = ig if prev is None else prev + ig
        targets = wrt if wrt is not None else [n for n in self._nodes if n.requires_grad]
        out: dict[int, Array] = {}
        for node in targets:
            g = grads.get(node.id)
            out[node.id] = np.zeros_like(node.value) if g is None else np.asarray(g)
        return out


def grad_check(build: Callable[[Tape, Node], Node], point, h: float = 1e-5) -> float:
    """Compare reverse-mode gradients against central finite differences.

    ``build(tape, x)`` must construct and return a scalar root from leaf
    ``x``.  Returns the maximum relative error over coordinates of
    ``point``, with denominator ``max(|analytic|, |numeric|, 1e-8)``.
    """
    point = as_tensor(point)
    tape = Tape()
    x = tape.leaf(point, requires_grad=True)
    root = build(tape, x)
    if root.value.size != 1:
        raise ShapeError("grad_check function must be scalar-valued")
    if not np.isfinite(root.value).all():
        raise DomainError("grad_check function is not finite at the given point")
    analytic = tape.backward(root, wrt=[x])[x.id]

    numeric = np.zeros_like(point)
    flat = point.ravel()
    num_flat = numeric.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        tape.set_leaf(x, point)
        tape.replay()
        f_plus = float(root.value)
        flat[i] = orig - h
        tape.set_leaf(x, point)
        tape.replay()
        f_minus = float(root.value)
        flat[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise DomainError("grad_check function is not finite near the given point")
        num_flat[i] = (f_plus - f_minus) / (2.0 * h)
    tape.set_leaf(x, point)
    tape.replay()

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0
