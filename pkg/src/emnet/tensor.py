"""Tape-based reverse-mode autodiff over numpy buffers.

Tensors are channel-first volumes ``[C, H, W, D]``, token sequences ``[L, C]``,
or any other numpy shape; batch size is implicitly 1 throughout the package.
Every differentiable op appends one node to a module-level tape; ``backward``
replays the tape in exact reverse execution order, accumulates gradients into
``.grad`` of every tensor that requires them, then clears the tape.

Determinism: forward passes are bit-identical for identical inputs — kernels
and numpy reductions use a fixed accumulation order and nothing here depends
on wall clock, hashing, or thread scheduling.
"""

from __future__ import annotations

import numpy as np

from . import precision
from .errors import ShapeError, TrainError
from .kernels import active as _kern

# --------------------------------------------------------------------------- #
# tape machinery
# --------------------------------------------------------------------------- #


class Node:
    __slots__ = ("inputs", "out", "bwd")

    def __init__(self, inputs, out, bwd):
        self.inputs = inputs
        self.out = out
        self.bwd = bwd


_TAPE: list[Node] = []
_GRAD_ENABLED = True


class no_grad:
    """Context manager: ops executed inside record nothing on the tape."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def tape_size() -> int:
    return len(_TAPE)


def clear_tape() -> None:
    _TAPE.clear()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=precision.dtype())
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad}{tag})"

    # operator sugar -------------------------------------------------------- #
    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


def param(data, name: str | None = None) -> Tensor:
    """A leaf tensor that accumulates gradients (a trainable parameter)."""
    return Tensor(data, requires_grad=True, name=name)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def record_op(out_data, inputs: tuple, bwd) -> Tensor:
    """Create the output tensor of an op and register its backward closure.

    ``bwd(grad_out) -> tuple`` must return one gradient array (or None) per
    input, each freshly allocated and shaped like the matching input.
    """
    out = Tensor(out_data)
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _TAPE.append(Node(inputs, out, bwd))
    return out


def backward(loss: Tensor) -> None:
    """Reverse sweep from a scalar loss; populates ``.grad`` and clears the tape."""
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise TrainError("backward on a tensor with no recorded dependencies")
    loss.grad = np.ones_like(loss.data)
    try:
        for node in reversed(_TAPE):
            gout = node.out.grad
            if gout is None:
                continue
            grads = node.bwd(gout)
            for t, g in zip(node.inputs, grads):
                if g is None or not t.requires_grad:
                    continue
                if t.grad is None:
                    t.grad = g
                else:
                    t.grad = t.grad + g
    finally:
        _TAPE.clear()


# --------------------------------------------------------------------------- #
# broadcasting helpers
# --------------------------------------------------------------------------- #


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, opname: str):
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(
            f"{opname}: shapes {a.data.shape} and {b.data.shape} do not broadcast"
        ) from None


# --------------------------------------------------------------------------- #
# elementwise ops
# --------------------------------------------------------------------------- #


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    return record_op(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    return record_op(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return record_op(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    return record_op(
        ad / bd,
        (a, b),
        lambda g: (
            _unbroadcast(g / bd, ad.shape),
            _unbroadcast(-g * ad / (bd * bd), bd.shape),
        ),
    )


def neg(a: Tensor) -> Tensor:
    return record_op(-a.data, (a,), lambda g: (-g,))


def powc(a: Tensor, p: float) -> Tensor:
    """Elementwise power with a constant exponent."""
    ad = a.data
    return record_op(ad**p, (a,), lambda g: (g * p * ad ** (p - 1),))


def texp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return record_op(out, (a,), lambda g: (g * out,))


def tlog(a: Tensor) -> Tensor:
    ad = a.data
    return record_op(np.log(ad), (a,), lambda g: (g / ad,))


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    ad = a.data
    out = np.where(ad > 0, ad, slope * ad)
    return record_op(out, (a,), lambda g: (g * np.where(ad > 0, 1.0, slope),))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return record_op(out, (a,), lambda g: (g * out * (1.0 - out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # evaluated branch-wise to stay overflow-free in both tails
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(a: Tensor) -> Tensor:
    ad = a.data
    s = _sigmoid(ad)
    return record_op(ad * s, (a,), lambda g: (g * (s * (1.0 + ad * (1.0 - s))),))


_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximation GELU (the common network variant)."""
    ad = a.data
    inner = _GELU_C * (ad + 0.044715 * ad**3)
    t = np.tanh(inner)

    def bwd(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * ad**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * ad * (1.0 - t * t) * dinner),)

    return record_op(0.5 * ad * (1.0 + t), (a,), bwd)


def softplus(a: Tensor) -> Tensor:
    ad = a.data
    out = np.logaddexp(0.0, ad)
    return record_op(out, (a,), lambda g: (g * _sigmoid(ad),))


def ttanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return record_op(out, (a,), lambda g: (g * (1.0 - out * out),))


# --------------------------------------------------------------------------- #
# reductions
# --------------------------------------------------------------------------- #


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    ad = a.data
    out = ad.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, ad.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, ad.shape).copy(),)

    return record_op(out, (a,), bwd)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    ad = a.data
    out = ad.mean(axis=axis, keepdims=keepdims)
    count = ad.size if axis is None else ad.shape[axis] if isinstance(axis, int) else int(
        np.prod([ad.shape[i] for i in axis])
    )

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / count, ad.shape).copy(),)
        gk = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gk / count, ad.shape).copy(),)

    return record_op(out, (a,), bwd)


# --------------------------------------------------------------------------- #
# linear algebra / shape ops
# --------------------------------------------------------------------------- #


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul needs 2-D operands, got {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[-2] or ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(f"matmul: incompatible shapes {ad.shape} @ {bd.shape}")

    def bwd(g):
        return (
            np.matmul(g, bd.swapaxes(-1, -2)),
            np.matmul(ad.swapaxes(-1, -2), g),
        )

    return record_op(np.matmul(ad, bd), (a, b), bwd)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w (+ b)`` with ``w`` shaped [in, out]."""
    out = matmul(x, w)
    return out if b is None else add(out, b)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    return record_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return record_op(
        np.ascontiguousarray(a.data.transpose(axes)),
        (a,),
        lambda g: (np.ascontiguousarray(g.transpose(inv)),),
    )


def getitem(a: Tensor, key) -> Tensor:
    out = a.data[key]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)
    shape = a.data.shape

    def bwd(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[key] = g
        return (gx,)

    return record_op(out.copy(), (a,), bwd)


def concat(tensors: list, axis: int = 0) -> Tensor:
    datas = [t.data for t in tensors]
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return record_op(np.concatenate(datas, axis=axis), tuple(tensors), bwd)


# --------------------------------------------------------------------------- #
# convolution ops (kernel-backed)
# --------------------------------------------------------------------------- #


def conv3d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """3-D cross-correlation. ``x``: [Ci,H,W,D]; ``w``: [Co,Ci,k,k,k]; ``b``: [Co]."""
    xd, wd = x.data, w.data
    if xd.ndim != 4 or wd.ndim != 5:
        raise ShapeError(f"conv3d: expected x[C,H,W,D], w[Co,Ci,k,k,k]; got {xd.shape}, {wd.shape}")
    if xd.shape[0] != wd.shape[1]:
        raise ShapeError(f"conv3d: input channels {xd.shape[0]} != weight channels {wd.shape[1]}")
    k = wd.shape[2]
    for ax, n in enumerate(xd.shape[1:]):
        if (n + 2 * padding - k) // stride + 1 < 1:
            raise ShapeError(
                f"conv3d: output extent < 1 on axis {ax} (input {n}, kernel {k}, "
                f"stride {stride}, padding {padding})"
            )
    y = _kern().conv3d_fwd(xd, wd, b.data, stride, padding)

    def bwd(g):
        return _kern().conv3d_bwd(xd, wd, np.ascontiguousarray(g), stride, padding)

    return record_op(y, (x, w, b), bwd)


def deconv3d(x: Tensor, w: Tensor, b: Tensor, stride: int) -> Tensor:
    """Transposed 3-D convolution. ``x``: [Ci,H,W,D]; ``w``: [Ci,Co,k,k,k].

    Output spatial extent is ``(n-1)*stride + k``; with ``k == stride`` this is
    an exact ×stride upsampling.
    """
    xd, wd = x.data, w.data
    if xd.ndim != 4 or wd.ndim != 5:
        raise ShapeError(f"deconv3d: expected x[C,H,W,D], w[Ci,Co,k,k,k]; got {xd.shape}, {wd.shape}")
    if xd.shape[0] != wd.shape[0]:
        raise ShapeError(f"deconv3d: input channels {xd.shape[0]} != weight channels {wd.shape[0]}")
    y = _kern().deconv3d_fwd(xd, wd, b.data, stride)

    def bwd(g):
        return _kern().deconv3d_bwd(xd, wd, np.ascontiguousarray(g), stride)

    return record_op(y, (x, w, b), bwd)


# --------------------------------------------------------------------------- #
# normalization (composed from primitives; backward comes from the tape)
# --------------------------------------------------------------------------- #


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the trailing axis, then apply the affine pair."""
    if x.data.shape[-1] != gamma.data.shape[-1]:
        raise ShapeError(
            f"layer_norm: trailing dim {x.data.shape[-1]} != affine width {gamma.data.shape[-1]}"
        )
    mu = tmean(x, axis=-1, keepdims=True)
    xc = sub(x, mu)
    var = tmean(mul(xc, xc), axis=-1, keepdims=True)
    inv = powc(add(var, Tensor(np.asarray(eps))), -0.5)
    return add(mul(mul(xc, inv), gamma), beta)


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over the spatial axes of a [C,H,W,D] volume."""
    if x.data.ndim != 4:
        raise ShapeError(f"instance_norm expects [C,H,W,D], got {x.data.shape}")
    mu = tmean(x, axis=(1, 2, 3), keepdims=True)
    xc = sub(x, mu)
    var = tmean(mul(xc, xc), axis=(1, 2, 3), keepdims=True)
    inv = powc(add(var, Tensor(np.asarray(eps))), -0.5)
    g = reshape(gamma, (-1, 1, 1, 1))
    b = reshape(beta, (-1, 1, 1, 1))
    return add(mul(mul(xc, inv), g), b)


# --------------------------------------------------------------------------- #
# parameter containers
# --------------------------------------------------------------------------- #


class Module:
    """Minimal parameter container with deterministic registry walks.

    Shared tensors and aliased submodules are yielded once, under the first
    name encountered, so optimizers never apply an update twice.
    """

    def named_params(self, prefix: str = "", _seen=None):
        seen = _seen if _seen is not None else set()
        for key, val in vars(self).items():
            if isinstance(val, Tensor):
                if val.requires_grad and id(val) not in seen:
                    seen.add(id(val))
                    yield prefix + key, val
            elif isinstance(val, Module):
                if id(val) not in seen:
                    seen.add(id(val))
                    yield from val.named_params(prefix + key + ".", seen)
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        if id(item) not in seen:
                            seen.add(id(item))
                            yield from item.named_params(f"{prefix}{key}.{i}.", seen)
                    elif isinstance(item, Tensor) and item.requires_grad \
                            and id(item) not in seen:
                        seen.add(id(item))
                        yield f"{prefix}{key}.{i}", item

    def params(self):
        return [p for _, p in self.named_params()]

    def num_params(self) -> int:
        return sum(p.data.size for p in self.params())
