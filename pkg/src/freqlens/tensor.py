"""Dense float64 tensors with a tape-based reverse-mode gradient engine.

Every primitive is registered in ``OPS`` as a (forward, backward) pair.
``forward(arrays, attrs)`` returns ``(output, ctx)``; ``backward(ctx, g, needs)``
returns one gradient (or ``None``) per input. While a :class:`GradTape` is
active, every primitive call is appended to it, and :func:`grad` walks the
tape in reverse.

Conventions:
    * relu'(0) = 0
    * max-pool routes the gradient to the first maximal element of each
      window in row-major order
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes are invalid for an op."""


class UnsupportedOpError(KeyError):
    pass


class DisconnectedGraphError(RuntimeError):
    """A ``wrt`` tensor has no path to the loss on the tape."""


class Tensor:
    """Immutable float64 array, optionally produced by a recorded op."""

    __slots__ = ("data", "name", "_tape", "_index")

    def __init__(self, data: Any, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)
        arr.setflags(write=False)
        self.data = arr
        self.name = name
        self._tape: GradTape | None = None
        self._index = -1

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=DTYPE)
        if not arr.flags.c_contiguous:
            arr = arr.copy()  # ascontiguousarray would promote 0-d to 1-d
        arr.setflags(write=False)
        t.data = arr
        t.name = None
        t._tape = None
        t._index = -1
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, name={self.name!r})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def relu(self):
        return relu(self)

    def sum(self):
        return total(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


@dataclass
class Record:
    op: str
    inputs: tuple[Tensor, ...]
    attrs: dict
    output: Tensor
    ctx: Any


_ACTIVE: list["GradTape"] = []


class GradTape:
    """Ordered record of primitive ops executed while the tape is active.

    Usage::

        with GradTape() as tape:
            loss = ...
        gx, = tape.gradient(loss, [x])
    """

    def __init__(self):
        self.records: list[Record] = []

    def __enter__(self) -> "GradTape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def _record(self, op, inputs, attrs, output, ctx) -> None:
        output._tape = self
        output._index = len(self.records)
        self.records.append(Record(op, inputs, attrs, output, ctx))

    def replay(self) -> list[np.ndarray]:
        """Re-execute every recorded op from the tape's leaf inputs.

        Returns the recomputed outputs in record order; they are bit-identical
        to the recorded ones because every kernel is deterministic.
        """
        fresh: dict[int, np.ndarray] = {}
        outs = []
        for rec in self.records:
            arrays = [fresh.get(id(t), t.data) for t in rec.inputs]
            out, _ = OPS[rec.op][0](arrays, rec.attrs)
            fresh[id(rec.output)] = out
            outs.append(out)
        return outs

    def gradient(self, loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
        if loss.data.size != 1:
            raise ShapeError(f"grad: loss must be scalar, got shape {loss.shape}")
        if loss._tape is not self:
            raise DisconnectedGraphError("loss was not recorded on this tape")
        stop = loss._index
        # forward reachability from wrt, so backward skips dead branches
        live = {id(t) for t in wrt}
        for rec in self.records[: stop + 1]:
            if any(id(t) in live for t in rec.inputs):
                live.add(id(rec.output))
        wrt_ids = {id(t) for t in wrt}
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for rec in reversed(self.records[: stop + 1]):
            key = id(rec.output)
            g = grads.get(key) if key in wrt_ids else grads.pop(key, None)
            if g is None:
                continue
            needs = tuple(id(t) in live for t in rec.inputs)
            if not any(needs):
                continue
            in_grads = OPS[rec.op][1](rec.ctx, g, needs)
            for t, need, gi in zip(rec.inputs, needs, in_grads):
                if not need or gi is None:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        result = []
        for t in wrt:
            g = grads.get(id(t))
            if g is None:
                raise DisconnectedGraphError(
                    f"tensor {t.name or t.shape} does not influence the loss"
                )
            result.append(np.asarray(g, dtype=DTYPE).reshape(t.shape))
        return result


def grad(loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradient of scalar ``loss`` with respect to each tensor in ``wrt``."""
    if loss._tape is None:
        raise DisconnectedGraphError("loss was not computed under a GradTape")
    return loss._tape.gradient(loss, wrt)


# ---------------------------------------------------------------------------
# Op registry
# ---------------------------------------------------------------------------

Forward = Callable[[list, dict], tuple]
Backward = Callable[[Any, np.ndarray, tuple], list]
OPS: dict[str, tuple[Forward, Backward]] = {}


def register(name: str):
    def deco(pair):
        fwd, bwd = pair()
        OPS[name] = (fwd, bwd)
        return pair

    return deco


def forward_op(op: str, inputs: Sequence[Tensor], attrs: dict | None = None) -> Tensor:
    """Run primitive ``op`` on ``inputs`` and record it on the active tape."""
    try:
        fwd, _ = OPS[op]
    except KeyError:
        raise UnsupportedOpError(f"unsupported op {op!r}") from None
    attrs = attrs or {}
    inputs = tuple(_as_tensor(t) for t in inputs)
    out, ctx = fwd([t.data for t in inputs], attrs)
    result = Tensor._wrap(out)
    if _ACTIVE:
        _ACTIVE[-1]._record(op, inputs, attrs, result, ctx)
    return result


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


@register("add")
def _add():
    def fwd(xs, attrs):
        a, b = xs
        _check_broadcast("add", a, b)
        return a + b, (a.shape, b.shape)

    def bwd(ctx, g, needs):
        sa, sb = ctx
        return [
            _unbroadcast(g, sa) if needs[0] else None,
            _unbroadcast(g, sb) if needs[1] else None,
        ]

    return fwd, bwd


@register("sub")
def _sub():
    def fwd(xs, attrs):
        a, b = xs
        _check_broadcast("sub", a, b)
        return a - b, (a.shape, b.shape)

    def bwd(ctx, g, needs):
        sa, sb = ctx
        return [
            _unbroadcast(g, sa) if needs[0] else None,
            _unbroadcast(-g, sb) if needs[1] else None,
        ]

    return fwd, bwd


@register("mul")
def _mul():
    def fwd(xs, attrs):
        a, b = xs
        _check_broadcast("mul", a, b)
        return a * b, (a, b)

    def bwd(ctx, g, needs):
        a, b = ctx
        return [
            _unbroadcast(g * b, a.shape) if needs[0] else None,
            _unbroadcast(g * a, b.shape) if needs[1] else None,
        ]

    return fwd, bwd


@register("scale")
def _scale():
    def fwd(xs, attrs):
        return xs[0] * attrs["factor"], attrs["factor"]

    def bwd(ctx, g, needs):
        return [g * ctx]

    return fwd, bwd


@register("sum")
def _sum():
    def fwd(xs, attrs):
        return np.asarray(xs[0].sum()), xs[0].shape

    def bwd(ctx, g, needs):
        return [np.broadcast_to(g, ctx).copy()]

    return fwd, bwd


@register("matmul")
def _matmul():
    # a: (..., n, k); b: (k, m) or (..., k, m) with matching leading dims
    def fwd(xs, attrs):
        a, b = xs
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul: inner dims disagree, {a.shape} @ {b.shape}")
        if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
            raise ShapeError(f"matmul: batch dims disagree, {a.shape} @ {b.shape}")
        return a @ b, (a, b)

    def bwd(ctx, g, needs):
        a, b = ctx
        ga = gb = None
        if needs[0]:
            ga = g @ np.swapaxes(b, -1, -2)
        if needs[1]:
            if b.ndim == 2:
                gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(a, -1, -2) @ g
        return [ga, gb]

    return fwd, bwd


@register("conv2d")
def _conv2d():
    # direct convolution over sliding windows; x (B,C,H,W), w (O,C,kh,kw)
    def fwd(xs, attrs):
        x, w = xs
        stride, pad = attrs.get("stride", 1), attrs.get("pad", 0)
        if x.ndim != 4 or w.ndim != 4:
            raise ShapeError(f"conv2d: expected 4-d input and kernel, got {x.shape}, {w.shape}")
        if x.shape[1] != w.shape[1]:
            raise ShapeError(
                f"conv2d: input channels {x.shape[1]} != kernel channels {w.shape[1]}"
            )
        kh, kw = w.shape[2:]
        if pad:
            x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        if x.shape[2] < kh or x.shape[3] < kw:
            raise ShapeError(f"conv2d: kernel {w.shape[2:]} larger than input {x.shape[2:]}")
        win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        return out, (x.shape, win, w, stride, pad)

    def bwd(ctx, g, needs):
        xshape, win, w, stride, pad = ctx
        gx = gw = None
        if needs[1]:
            gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        if needs[0]:
            kh, kw = w.shape[2:]
            ho, wo = g.shape[2:]
            gx = np.zeros(xshape)
            for i in range(kh):
                for j in range(kw):
                    contrib = np.tensordot(g, w[:, :, i, j], axes=([1], [0]))
                    gx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                        contrib.transpose(0, 3, 1, 2)
                    )
            if pad:
                gx = gx[:, :, pad:-pad, pad:-pad]
        return [gx, gw]

    return fwd, bwd


@register("relu")
def _relu():
    def fwd(xs, attrs):
        x = xs[0]
        mask = x > 0
        return np.where(mask, x, 0.0), mask

    def bwd(ctx, g, needs):
        return [np.where(ctx, g, 0.0)]

    return fwd, bwd


@register("tanh")
def _tanh():
    def fwd(xs, attrs):
        y = np.tanh(xs[0])
        return y, y

    def bwd(ctx, g, needs):
        return [g * (1.0 - ctx * ctx)]

    return fwd, bwd


@register("maxpool2d")
def _maxpool2d():
    def fwd(xs, attrs):
        x = xs[0]
        k = attrs.get("size", 2)
        if x.ndim != 4:
            raise ShapeError(f"maxpool2d: expected 4-d input, got {x.shape}")
        b, c, h, w = x.shape
        ho, wo = h // k, w // k
        if ho == 0 or wo == 0:
            raise ShapeError(f"maxpool2d: window {k} larger than input {x.shape[2:]}")
        blocks = (
            x[:, :, : ho * k, : wo * k]
            .reshape(b, c, ho, k, wo, k)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(b, c, ho, wo, k * k)
        )
        idx = blocks.argmax(axis=-1)  # first maximum wins ties
        out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
        return out, (x.shape, idx, k)

    def bwd(ctx, g, needs):
        shape, idx, k = ctx
        b, c, h, w = shape
        ho, wo = idx.shape[2:]
        blocks = np.zeros((b, c, ho, wo, k * k))
        np.put_along_axis(blocks, idx[..., None], g[..., None], axis=-1)
        gx = np.zeros(shape)
        gx[:, :, : ho * k, : wo * k] = (
            blocks.reshape(b, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho * k, wo * k)
        )
        return [gx]

    return fwd, bwd


@register("meanpool")
def _meanpool():
    def fwd(xs, attrs):
        x = xs[0]
        axis = attrs["axis"]
        return x.mean(axis=axis), (x.shape, axis)

    def bwd(ctx, g, needs):
        shape, axis = ctx
        n = shape[axis]
        return [np.broadcast_to(np.expand_dims(g, axis) / n, shape).copy()]

    return fwd, bwd


@register("reshape")
def _reshape():
    def fwd(xs, attrs):
        x = xs[0]
        shape = tuple(attrs["shape"])
        try:
            return x.reshape(shape), x.shape
        except ValueError:
            raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}") from None

    def bwd(ctx, g, needs):
        return [g.reshape(ctx)]

    return fwd, bwd


@register("transpose")
def _transpose():
    def fwd(xs, attrs):
        axes = tuple(attrs["axes"])
        if sorted(axes) != list(range(xs[0].ndim)):
            raise ShapeError(f"transpose: axes {axes} invalid for shape {xs[0].shape}")
        return xs[0].transpose(axes), axes

    def bwd(ctx, g, needs):
        return [g.transpose(np.argsort(ctx))]

    return fwd, bwd


@register("layer_norm")
def _layer_norm():
    # normalizes over the last axis; inputs x, gain, bias
    def fwd(xs, attrs):
        x, gain, bias = xs
        d = x.shape[-1]
        if gain.shape != (d,) or bias.shape != (d,):
            raise ShapeError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} vs width {d}")
        eps = attrs.get("eps", 1e-5)
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
        xhat = xc * inv
        return xhat * gain + bias, (xhat, inv, gain)

    def bwd(ctx, g, needs):
        xhat, inv, gain = ctx
        gx = ggain = gbias = None
        if needs[0]:
            gh = g * gain
            gx = inv * (
                gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        if needs[1]:
            ggain = (g * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
        if needs[2]:
            gbias = g.reshape(-1, g.shape[-1]).sum(axis=0)
        return [gx, ggain, gbias]

    return fwd, bwd


def _log_softmax(z: np.ndarray) -> np.ndarray:
    zmax = z.max(axis=-1, keepdims=True)
    shifted = z - zmax
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


@register("softmax_ce")
def _softmax_ce():
    # mean softmax cross-entropy; labels passed as attrs
    def fwd(xs, attrs):
        z = xs[0]
        labels = np.asarray(attrs["labels"])
        if z.ndim != 2 or labels.shape != (z.shape[0],):
            raise ShapeError(f"softmax_ce: logits {z.shape} vs labels {labels.shape}")
        logp = _log_softmax(z)
        rows = np.arange(z.shape[0])
        loss = -logp[rows, labels].mean()
        return np.asarray(loss), (logp, labels)

    def bwd(ctx, g, needs):
        logp, labels = ctx
        p = np.exp(logp)
        p[np.arange(len(labels)), labels] -= 1.0
        return [p * (g / len(labels))]

    return fwd, bwd


@register("margin")
def _margin():
    # per-sample z_y - max_{j != y} z_j
    def fwd(xs, attrs):
        z = xs[0]
        labels = np.asarray(attrs["labels"])
        rows = np.arange(z.shape[0])
        others = z.copy()
        others[rows, labels] = -np.inf
        j = others.argmax(axis=1)
        return z[rows, labels] - z[rows, j], (z.shape, labels, j)

    def bwd(ctx, g, needs):
        shape, labels, j = ctx
        gz = np.zeros(shape)
        rows = np.arange(shape[0])
        gz[rows, labels] += g
        gz[rows, j] -= g
        return [gz]

    return fwd, bwd


@register("attention")
def _attention():
    # single-head scaled dot-product attention over (B, T, D)
    def fwd(xs, attrs):
        q, k, v = xs
        if not (q.ndim == k.ndim == v.ndim == 3) or q.shape != k.shape or k.shape[:2] != v.shape[:2]:
            raise ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape}")
        s = 1.0 / math.sqrt(q.shape[-1])
        scores = (q @ k.transpose(0, 2, 1)) * s
        p = np.exp(_log_softmax(scores))
        return p @ v, (q, k, v, p, s)

    def bwd(ctx, g, needs):
        q, k, v, p, s = ctx
        gv = p.transpose(0, 2, 1) @ g if needs[2] else None
        gp = g @ v.transpose(0, 2, 1)
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * s
        gq = gs @ k if needs[0] else None
        gk = gs.transpose(0, 2, 1) @ q if needs[1] else None
        return [gq, gk, gv]

    return fwd, bwd


# ---------------------------------------------------------------------------
# Functional front-end
# ---------------------------------------------------------------------------


def add(a, b):
    return forward_op("add", [a, b])


def sub(a, b):
    return forward_op("sub", [a, b])


def mul(a, b):
    return forward_op("mul", [a, b])


def scale(x, factor: float):
    return forward_op("scale", [x], {"factor": float(factor)})


def total(x):
    return forward_op("sum", [x])


def matmul(a, b):
    return forward_op("matmul", [a, b])


def conv2d(x, w, stride: int = 1, pad: int = 0):
    return forward_op("conv2d", [x, w], {"stride": stride, "pad": pad})


def relu(x):
    return forward_op("relu", [x])


def tanh(x):
    return forward_op("tanh", [x])


def maxpool2d(x, size: int = 2):
    return forward_op("maxpool2d", [x], {"size": size})


def meanpool(x, axis: int):
    return forward_op("meanpool", [x], {"axis": axis})


def reshape(x, shape):
    return forward_op("reshape", [x], {"shape": tuple(shape)})


def transpose(x, axes):
    return forward_op("transpose", [x], {"axes": tuple(axes)})


def layer_norm(x, gain, bias, eps: float = 1e-5):
    return forward_op("layer_norm", [x, gain, bias], {"eps": eps})


def softmax_cross_entropy(logits, labels):
    return forward_op("softmax_ce", [logits], {"labels": np.asarray(labels, dtype=np.int64)})


def margin(logits, labels):
    return forward_op("margin", [logits], {"labels": np.asarray(labels, dtype=np.int64)})


def attention(q, k, v):
    return forward_op("attention", [q, k, v])
