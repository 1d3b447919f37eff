"""Desk-scale classifiers: a three-block ConvNet and a two-block attention net.

Both are pure functions of a :class:`ModelParams` weight map, so the same
forward pass serves training (gradients w.r.t. weights) and attacks
(gradients w.r.t. the input images).
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor

ARCHS = ("tiny_convnet", "tiny_attn")
CONV_CHANNELS = (16, 32, 64)
PATCH = 4
WIDTH = 64
MLP_WIDTH = 128
DEPTH = 2

CKPT_MAGIC = b"FQLNCKPT"
CKPT_VERSION = 1


class InvalidShapeError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class ModelParams:
    arch: str
    weights: dict[str, np.ndarray]
    num_classes: int
    input_shape: tuple[int, int, int]
    use_pos_emb: bool = True

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.arch,
            {k: v.copy() for k, v in self.weights.items()},
            self.num_classes,
            tuple(self.input_shape),
            self.use_pos_emb,
        )


@dataclass
class LabeledBatch:
    images: np.ndarray  # (B, C, H, W) in [0, 1]
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


def weight_shapes(arch: str, input_shape, num_classes: int) -> dict[str, tuple[int, ...]]:
    """Named weight shapes demanded by ``arch`` for the given input."""
    c, h, w = input_shape
    shapes: dict[str, tuple[int, ...]] = {}
    if arch == "tiny_convnet":
        cin = c
        for i, cout in enumerate(CONV_CHANNELS):
            shapes[f"conv{i}.w"] = (cout, cin, 3, 3)
            shapes[f"conv{i}.b"] = (cout,)
            cin = cout
            h, w = h // 2, w // 2
        shapes["head.w"] = (cin * h * w, num_classes)
        shapes["head.b"] = (num_classes,)
    elif arch == "tiny_attn":
        tokens = (h // PATCH) * (w // PATCH)
        shapes["embed.w"] = (c * PATCH * PATCH, WIDTH)
        shapes["embed.b"] = (WIDTH,)
        shapes["pos"] = (tokens, WIDTH)
        for i in range(DEPTH):
            p = f"block{i}."
            shapes[p + "ln1.g"] = (WIDTH,)
            shapes[p + "ln1.b"] = (WIDTH,)
            for name in ("q", "k", "v", "o"):
                shapes[p + name] = (WIDTH, WIDTH)
            shapes[p + "ln2.g"] = (WIDTH,)
            shapes[p + "ln2.b"] = (WIDTH,)
            shapes[p + "fc1.w"] = (WIDTH, MLP_WIDTH)
            shapes[p + "fc1.b"] = (MLP_WIDTH,)
            shapes[p + "fc2.w"] = (MLP_WIDTH, WIDTH)
            shapes[p + "fc2.b"] = (WIDTH,)
        shapes["ln.g"] = (WIDTH,)
        shapes["ln.b"] = (WIDTH,)
        shapes["head.w"] = (WIDTH, num_classes)
        shapes["head.b"] = (num_classes,)
    else:
        raise InvalidShapeError(f"unknown arch {arch!r}; expected one of {ARCHS}")
    return shapes


def _validate(arch, input_shape, num_classes):
    if arch not in ARCHS:
        raise InvalidShapeError(f"unknown arch {arch!r}; expected one of {ARCHS}")
    if len(input_shape) != 3:
        raise InvalidShapeError(f"input_shape must be (C, H, W), got {input_shape}")
    c, h, w = input_shape
    if c < 1 or h < 8 or w < 8:
        raise InvalidShapeError(f"input_shape {input_shape}: need C >= 1 and H, W >= 8")
    if num_classes < 2:
        raise InvalidShapeError(f"num_classes must be >= 2, got {num_classes}")
    if arch == "tiny_attn" and (h % PATCH or w % PATCH):
        raise InvalidShapeError(f"tiny_attn needs H, W divisible by patch size {PATCH}")


def init_model(
    arch: str,
    input_shape,
    num_classes: int,
    seed: int,
    use_pos_emb: bool = True,
) -> ModelParams:
    """Fresh parameters with fan-in scaled uniform weights.

    Biases and layer-norm shifts start at zero, layer-norm gains at one. Conv
    weights, the patch embedding and the MLP hidden layer use the He-uniform
    bound sqrt(6 / fan_in); the classifier head and attention projections use
    1 / sqrt(fan_in).
    """
    input_shape = tuple(int(s) for s in input_shape)
    _validate(arch, input_shape, num_classes)
    rng = np.random.default_rng(seed)
    weights = {}
    for name, shape in weight_shapes(arch, input_shape, num_classes).items():
        if name.endswith(".b"):
            weights[name] = np.zeros(shape)
        elif name.endswith(".g"):
            weights[name] = np.ones(shape)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            if name == "pos":
                bound = 0.02
            elif name.startswith("conv") or name.endswith("fc1.w") or name == "embed.w":
                bound = math.sqrt(6.0 / fan_in)
            else:
                bound = 1.0 / math.sqrt(fan_in)
            weights[name] = rng.uniform(-bound, bound, size=shape)
    return ModelParams(arch, weights, num_classes, input_shape, use_pos_emb)


def as_tensors(params: ModelParams) -> dict[str, Tensor]:
    return {k: Tensor(v, name=k) for k, v in params.weights.items()}


def _images(batch) -> np.ndarray | Tensor:
    if isinstance(batch, LabeledBatch):
        return batch.images
    return batch


def forward_logits(params: ModelParams, batch, weights: dict[str, Tensor] | None = None) -> Tensor:
    """Logits of shape (B, num_classes).

    ``batch`` may be a :class:`LabeledBatch`, an image array or a Tensor (pass a
    Tensor under a tape to differentiate w.r.t. the images). ``weights``
    overrides the parameter tensors, used when training.
    """
    x = _images(batch)
    if not isinstance(x, Tensor):
        x = Tensor(x)
    if x.ndim == 3:
        x = x.reshape((1,) + x.shape)
    if tuple(x.shape[1:]) != tuple(params.input_shape):
        raise InvalidShapeError(
            f"image shape {tuple(x.shape[1:])} does not match model input {tuple(params.input_shape)}"
        )
    w = weights if weights is not None else as_tensors(params)
    if params.arch == "tiny_convnet":
        return _convnet(x, w)
    if params.arch == "tiny_attn":
        return _attn(x, w, params.use_pos_emb)
    raise InvalidShapeError(f"unknown arch {params.arch!r}")


def _bias4(b: Tensor) -> Tensor:
    return T.reshape(b, (1, b.shape[0], 1, 1))


def _convnet(x: Tensor, w) -> Tensor:
    h = x
    for i in range(len(CONV_CHANNELS)):
        h = T.conv2d(h, w[f"conv{i}.w"], stride=1, pad=1) + _bias4(w[f"conv{i}.b"])
        h = T.maxpool2d(T.relu(h), 2)
    h = T.reshape(h, (h.shape[0], -1))
    return h @ w["head.w"] + w["head.b"]


def patchify(x: Tensor, patch: int = PATCH) -> Tensor:
    """(B, C, H, W) -> (B, tokens, C*patch*patch), tokens in row-major order."""
    b, c, hh, ww = x.shape
    gh, gw = hh // patch, ww // patch
    t = T.reshape(x, (b, c, gh, patch, gw, patch))
    t = T.transpose(t, (0, 2, 4, 1, 3, 5))
    return T.reshape(t, (b, gh * gw, c * patch * patch))


def _attn(x: Tensor, w, use_pos_emb: bool) -> Tensor:
    h = patchify(x) @ w["embed.w"] + w["embed.b"]
    if use_pos_emb:
        h = h + w["pos"]
    for i in range(DEPTH):
        p = f"block{i}."
        n = T.layer_norm(h, w[p + "ln1.g"], w[p + "ln1.b"])
        a = T.attention(n @ w[p + "q"], n @ w[p + "k"], n @ w[p + "v"])
        h = h + a @ w[p + "o"]
        n = T.layer_norm(h, w[p + "ln2.g"], w[p + "ln2.b"])
        m = T.relu(n @ w[p + "fc1.w"] + w[p + "fc1.b"])
        h = h + m @ w[p + "fc2.w"] + w[p + "fc2.b"]
    h = T.layer_norm(h, w["ln.g"], w["ln.b"])
    return T.meanpool(h, axis=1) @ w["head.w"] + w["head.b"]


def loss_ce(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError(f"label out of range for {logits.shape[1]} classes")
    return T.softmax_cross_entropy(logits, labels)


def predict(params: ModelParams, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Argmax class per image; ties go to the lowest class index."""
    images = np.asarray(images, dtype=np.float64)
    out = []
    for i in range(0, len(images), batch_size):
        z = forward_logits(params, images[i : i + batch_size]).data
        out.append(z.argmax(axis=1))  # np.argmax returns the first maximum
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(params: ModelParams, dataset, batch_size: int = 256) -> float:
    """Fraction of samples whose argmax prediction equals the label."""
    images, labels = dataset.images, np.asarray(dataset.labels)
    if len(labels) == 0:
        raise ValueError("evaluate: empty dataset")
    return float(np.mean(predict(params, images, batch_size) == labels))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------
# Layout (all integers little-endian):
#   magic "FQLNCKPT" | u32 version | u16 len + arch utf-8 | u32 num_classes
#   | 3 x u32 input shape | u8 use_pos_emb | u32 count
#   | count x (u16 len + name, u8 ndim, ndim x u32 dims)
#   | raw float64 LE data for each weight in table order


def dumps_checkpoint(params: ModelParams) -> bytes:
    buf = io.BytesIO()
    arch = params.arch.encode()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<IH", CKPT_VERSION, len(arch)))
    buf.write(arch)
    buf.write(struct.pack("<I3IBI", params.num_classes, *params.input_shape, int(params.use_pos_emb), len(params.weights)))
    names = sorted(params.weights)
    for name in names:
        arr = params.weights[name]
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)) + nb)
        buf.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
    for name in names:
        buf.write(np.ascontiguousarray(params.weights[name], dtype="<f8").tobytes())
    return buf.getvalue()


def loads_checkpoint(blob: bytes) -> ModelParams:
    view = memoryview(blob)
    pos = 0

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(view):
            raise CheckpointError("checkpoint truncated")
        vals = struct.unpack_from(fmt, view, pos)
        pos += size
        return vals

    if bytes(view[:8]) != CKPT_MAGIC:
        raise CheckpointError("not a freqlens checkpoint (bad magic)")
    pos = 8
    version, alen = take("<IH")
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    arch = bytes(view[pos : pos + alen]).decode()
    pos += alen
    num_classes, c, h, w, pos_emb, count = take("<I3IBI")
    table = []
    for _ in range(count):
        (nlen,) = take("<H")
        name = bytes(view[pos : pos + nlen]).decode()
        pos += nlen
        (ndim,) = take("<B")
        dims = take(f"<{ndim}I")
        table.append((name, dims))
    weights = {}
    for name, dims in table:
        n = int(np.prod(dims)) if dims else 1
        if pos + 8 * n > len(view):
            raise CheckpointError("checkpoint truncated")
        weights[name] = np.frombuffer(view, dtype="<f8", count=n, offset=pos).astype(np.float64).reshape(dims)
        pos += 8 * n
    params = ModelParams(arch, weights, num_classes, (c, h, w), bool(pos_emb))
    expected = weight_shapes(arch, params.input_shape, num_classes)
    got = {k: v.shape for k, v in weights.items()}
    if got != expected:
        raise CheckpointError(f"weight table does not match arch {arch!r} for input {params.input_shape}")
    return params


def save_checkpoint(params: ModelParams, path) -> Path:
    path = Path(path)
    path.write_bytes(dumps_checkpoint(params))
    return path


def load_checkpoint(path) -> ModelParams:
    return loads_checkpoint(Path(path).read_bytes())
