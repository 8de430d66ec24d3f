"""Small deterministic CNN kernels with hand-written backward passes.

Tensors are numpy arrays in NHWC layout (batch, rows, cols, channels).
Layers keep whatever they need from ``forward`` for the matching
``backward`` call, so a layer instance serves one forward/backward pair
at a time.
"""
from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IN_EPS = 1e-5
BCE_CLIP = 1e-7
POS_WEIGHT_CAP = 50.0

GLNW_MAGIC = b"GLNW"
GLNW_VERSION = 1

# upper bound on im2col elements materialized at once
_COL_BUDGET = 1 << 23


class ShapeError(ValueError):
    """Tensor shapes do not agree."""


class WeightFormatError(ValueError):
    """Weight file is malformed or does not match the model."""


def sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _batched(x):
    x = np.asarray(x)
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise ShapeError(f"expected HWC or NHWC tensor, got shape {x.shape}")
    return x, False


class Layer:
    kind = "layer"

    def params(self) -> dict[str, np.ndarray]:
        return {}

    def grads(self) -> dict[str, np.ndarray]:
        return {}

    def zero_grad(self) -> None:
        for g in self.grads().values():
            g[...] = 0

    def out_channels(self, in_channels: int) -> int:
        return in_channels

    def receptive_growth(self) -> int:
        """Extra pixels of context this layer adds on each side."""
        return 0


class InstanceNorm(Layer):
    """Per-sample, per-channel spatial standardization without affine terms."""

    kind = "instance_norm"

    def __init__(self, eps: float = IN_EPS):
        self.eps = eps
        self._cache = None

    def forward(self, x, keep: bool = True):
        mean = x.mean(axis=(1, 2), keepdims=True)
        centered = x - mean
        var = (centered * centered).mean(axis=(1, 2), keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        y = np.multiply(centered, inv, out=centered)
        self._cache = (y, inv) if keep else None
        return y

    def backward(self, dy):
        y, inv = self._cache
        m_dy = dy.mean(axis=(1, 2), keepdims=True)
        m_dyy = (dy * y).mean(axis=(1, 2), keepdims=True)
        return inv * (dy - m_dy - y * m_dyy)


def instance_norm(x, eps: float = IN_EPS):
    x, squeeze = _batched(x)
    y = InstanceNorm(eps).forward(x)
    return y[0] if squeeze else y


class Conv2D(Layer):
    """Stride-1 convolution with zero "same" padding and a fused activation."""

    kind = "conv"
    ACTIVATIONS = ("relu", "sigmoid", "none")

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3,
                 activation: str = "relu", rng=None, dtype=np.float32):
        if kernel_size % 2 != 1:
            raise ValueError("kernel size must be odd")
        if activation not in self.ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.in_channels, self.out_channels_ = in_channels, out_channels
        self.k = kernel_size
        self.activation = activation
        rng = np.random.default_rng(0) if rng is None else rng
        fan_in = kernel_size * kernel_size * in_channels
        self.weight = (rng.standard_normal((kernel_size, kernel_size, in_channels, out_channels))
                       * np.sqrt(2.0 / fan_in)).astype(dtype)
        self.bias = np.zeros(out_channels, dtype)
        self.d_weight = np.zeros_like(self.weight)
        self.d_bias = np.zeros_like(self.bias)
        self._cache = None

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def grads(self):
        return {"weight": self.d_weight, "bias": self.d_bias}

    def out_channels(self, in_channels):
        return self.out_channels_

    def receptive_growth(self):
        return self.k // 2

    def _chunks(self, n, h, w):
        per_row = max(1, n * w * self.k * self.k * self.in_channels)
        step = max(1, _COL_BUDGET // per_row)
        return [(a, min(a + step, h)) for a in range(0, h, step)]

    def _cols(self, xp, a, b, w):
        k = self.k
        if k == 1:
            return xp[:, a:b, :w, :]
        return np.concatenate([xp[:, a + i:b + i, j:j + w, :]
                               for i in range(k) for j in range(k)], axis=-1)

    def forward(self, x, keep: bool = True):
        """Convolve ``x``; with ``keep=False`` nothing is stored for backward."""
        if x.shape[-1] != self.in_channels:
            raise ShapeError(f"conv expects {self.in_channels} channels, got {x.shape[-1]}")
        n, h, w, _ = x.shape
        p = self.k // 2
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x
        wmat = self.weight.reshape(-1, self.out_channels_)
        z = np.empty((n, h, w, self.out_channels_), np.result_type(x, self.weight))
        for a, b in self._chunks(n, h, w):
            cols = self._cols(xp, a, b, w)
            z[:, a:b] = (cols.reshape(-1, cols.shape[-1]) @ wmat).reshape(n, b - a, w, -1)
        z += self.bias
        if not keep:
            self._cache = self.preactivation = None
            if self.activation == "relu":
                return np.maximum(z, 0, out=z)
            return sigmoid(z) if self.activation == "sigmoid" else z
        if self.activation == "relu":
            out = np.maximum(z, 0)
        elif self.activation == "sigmoid":
            out = sigmoid(z)
        else:
            out = z
        self._cache = (xp, out, (n, h, w))
        self.preactivation = z
        return out

    def backward(self, dy, preactivation_grad: bool = False):
        """Accumulate parameter gradients and return the input gradient.

        With ``preactivation_grad`` the incoming gradient is taken with
        respect to the pre-activation output (used for fused sigmoid + BCE).
        """
        xp, out, (n, h, w) = self._cache
        if preactivation_grad or self.activation == "none":
            dz = dy
        elif self.activation == "relu":
            dz = dy * (out > 0)
        else:
            dz = dy * out * (1 - out)
        self.d_bias += dz.sum(axis=(0, 1, 2))
        k, p = self.k, self.k // 2
        wmat = self.weight.reshape(-1, self.out_channels_)
        dwmat = self.d_weight.reshape(-1, self.out_channels_)
        dxp = np.zeros(xp.shape, dz.dtype)
        cin = self.in_channels
        for a, b in self._chunks(n, h, w):
            cols = self._cols(xp, a, b, w)
            dzc = dz[:, a:b].reshape(-1, dz.shape[-1])
            dwmat += cols.reshape(-1, cols.shape[-1]).T @ dzc
            dcols = (dzc @ wmat.T).reshape(n, b - a, w, -1)
            idx = 0
            for i in range(k):
                for j in range(k):
                    dxp[:, a + i:b + i, j:j + w, :] += dcols[..., idx * cin:(idx + 1) * cin]
                    idx += 1
        return dxp[:, p:p + h, p:p + w, :] if p else dxp


def conv2d(x, layer: Conv2D):
    x, squeeze = _batched(x)
    y = layer.forward(x)
    return y[0] if squeeze else y


class MaxPool2(Layer):
    kind = "maxpool"

    def receptive_growth(self):
        return 1

    def forward(self, x, keep: bool = True):
        n, h, w, c = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}")
        if not keep:
            self._cache = None
            return x.reshape(n, h // 2, 2, w // 2, 2, c).max(axis=(2, 4))
        win = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(
            n, h // 2, w // 2, c, 4)
        arg = win.argmax(axis=-1)
        self._cache = (arg, x.shape)
        return np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(self, dy):
        arg, (n, h, w, c) = self._cache
        win = np.zeros(dy.shape + (4,), dy.dtype)
        np.put_along_axis(win, arg[..., None], dy[..., None], axis=-1)
        return win.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, h, w, c)


class Upsample2(Layer):
    kind = "upsample"

    def forward(self, x, keep: bool = True):
        return x.repeat(2, axis=1).repeat(2, axis=2)

    def backward(self, dy):
        n, h, w, c = dy.shape
        return dy.reshape(n, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


def maxpool2(x):
    x, squeeze = _batched(x)
    y = MaxPool2().forward(x)
    return y[0] if squeeze else y


def upsample2(x):
    x, squeeze = _batched(x)
    y = Upsample2().forward(x)
    return y[0] if squeeze else y


class Concat(Layer):
    kind = "concat"


# --------------------------------------------------------------------------
# graph

@dataclass
class Node:
    name: str
    layer: Layer
    inputs: list[str]


class ModelGraph:
    """Ordered layers wired by name; multi-input nodes concatenate channels.

    Names not produced by any node are graph input ports.  The last node is
    the output.
    """

    def __init__(self, nodes: list[Node], input_channels: dict[str, int]):
        self.nodes = nodes
        self.input_channels = dict(input_channels)
        self._outputs: dict[str, np.ndarray] = {}
        self._check()

    @property
    def inputs(self) -> list[str]:
        return list(self.input_channels)

    @property
    def output(self) -> str:
        return self.nodes[-1].name

    def node(self, name: str) -> Node:
        for nd in self.nodes:
            if nd.name == name:
                return nd
        raise KeyError(name)

    def channels(self) -> dict[str, int]:
        """Output channel count of every port and node."""
        ch = dict(self.input_channels)
        for nd in self.nodes:
            cin = sum(ch[i] for i in nd.inputs)
            if isinstance(nd.layer, Conv2D) and nd.layer.in_channels != cin:
                raise ShapeError(f"{nd.name}: expects {nd.layer.in_channels} channels, "
                                 f"upstream provides {cin}")
            ch[nd.name] = nd.layer.out_channels(cin)
        return ch

    def _check(self):
        seen = set(self.input_channels)
        for nd in self.nodes:
            missing = [i for i in nd.inputs if i not in seen]
            if missing:
                raise ShapeError(f"{nd.name}: unknown inputs {missing}")
            if nd.name in seen:
                raise ShapeError(f"duplicate node name {nd.name}")
            seen.add(nd.name)
        self.channels()

    def layers(self):
        return [(nd.name, nd.layer) for nd in self.nodes]

    def named_params(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        for nd in self.nodes:
            for pname, arr in nd.layer.params().items():
                out[f"{nd.name}.{pname}"] = arr
        return out

    def named_grads(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        for nd in self.nodes:
            for pname, arr in nd.layer.grads().items():
                out[f"{nd.name}.{pname}"] = arr
        return out

    def param_count(self) -> int:
        return int(sum(a.size for a in self.named_params().values()))

    def zero_grad(self):
        for nd in self.nodes:
            nd.layer.zero_grad()

    def astype(self, dtype) -> "ModelGraph":
        for nd in self.nodes:
            if isinstance(nd.layer, Conv2D):
                L = nd.layer
                L.weight, L.bias = L.weight.astype(dtype), L.bias.astype(dtype)
                L.d_weight, L.d_bias = np.zeros_like(L.weight), np.zeros_like(L.bias)
        return self

    def _input_values(self, feeds) -> dict[str, np.ndarray]:
        vals = {}
        for name in self.input_channels:
            if name not in feeds:
                raise ShapeError(f"missing graph input {name!r}")
            x, _ = _batched(feeds[name])
            if x.shape[-1] != self.input_channels[name]:
                raise ShapeError(f"input {name!r} needs {self.input_channels[name]} channels, "
                                 f"got {x.shape[-1]}")
            vals[name] = x
        return vals

    @staticmethod
    def _node_input(nd: Node, vals) -> np.ndarray:
        xs = [vals[i] for i in nd.inputs]
        shapes = {x.shape[:3] for x in xs}
        if len(shapes) != 1:
            raise ShapeError(f"{nd.name}: inputs disagree spatially {shapes}")
        return xs[0] if len(xs) == 1 else np.concatenate(xs, axis=-1)

    def forward(self, feeds: dict[str, np.ndarray], overrides: dict[str, np.ndarray] | None = None,
                keep_state: bool = True):
        """Run every node in order and return the output node's tensor.

        ``overrides`` replaces the computed output of the named nodes, which
        lets callers inject signals after a given layer.  With
        ``keep_state=False`` nothing needed for :meth:`backward` is retained
        and intermediate tensors are freed after their last use, which keeps
        inference on large images within memory.
        """
        if not keep_state:
            return self._infer(feeds, overrides or {})
        vals = self._input_values(feeds)
        overrides = overrides or {}
        for nd in self.nodes:
            x = self._node_input(nd, vals)
            if nd.name in overrides:
                vals[nd.name] = _batched(overrides[nd.name])[0]
            elif isinstance(nd.layer, Concat):
                vals[nd.name] = x
            else:
                vals[nd.name] = nd.layer.forward(x)
        self._outputs = vals
        return vals[self.output]

    def _infer(self, feeds, overrides):
        last_use = {}
        for pos, nd in enumerate(self.nodes):
            for i in nd.inputs:
                last_use[i] = pos
        vals = self._input_values(feeds)
        for pos, nd in enumerate(self.nodes):
            x = self._node_input(nd, vals)
            for i in nd.inputs:
                if last_use[i] == pos:
                    del vals[i]
            if nd.name in overrides:
                vals[nd.name] = _batched(overrides[nd.name])[0]
            elif isinstance(nd.layer, Concat):
                vals[nd.name] = x
            else:
                vals[nd.name] = nd.layer.forward(x, keep=False)
            del x
        self._outputs = {}
        return vals[self.output]

    def preactivation(self) -> np.ndarray:
        return self.nodes[-1].layer.preactivation

    def backward(self, d_out, preactivation_grad: bool = False) -> dict[str, np.ndarray]:
        """Accumulate parameter gradients; return gradients for the input ports."""
        ch = self.channels()
        grads: dict[str, np.ndarray] = {self.output: d_out}
        for nd in reversed(self.nodes):
            g = grads.pop(nd.name, None)
            if g is None:
                continue
            if isinstance(nd.layer, Concat):
                dx = g
            elif isinstance(nd.layer, Conv2D):
                dx = nd.layer.backward(g, preactivation_grad and nd is self.nodes[-1])
            else:
                dx = nd.layer.backward(g)
            off = 0
            for src in nd.inputs:
                part = dx[..., off:off + ch[src]]
                off += ch[src]
                grads[src] = grads[src] + part if src in grads else part
        return grads

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.copy()) for k, v in self.named_params().items())

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_params()
        if set(state) != set(params):
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            raise WeightFormatError(f"weight names differ: missing {missing}, unexpected {extra}")
        for k, arr in params.items():
            src = np.asarray(state[k])
            if src.shape != arr.shape:
                raise WeightFormatError(f"{k}: shape {src.shape} != model {arr.shape}")
            arr[...] = src


def receptive_field(kernel_sizes) -> list[int]:
    """Cumulative receptive field (in cells) of a stack of stride-1 convolutions."""
    out, rf = [], 1
    for k in kernel_sizes:
        rf += k - 1
        out.append(rf)
    return out


# --------------------------------------------------------------------------
# loss

def pos_weight_for(target) -> float:
    """neg/pos ratio of a label batch, capped; 1 when there are no positives."""
    t = np.asarray(target)
    pos = float(t.sum())
    neg = float(t.size - pos)
    if pos == 0:
        return 1.0
    return float(min(max(neg / pos, 1e-6), POS_WEIGHT_CAP))


def weighted_bce(pred, target, pos_weight: float = 1.0):
    """Mean weighted binary cross-entropy and its gradient w.r.t. ``pred``.

    Predictions are clipped to ``[1e-7, 1 - 1e-7]`` first.
    """
    pred, target = np.asarray(pred, np.float64), np.asarray(target, np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    p = np.clip(pred, BCE_CLIP, 1 - BCE_CLIP)
    n = p.size
    loss = -(pos_weight * target * np.log(p) + (1 - target) * np.log1p(-p)).sum() / n
    grad = (-pos_weight * target / p + (1 - target) / (1 - p)) / n
    return float(loss), grad


def weighted_bce_logits(z, target, pos_weight: float = 1.0):
    """Same loss computed from logits; the gradient is w.r.t. the logits."""
    z, target = np.asarray(z, np.float64), np.asarray(target, np.float64)
    if z.shape != target.shape:
        raise ShapeError(f"logits {z.shape} and target {target.shape} differ")
    n = z.size
    # softplus(-z) = -log sigmoid(z)
    sp_neg = np.logaddexp(0.0, -z)
    sp_pos = np.logaddexp(0.0, z)
    loss = (pos_weight * target * sp_neg + (1 - target) * sp_pos).sum() / n
    p = sigmoid(z)
    grad = (p * (pos_weight * target + 1 - target) - pos_weight * target) / n
    return float(loss), grad


# --------------------------------------------------------------------------
# optimizer

@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.99
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState) -> list[np.ndarray]:
    """Bias-corrected Adam update, applied in place."""
    if len(params) != len(grads):
        raise ShapeError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or m.shape != p.shape:
            raise ShapeError(f"parameter {p.shape} vs gradient {g.shape}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return params


# --------------------------------------------------------------------------
# serialization

def save_weights(model, path) -> None:
    """Write every named parameter to a GLNW file (atomic replace)."""
    state = model.named_params() if isinstance(model, ModelGraph) else model
    chunks = [GLNW_MAGIC, struct.pack("<II", GLNW_VERSION, len(state))]
    for name, arr in state.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, "<f4").tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def load_weights(path, model: ModelGraph | None = None):
    """Read a GLNW file; load it into ``model`` if given, else return the tensors."""
    data = Path(path).read_bytes()
    if data[:4] != GLNW_MAGIC:
        raise WeightFormatError(f"{path}: bad magic {data[:4]!r}")
    try:
        version, count = struct.unpack_from("<II", data, 4)
        if version != GLNW_VERSION:
            raise WeightFormatError(f"{path}: unsupported version {version}")
        off = 12
        state = OrderedDict()
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", data, off)
            off += 4
            name = data[off:off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<I", data, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            if off + 4 * size > len(data):
                raise WeightFormatError(f"{path}: truncated tensor {name}")
            state[name] = np.frombuffer(data, "<f4", size, off).reshape(shape).astype(np.float32)
            off += 4 * size
    except struct.error as exc:
        raise WeightFormatError(f"{path}: truncated file") from exc
    if off != len(data):
        raise WeightFormatError(f"{path}: trailing bytes after last tensor")
    if model is None:
        return state
    model.load_state_dict(state)
    return model
