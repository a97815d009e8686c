"""Dense tensors and the layer primitives the screening models are built from.

Data layout is (N, C, H, W), row-major, float32. Convolution implements
cross-correlation (no kernel flip). Quantized tensors store 8-bit codes in
[0, 255] together with affine qparams (scale, zero_point); dequantized value
is scale * (code - zero_point).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, StateError


class QParams(NamedTuple):
    """Affine quantization parameters for an 8-bit tensor."""

    scale: float
    zero_point: int


class Tensor:
    """Immutable dense N-dimensional array, float32 or quantized 8-bit.

    The backing buffer is frozen after construction so tensors are safe to
    share across threads and graphs.
    """

    __slots__ = ("data", "dtype", "qparams")

    def __init__(self, data, dtype: str = "float32", qparams: QParams | None = None,
                 copy: bool = True):
        if dtype == "float32":
            if qparams is not None:
                raise ValueError("qparams only allowed on int8 tensors")
            np_dtype = np.float32
        elif dtype == "int8":
            if qparams is None:
                raise ValueError("int8 tensor requires qparams")
            qparams = QParams(float(qparams[0]), int(qparams[1]))
            if not qparams.scale > 0:
                raise ValueError("qparams scale must be > 0")
            if not 0 <= qparams.zero_point <= 255:
                raise ValueError("qparams zero_point must be in [0, 255]")
            np_dtype = np.uint8
        else:
            raise ValueError(f"unsupported dtype {dtype!r}")
        if copy:
            arr = np.array(data, dtype=np_dtype, order="C")
        else:
            arr = np.ascontiguousarray(data, dtype=np_dtype)
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "dtype", dtype)
        object.__setattr__(self, "qparams", qparams)

    def __setattr__(self, name, value):
        raise AttributeError("Tensor is immutable")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def to_float(self) -> np.ndarray:
        """Array of float32 values; dequantizes 8-bit tensors."""
        if self.dtype == "float32":
            return self.data
        scale = np.float32(self.qparams.scale)
        zp = np.float32(self.qparams.zero_point)
        return (self.data.astype(np.float32) - zp) * scale

    def __repr__(self):
        q = f", qparams={self.qparams}" if self.qparams else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{q})"


def tensor(data) -> Tensor:
    """Shorthand for a float32 tensor."""
    return Tensor(data)


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    """He-uniform initializer, the default for relu networks."""
    limit = math.sqrt(6.0 / max(1, fan_in))
    return Tensor(rng.uniform(-limit, limit, size=shape).astype(np.float32), copy=False)


# ---------------------------------------------------------------------------
# Array-level kernels. These preserve the input dtype (float32 normally,
# float64 during finite-difference checks).
# ---------------------------------------------------------------------------


def _pad_spatial(x, padding, fill=0.0):
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                  mode="constant", constant_values=fill)


def _windows(xp, kh, kw, stride):
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def _out_dim(size, k, stride, padding, axis_name):
    out = (size + 2 * padding - k) // stride + 1
    if out < 1:
        raise DimensionError(
            f"kernel size {k} with padding {padding} exceeds input {axis_name} {size}")
    return out


def _conv2d_fw(x, w, b, stride, padding):
    if x.ndim != 4:
        raise DimensionError(f"conv2d input must be 4-D (N,C,H,W), got rank {x.ndim}")
    n, c, h, wd = x.shape
    o, cw, kh, kw = w.shape
    if cw != c:
        raise DimensionError(f"conv2d channel axis: weights expect {cw} input channels, got {c}")
    _out_dim(h, kh, stride, padding, "height")
    _out_dim(wd, kw, stride, padding, "width")
    xp = _pad_spatial(x, padding)
    win = _windows(xp, kh, kw, stride)
    y = np.einsum("nchwuv,ocuv->nohw", win, w, optimize=True)
    if b is not None:
        if b.shape != (o,):
            raise DimensionError(f"conv2d bias axis: expected shape ({o},), got {b.shape}")
        y = y + b.reshape(1, -1, 1, 1)
    return y


def _conv2d_bw(x, w, stride, padding, gy, with_bias):
    o, c, kh, kw = w.shape
    n, _, h, wd = x.shape
    xp = _pad_spatial(x, padding)
    win = _windows(xp, kh, kw, stride)
    gw = np.einsum("nchwuv,nohw->ocuv", win, gy, optimize=True)
    gb = gy.sum(axis=(0, 2, 3)) if with_bias else None
    ho, wo = gy.shape[2], gy.shape[3]
    gxp = np.zeros_like(xp)
    # (n,o,h,w) x (o,c,u,v) -> (n,h,w,c,u,v); scatter-add each kernel offset
    g2 = np.tensordot(gy, w, axes=(1, 0))
    for u in range(kh):
        for v in range(kw):
            gxp[:, :, u:u + stride * ho:stride, v:v + stride * wo:stride] += \
                g2[:, :, :, :, u, v].transpose(0, 3, 1, 2)
    gx = gxp[:, :, padding:padding + h, padding:padding + wd]
    return gx, gw, gb


def _depthwise_fw(x, w, stride, padding):
    if x.ndim != 4:
        raise DimensionError(f"depthwise input must be 4-D, got rank {x.ndim}")
    n, c, h, wd = x.shape
    cw, one, kh, kw = w.shape
    if one != 1:
        raise DimensionError(f"depthwise weight must have shape (C,1,kH,kW), got {w.shape}")
    if cw != c:
        raise DimensionError(f"depthwise channel axis: kernels cover {cw} channels, input has {c}")
    _out_dim(h, kh, stride, padding, "height")
    _out_dim(wd, kw, stride, padding, "width")
    xp = _pad_spatial(x, padding)
    win = _windows(xp, kh, kw, stride)
    return np.einsum("nchwuv,cuv->nchw", win, w[:, 0], optimize=True)


def _depthwise_bw(x, w, stride, padding, gy):
    c, _, kh, kw = w.shape
    n, _, h, wd = x.shape
    xp = _pad_spatial(x, padding)
    win = _windows(xp, kh, kw, stride)
    gw = np.einsum("nchwuv,nchw->cuv", win, gy, optimize=True)[:, None, :, :]
    ho, wo = gy.shape[2], gy.shape[3]
    gxp = np.zeros_like(xp)
    for u in range(kh):
        for v in range(kw):
            gxp[:, :, u:u + stride * ho:stride, v:v + stride * wo:stride] += \
                gy * w[:, 0, u, v].reshape(1, -1, 1, 1)
    gx = gxp[:, :, padding:padding + h, padding:padding + wd]
    return gx, gw


def _pool2d_fw(x, mode, window, stride, padding=0):
    if x.ndim != 4:
        raise DimensionError(f"pool2d input must be 4-D, got rank {x.ndim}")
    n, c, h, wd = x.shape
    if padding and mode != "max":
        raise DimensionError("padded pooling is only defined for max mode")
    if window > h + 2 * padding or window > wd + 2 * padding:
        raise DimensionError(
            f"pool window {window} larger than spatial dims ({h},{wd})")
    fill = -np.inf if mode == "max" else 0.0
    xp = _pad_spatial(x, padding, fill=fill)
    win = _windows(xp, window, window, stride)
    if mode == "max":
        flat = win.reshape(*win.shape[:4], -1)
        am = flat.argmax(axis=-1)
        y = np.take_along_axis(flat, am[..., None], axis=-1)[..., 0]
        return y, am
    if mode == "avg":
        return win.mean(axis=(-2, -1)), None
    raise ValueError(f"unknown pool mode {mode!r}")


def _pool2d_bw(x, mode, window, stride, padding, aux, gy):
    n, c, h, wd = x.shape
    ho, wo = gy.shape[2], gy.shape[3]
    ph, pw = h + 2 * padding, wd + 2 * padding
    gxp = np.zeros((n, c, ph, pw), dtype=gy.dtype)
    if mode == "max":
        for idx in range(window * window):
            u, v = divmod(idx, window)
            mask = aux == idx
            gxp[:, :, u:u + stride * ho:stride, v:v + stride * wo:stride] += gy * mask
    else:
        scale = 1.0 / (window * window)
        for u in range(window):
            for v in range(window):
                gxp[:, :, u:u + stride * ho:stride, v:v + stride * wo:stride] += gy * scale
    return gxp[:, :, padding:padding + h, padding:padding + wd]


def _gap_fw(x):
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool input must be 4-D, got rank {x.ndim}")
    return x.mean(axis=(2, 3), keepdims=True)


def _gap_bw(x, gy):
    h, w = x.shape[2], x.shape[3]
    return np.broadcast_to(gy / (h * w), x.shape).copy()


def _dense_fw(x, w, b):
    if x.ndim != 2:
        raise DimensionError(f"dense input must be 2-D (N,F), got rank {x.ndim}")
    if x.shape[1] != w.shape[0]:
        raise DimensionError(
            f"dense inner dimension: input has {x.shape[1]} features, weights expect {w.shape[0]}")
    y = x @ w
    if b is not None:
        y = y + b
    return y


def _dense_bw(x, w, gy, with_bias):
    gx = gy @ w.T
    gw = x.T @ gy
    gb = gy.sum(axis=0) if with_bias else None
    return gx, gw, gb


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _activation_fw(x, mode):
    if mode == "relu":
        return np.maximum(x, 0)
    if mode == "sigmoid":
        return _sigmoid(x)
    if mode == "softmax":
        z = x - x.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)
    raise ValueError(f"unknown activation mode {mode!r}")


def _activation_bw(y, mode, gy):
    if mode == "relu":
        return gy * (y > 0)
    if mode == "sigmoid":
        return gy * y * (1 - y)
    if mode == "softmax":
        return y * (gy - (gy * y).sum(axis=-1, keepdims=True))
    raise ValueError(f"unknown activation mode {mode!r}")


def _bn_check(x, gamma):
    if x.ndim != 4:
        raise DimensionError(f"batch_norm input must be 4-D, got rank {x.ndim}")
    if gamma.shape[0] != x.shape[1]:
        raise DimensionError(
            f"batch_norm channel axis: {gamma.shape[0]} parameters vs {x.shape[1]} channels")


def _bn_infer_fw(x, gamma, beta, rm, rv, eps):
    _bn_check(x, gamma)
    inv = 1.0 / np.sqrt(rv + eps)
    xhat = (x - rm.reshape(1, -1, 1, 1)) * inv.reshape(1, -1, 1, 1)
    y = gamma.reshape(1, -1, 1, 1) * xhat + beta.reshape(1, -1, 1, 1)
    return y, (xhat, inv)


def _bn_infer_bw(gamma, aux, gy):
    xhat, inv = aux
    ggamma = (gy * xhat).sum(axis=(0, 2, 3))
    gbeta = gy.sum(axis=(0, 2, 3))
    gx = gy * (gamma * inv).reshape(1, -1, 1, 1)
    return gx, ggamma, gbeta


def _bn_train_fw(x, gamma, beta, eps):
    _bn_check(x, gamma)
    mu = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu.reshape(1, -1, 1, 1)) * inv.reshape(1, -1, 1, 1)
    y = gamma.reshape(1, -1, 1, 1) * xhat + beta.reshape(1, -1, 1, 1)
    return y, (xhat, inv), mu, var


def _bn_train_bw(gamma, aux, gy):
    xhat, inv = aux
    m = gy.shape[0] * gy.shape[2] * gy.shape[3]
    ggamma = (gy * xhat).sum(axis=(0, 2, 3))
    gbeta = gy.sum(axis=(0, 2, 3))
    gxhat = gy * gamma.reshape(1, -1, 1, 1)
    s1 = gxhat.sum(axis=(0, 2, 3)).reshape(1, -1, 1, 1)
    s2 = (gxhat * xhat).sum(axis=(0, 2, 3)).reshape(1, -1, 1, 1)
    gx = (inv.reshape(1, -1, 1, 1) / m) * (m * gxhat - s1 - xhat * s2)
    return gx, ggamma, gbeta


def _merge_fw(xs, mode):
    first = xs[0]
    if mode == "add":
        for i, x in enumerate(xs[1:], start=1):
            if x.shape != first.shape:
                raise DimensionError(
                    f"merge-add shape mismatch at input {i}: {x.shape} vs {first.shape}")
        out = xs[0].copy()
        for x in xs[1:]:
            out += x
        return out, None
    if mode == "concat_channels":
        for i, x in enumerate(xs[1:], start=1):
            if x.ndim != first.ndim or x.shape[0] != first.shape[0] or x.shape[2:] != first.shape[2:]:
                raise DimensionError(
                    f"merge-concat non-channel axes differ at input {i}: {x.shape} vs {first.shape}")
        return np.concatenate(xs, axis=1), [x.shape[1] for x in xs]
    raise ValueError(f"unknown merge mode {mode!r}")


def _merge_bw(mode, aux, n_inputs, gy):
    if mode == "add":
        return [gy] * n_inputs
    split_points = np.cumsum(aux)[:-1]
    return np.split(gy, split_points, axis=1)


# ---------------------------------------------------------------------------
# Public functional ops (Tensor in, Tensor out).
# ---------------------------------------------------------------------------


def conv2d(input: Tensor, weights: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding.

    Output spatial dims follow floor((H + 2p - k) / s) + 1.
    """
    b = bias.to_float() if bias is not None else None
    return Tensor(_conv2d_fw(input.to_float(), weights.to_float(), b, stride, padding),
                  copy=False)


def depthwise_conv2d(input: Tensor, per_channel_kernels: Tensor,
                     stride: int = 1, padding: int = 0) -> Tensor:
    """Per-channel spatial convolution; channel i of the output depends only
    on channel i of the input."""
    return Tensor(_depthwise_fw(input.to_float(), per_channel_kernels.to_float(),
                                stride, padding), copy=False)


def pool2d(input: Tensor, mode: str, window: int, stride: int) -> Tensor:
    """Max or average pooling without padding."""
    y, _ = _pool2d_fw(input.to_float(), mode, window, stride)
    return Tensor(y, copy=False)


def global_avg_pool(input: Tensor) -> Tensor:
    """Mean over H and W; output shape (N, C, 1, 1)."""
    return Tensor(_gap_fw(input.to_float()), copy=False)


def dense_layer(input: Tensor, weights: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map: (N,F) @ (F,O) + bias."""
    b = bias.to_float() if bias is not None else None
    return Tensor(_dense_fw(input.to_float(), weights.to_float(), b), copy=False)


def activation(input: Tensor, mode: str) -> Tensor:
    """relu, sigmoid, or softmax (softmax over the last axis)."""
    return Tensor(_activation_fw(input.to_float(), mode), copy=False)


def batch_norm(input: Tensor, gamma: Tensor, beta: Tensor,
               running_mean: Tensor, running_var: Tensor,
               mode: str = "infer", epsilon: float = 1e-5) -> Tensor:
    """Channel-wise normalization.

    Infer mode uses the running statistics; train mode normalizes with the
    batch statistics (the EMA update of running stats happens on graph
    nodes, where the state lives).
    """
    x = input.to_float()
    if mode == "infer":
        y, _ = _bn_infer_fw(x, gamma.to_float(), beta.to_float(),
                            running_mean.to_float(), running_var.to_float(), epsilon)
    elif mode == "train":
        y, _, _, _ = _bn_train_fw(x, gamma.to_float(), beta.to_float(), epsilon)
    else:
        raise ValueError(f"unknown batch_norm mode {mode!r}")
    return Tensor(y, copy=False)


def merge(inputs: list[Tensor], mode: str) -> Tensor:
    """Channel concatenation or elementwise addition."""
    y, _ = _merge_fw([t.to_float() for t in inputs], mode)
    return Tensor(y, copy=False)


# ---------------------------------------------------------------------------
# Layer graph.
# ---------------------------------------------------------------------------

LAYER_KINDS = ("conv2d", "depthwise_conv2d", "pool2d", "global_avg_pool",
               "dense", "batch_norm", "activation", "merge")

# Parameter names that receive gradients, per kind. Bias is optional on
# conv/dense; batch_norm running stats are state, not trainable.
_TRAINABLE = {
    "conv2d": ("weight", "bias"),
    "depthwise_conv2d": ("weight",),
    "dense": ("weight", "bias"),
    "batch_norm": ("gamma", "beta"),
}

INPUT_NAME = "input"


@dataclass
class LayerNode:
    """One layer in a graph. `inputs` names earlier nodes (or "input")."""

    name: str
    kind: str
    inputs: list[str]
    params: dict[str, Tensor] = field(default_factory=dict)
    attrs: dict[str, Any] = field(default_factory=dict)


@dataclass
class ForwardContext:
    """Activations and caches retained by one forward pass."""

    input: np.ndarray
    mode: str
    acts: dict[str, np.ndarray]
    aux: dict[str, Any]
    params: dict[tuple[str, str], np.ndarray]
    output: np.ndarray


@dataclass
class Gradients:
    """Result of a backward pass."""

    param_grads: dict[tuple[str, str], np.ndarray]
    input_grad: np.ndarray


class LayerGraph:
    """Directed acyclic graph of layer nodes with a single designated output.

    Nodes are kept in topological order: each node may only consume earlier
    nodes or the graph input. The last node is the output.
    """

    def __init__(self, nodes: list[LayerNode], meta: dict[str, str] | None = None):
        if not nodes:
            raise ValueError("graph needs at least one node")
        seen: set[str] = set()
        consumed: set[str] = set()
        for node in nodes:
            if node.kind not in LAYER_KINDS:
                raise ValueError(f"unknown layer kind {node.kind!r} on node {node.name!r}")
            if node.name == INPUT_NAME or node.name in seen:
                raise ValueError(f"duplicate or reserved node name {node.name!r}")
            if not node.inputs:
                raise ValueError(f"node {node.name!r} has no inputs")
            if node.kind == "merge" and len(node.inputs) < 2:
                raise ValueError(f"merge node {node.name!r} needs at least 2 inputs")
            for ref in node.inputs:
                if ref != INPUT_NAME and ref not in seen:
                    raise ValueError(
                        f"node {node.name!r} consumes {ref!r} which is not an earlier node")
                consumed.add(ref)
            seen.add(node.name)
        for node in nodes[:-1]:
            if node.name not in consumed:
                raise ValueError(f"node {node.name!r} is not consumed by any later node")
        self.nodes = list(nodes)
        self.meta = dict(meta or {})
        self._by_name = {n.name: n for n in nodes}
        self._last_ctx: ForwardContext | None = None

    @property
    def output_name(self) -> str:
        return self.nodes[-1].name

    def node(self, name: str) -> LayerNode:
        try:
            return self._by_name[name]
        except KeyError:
            raise KeyError(f"no node named {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._by_name

    def trainable_parameters(self) -> dict[tuple[str, str], Tensor]:
        out: dict[tuple[str, str], Tensor] = {}
        for node in self.nodes:
            for pname in _TRAINABLE.get(node.kind, ()):
                if pname in node.params:
                    out[(node.name, pname)] = node.params[pname]
        return out

    def set_parameter(self, node_name: str, pname: str, value: Tensor) -> None:
        self.node(node_name).params[pname] = value

    # -- execution ---------------------------------------------------------

    def forward(self, x, mode: str = "infer",
                _overrides: dict[tuple[str, str], np.ndarray] | None = None) -> ForwardContext:
        """Run the graph; returns a context holding every node's activation.

        Each call builds a private context, so concurrent forward passes on a
        shared graph do not interfere (train-mode EMA updates excepted).
        """
        arr = x.to_float() if isinstance(x, Tensor) else np.asarray(x)
        update_state = mode == "train" and _overrides is None
        dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float32
        arr = arr.astype(dtype, copy=False)

        acts: dict[str, np.ndarray] = {}
        aux: dict[str, Any] = {}
        used: dict[tuple[str, str], np.ndarray] = {}

        def resolve(node: LayerNode, pname: str):
            key = (node.name, pname)
            if _overrides is not None and key in _overrides:
                p = _overrides[key]
            else:
                t = node.params.get(pname)
                if t is None:
                    return None
                p = t.to_float()
            p = p.astype(dtype, copy=False)
            used[key] = p
            return p

        for node in self.nodes:
            xs = [arr if ref == INPUT_NAME else acts[ref] for ref in node.inputs]
            k = node.kind
            if k == "conv2d":
                y = _conv2d_fw(xs[0], resolve(node, "weight"), resolve(node, "bias"),
                               node.attrs.get("stride", 1), node.attrs.get("padding", 0))
            elif k == "depthwise_conv2d":
                y = _depthwise_fw(xs[0], resolve(node, "weight"),
                                  node.attrs.get("stride", 1), node.attrs.get("padding", 0))
            elif k == "pool2d":
                y, a = _pool2d_fw(xs[0], node.attrs["mode"], node.attrs["window"],
                                  node.attrs.get("stride", node.attrs["window"]),
                                  node.attrs.get("padding", 0))
                aux[node.name] = a
            elif k == "global_avg_pool":
                y = _gap_fw(xs[0])
            elif k == "dense":
                x2 = xs[0].reshape(xs[0].shape[0], -1)
                aux[node.name] = xs[0].shape
                y = _dense_fw(x2, resolve(node, "weight"), resolve(node, "bias"))
            elif k == "batch_norm":
                eps = node.attrs.get("epsilon", 1e-5)
                gamma = resolve(node, "gamma")
                beta = resolve(node, "beta")
                if mode == "train":
                    y, a, mu, var = _bn_train_fw(xs[0], gamma, beta, eps)
                    if update_state:
                        mom = node.attrs.get("momentum", 0.9)
                        rm = node.params["running_mean"].to_float()
                        rv = node.params["running_var"].to_float()
                        node.params["running_mean"] = Tensor(
                            (mom * rm + (1 - mom) * mu).astype(np.float32), copy=False)
                        node.params["running_var"] = Tensor(
                            (mom * rv + (1 - mom) * var).astype(np.float32), copy=False)
                else:
                    y, a = _bn_infer_fw(xs[0], gamma, beta,
                                        resolve(node, "running_mean"),
                                        resolve(node, "running_var"), eps)
                aux[node.name] = a
            elif k == "activation":
                y = _activation_fw(xs[0], node.attrs["mode"])
            elif k == "merge":
                y, a = _merge_fw(xs, node.attrs["mode"])
                aux[node.name] = a
            else:  # pragma: no cover - guarded in __init__
                raise ValueError(f"unknown kind {k}")
            acts[node.name] = y

        ctx = ForwardContext(input=arr, mode=mode, acts=acts, aux=aux, params=used,
                             output=acts[self.output_name])
        self._last_ctx = ctx
        return ctx

    def predict(self, x) -> np.ndarray:
        """Forward pass returning only the output array."""
        return self.forward(x, mode="infer").output

    def backward(self, ctx: ForwardContext, loss_gradient: np.ndarray,
                 from_node: str | None = None) -> Gradients:
        """Backpropagate from `from_node` (default: the output node).

        Returns gradients for every trainable parameter reached and for the
        graph input.
        """
        start = from_node or self.output_name
        start_idx = next(i for i, n in enumerate(self.nodes) if n.name == start)
        seed = np.asarray(loss_gradient, dtype=ctx.output.dtype)
        if seed.shape != ctx.acts[start].shape:
            raise DimensionError(
                f"loss gradient shape {seed.shape} does not match activation "
                f"{ctx.acts[start].shape} of node {start!r}")

        grads: dict[str, np.ndarray] = {start: seed}
        pgrads: dict[tuple[str, str], np.ndarray] = {}
        input_grad = np.zeros_like(ctx.input)
        got_input_grad = False

        def add_param(node, pname, g):
            if g is None:
                return
            key = (node.name, pname)
            pgrads[key] = pgrads[key] + g if key in pgrads else g

        for node in reversed(self.nodes[:start_idx + 1]):
            gy = grads.pop(node.name, None)
            if gy is None:
                continue
            xs = [ctx.input if ref == INPUT_NAME else ctx.acts[ref] for ref in node.inputs]
            k = node.kind
            if k == "conv2d":
                w = ctx.params[(node.name, "weight")]
                with_bias = (node.name, "bias") in ctx.params
                gx, gw, gb = _conv2d_bw(xs[0], w, node.attrs.get("stride", 1),
                                        node.attrs.get("padding", 0), gy, with_bias)
                gxs = [gx]
                add_param(node, "weight", gw)
                add_param(node, "bias", gb)
            elif k == "depthwise_conv2d":
                w = ctx.params[(node.name, "weight")]
                gx, gw = _depthwise_bw(xs[0], w, node.attrs.get("stride", 1),
                                       node.attrs.get("padding", 0), gy)
                gxs = [gx]
                add_param(node, "weight", gw)
            elif k == "pool2d":
                gxs = [_pool2d_bw(xs[0], node.attrs["mode"], node.attrs["window"],
                                  node.attrs.get("stride", node.attrs["window"]),
                                  node.attrs.get("padding", 0), ctx.aux[node.name], gy)]
            elif k == "global_avg_pool":
                gxs = [_gap_bw(xs[0], gy)]
            elif k == "dense":
                orig_shape = ctx.aux[node.name]
                x2 = xs[0].reshape(xs[0].shape[0], -1)
                w = ctx.params[(node.name, "weight")]
                with_bias = (node.name, "bias") in ctx.params
                gx2, gw, gb = _dense_bw(x2, w, gy, with_bias)
                gxs = [gx2.reshape(orig_shape)]
                add_param(node, "weight", gw)
                add_param(node, "bias", gb)
            elif k == "batch_norm":
                gamma = ctx.params[(node.name, "gamma")]
                if ctx.mode == "train":
                    gx, gg, gb = _bn_train_bw(gamma, ctx.aux[node.name], gy)
                else:
                    gx, gg, gb = _bn_infer_bw(gamma, ctx.aux[node.name], gy)
                gxs = [gx]
                add_param(node, "gamma", gg)
                add_param(node, "beta", gb)
            elif k == "activation":
                gxs = [_activation_bw(ctx.acts[node.name], node.attrs["mode"], gy)]
            elif k == "merge":
                gxs = _merge_bw(node.attrs["mode"], ctx.aux.get(node.name), len(xs), gy)
            else:  # pragma: no cover
                raise ValueError(f"unknown kind {k}")

            for ref, gx in zip(node.inputs, gxs):
                if ref == INPUT_NAME:
                    input_grad = input_grad + gx
                    got_input_grad = True
                elif ref in grads:
                    grads[ref] = grads[ref] + gx
                else:
                    grads[ref] = gx

        if not got_input_grad and start_idx >= 0:
            # start node upstream of input cannot happen: all chains bottom
            # out at the input, but keep zeros for safety
            pass
        return Gradients(param_grads=pgrads, input_grad=input_grad)


def backprop(graph: LayerGraph, input, loss_gradient) -> Gradients:
    """Backward pass through the most recent forward on `graph`.

    Requires that `graph.forward` ran and that `input` is the array it ran
    on; raises StateError otherwise.
    """
    ctx = graph._last_ctx
    if ctx is None:
        raise StateError("backward before forward: run graph.forward first")
    arr = input.to_float() if isinstance(input, Tensor) else np.asarray(input)
    if arr.shape != ctx.input.shape or not np.array_equal(arr, ctx.input):
        raise StateError("backward input does not match the last forward pass")
    return graph.backward(ctx, loss_gradient)


def grad_check(graph: LayerGraph, input, seed: int, mode: str = "train",
               coords_per_tensor: int = 3, step: float = 1e-4) -> float:
    """Compare analytic gradients against central finite differences.

    Runs the graph in float64, projects the output onto a fixed random
    direction to get a scalar loss, and perturbs a seeded sample of
    coordinates from every trainable parameter plus the input. Returns the
    max of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).

    The default step keeps finite differences clear of relu kinks; larger
    steps can cross them and report errors that are artifacts of the probe.
    """
    rng = np.random.default_rng(seed)
    arr = input.to_float() if isinstance(input, Tensor) else np.asarray(input)
    x64 = arr.astype(np.float64)
    overrides = {key: t.to_float().astype(np.float64)
                 for key, t in graph.trainable_parameters().items()}

    ctx = graph.forward(x64, mode=mode, _overrides=overrides)
    r = rng.standard_normal(ctx.output.shape)
    analytic = graph.backward(ctx, r)

    def loss() -> float:
        out = graph.forward(x64, mode=mode, _overrides=overrides).output
        return float((out * r).sum())

    targets: list[tuple[np.ndarray, np.ndarray]] = [
        (overrides[key], analytic.param_grads[key]) for key in sorted(overrides)
    ]
    targets.append((x64, analytic.input_grad))

    worst = 0.0
    for buf, grad in targets:
        k = min(coords_per_tensor, buf.size)
        idx = rng.choice(buf.size, size=k, replace=False)
        for i in idx:
            orig = buf.flat[i]
            buf.flat[i] = orig + step
            lp = loss()
            buf.flat[i] = orig - step
            lm = loss()
            buf.flat[i] = orig
            numeric = (lp - lm) / (2 * step)
            ana = float(grad.flat[i])
            rel = abs(ana - numeric) / max(abs(ana), abs(numeric), 1e-8)
            worst = max(worst, rel)
    return worst
