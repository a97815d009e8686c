"""Builders for tiny analogues of the classic CNN block families.

Five block kinds (plain conv, depthwise-separable, inception, residual,
dense) assemble into desk-scale binary classifiers: a few blocks, well under
200k parameters, all ending in global average pooling, a single logit, and a
sigmoid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ParameterError
from .tensor_core import LayerGraph, LayerNode, Tensor, he_uniform

BLOCK_KINDS = ("plain_conv", "depthwise_separable", "inception", "residual", "dense_block")
PRESETS = ("tiny_vgg", "tiny_mobile", "tiny_inception", "tiny_residual", "tiny_dense")


@dataclass(frozen=True)
class BlockSpec:
    kind: str
    channels_in: int
    channels_out: int = 0
    kernel: int = 3
    width_multiplier: float = 1.0
    resolution_multiplier: float = 1.0
    growth_rate: int = 12          # dense_block only
    num_layers: int = 3            # dense_block only
    branches: tuple[int, int, int, int] = ()  # inception only
    stride: int = 1
    pool_after: int = 0            # max-pool window appended after the block

    def __post_init__(self):
        if self.kind not in BLOCK_KINDS:
            raise ParameterError(f"unknown block kind {self.kind!r}")
        if not 0 < self.width_multiplier <= 1:
            raise ParameterError("width multiplier must be in (0, 1]")
        if not 0 < self.resolution_multiplier <= 1:
            raise ParameterError("resolution multiplier must be in (0, 1]")
        if self.kernel % 2 == 0 or self.kernel < 1:
            raise ParameterError("kernel must be odd and positive")
        if self.channels_in < 1:
            raise ParameterError("channels_in must be >= 1")
        if self.kind == "inception":
            if len(self.branches) != 4 or any(b < 1 for b in self.branches):
                raise ParameterError("inception needs 4 positive branch widths")
        elif self.kind == "dense_block":
            if self.growth_rate < 1 or self.num_layers < 1:
                raise ParameterError("dense block needs positive growth rate and layer count")
        elif self.channels_out < 1:
            raise ParameterError(f"{self.kind} needs channels_out >= 1")

    @property
    def effective_out(self) -> int:
        """Output channels after width scaling / concat arithmetic."""
        if self.kind == "inception":
            return sum(self.branches)
        if self.kind == "dense_block":
            return self.channels_in + self.num_layers * self.growth_rate
        if self.kind == "depthwise_separable":
            return _scaled(self.channels_out, self.width_multiplier)
        return self.channels_out


@dataclass(frozen=True)
class ModelSpec:
    input_channels: int
    blocks: tuple[BlockSpec, ...]
    input_size: int = 75
    resolution_multiplier: float = 1.0
    name: str = "custom"

    def __post_init__(self):
        if not self.blocks:
            raise ParameterError("model needs at least one block")
        if not 0 < self.resolution_multiplier <= 1:
            raise ParameterError("resolution multiplier must be in (0, 1]")
        c = self.input_channels
        for i, b in enumerate(self.blocks):
            if b.channels_in != c:
                raise DimensionError(
                    f"block {i} ({b.kind}) expects {b.channels_in} input channels, "
                    f"previous stage provides {c}")
            c = b.effective_out

    @property
    def effective_input_size(self) -> int:
        return max(1, round(self.input_size * self.resolution_multiplier))


def _scaled(channels: int, alpha: float) -> int:
    return max(1, int(round(channels * alpha)))


class _Builder:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.nodes: list[LayerNode] = []
        self._counts: dict[str, int] = {}

    def _name(self, prefix: str) -> str:
        self._counts[prefix] = self._counts.get(prefix, 0) + 1
        return f"{prefix}{self._counts[prefix]}"

    def add(self, kind, inputs, params=None, attrs=None, prefix=None) -> str:
        name = self._name(prefix or kind)
        self.nodes.append(LayerNode(name, kind, list(inputs), params or {}, attrs or {}))
        return name

    def conv(self, src: str, c_in: int, c_out: int, kernel: int,
             stride: int = 1, bias: bool = False) -> str:
        fan_in = c_in * kernel * kernel
        params = {"weight": he_uniform(self.rng, (c_out, c_in, kernel, kernel), fan_in)}
        if bias:
            params["bias"] = Tensor(np.zeros(c_out, dtype=np.float32), copy=False)
        return self.add("conv2d", [src], params,
                        {"stride": stride, "padding": kernel // 2}, prefix="conv")

    def bn(self, src: str, channels: int) -> str:
        z = np.zeros(channels, dtype=np.float32)
        o = np.ones(channels, dtype=np.float32)
        params = {"gamma": Tensor(o), "beta": Tensor(z),
                  "running_mean": Tensor(z), "running_var": Tensor(o)}
        return self.add("batch_norm", [src], params,
                        {"momentum": 0.9, "epsilon": 1e-5}, prefix="bn")

    def relu(self, src: str) -> str:
        return self.add("activation", [src], attrs={"mode": "relu"}, prefix="relu")

    def conv_bn_relu(self, src, c_in, c_out, kernel, stride=1) -> str:
        return self.relu(self.bn(self.conv(src, c_in, c_out, kernel, stride), c_out))

    def max_pool(self, src: str, window: int, stride=None, padding=0) -> str:
        return self.add("pool2d", [src],
                        attrs={"mode": "max", "window": window,
                               "stride": stride or window, "padding": padding},
                        prefix="pool")


def build_block(spec: BlockSpec, builder: _Builder, src: str) -> str:
    """Append one block's layers; returns the name of its output node."""
    b = builder
    c_in = spec.channels_in
    if spec.kind == "plain_conv":
        out = b.conv_bn_relu(src, c_in, spec.channels_out, spec.kernel, spec.stride)
    elif spec.kind == "depthwise_separable":
        c_out = _scaled(spec.channels_out, spec.width_multiplier)
        k = spec.kernel
        dw = b.add("depthwise_conv2d", [src],
                   {"weight": he_uniform(b.rng, (c_in, 1, k, k), k * k)},
                   {"stride": spec.stride, "padding": k // 2}, prefix="dwconv")
        mid = b.relu(b.bn(dw, c_in))
        out = b.conv_bn_relu(mid, c_in, c_out, 1)
    elif spec.kind == "inception":
        w1, w3, w5, wp = spec.branches
        br1 = b.conv_bn_relu(src, c_in, w1, 1)
        br3 = b.conv_bn_relu(src, c_in, w3, 3)
        br5 = b.conv_bn_relu(src, c_in, w5, 5)
        pooled = b.max_pool(src, 3, stride=1, padding=1)
        brp = b.conv_bn_relu(pooled, c_in, wp, 1)
        out = b.add("merge", [br1, br3, br5, brp],
                    attrs={"mode": "concat_channels"}, prefix="concat")
    elif spec.kind == "residual":
        c_out = spec.channels_out
        mid = b.conv_bn_relu(src, c_in, c_out, spec.kernel, spec.stride)
        branch = b.conv_bn_relu(mid, c_out, c_out, spec.kernel)
        if c_in != c_out or spec.stride != 1:
            shortcut = b.conv(src, c_in, c_out, 1, spec.stride)
        else:
            shortcut = src
        out = b.add("merge", [shortcut, branch], attrs={"mode": "add"}, prefix="add")
    elif spec.kind == "dense_block":
        cat = src
        channels = c_in
        for _ in range(spec.num_layers):
            grown = b.conv_bn_relu(cat, channels, spec.growth_rate, spec.kernel)
            cat = b.add("merge", [cat, grown],
                        attrs={"mode": "concat_channels"}, prefix="concat")
            channels += spec.growth_rate
        out = cat
    else:  # pragma: no cover - BlockSpec validates
        raise ParameterError(f"unknown block kind {spec.kind!r}")
    if spec.pool_after:
        out = b.max_pool(out, spec.pool_after)
    return out


def assemble_model(spec: ModelSpec, seed: int = 0) -> LayerGraph:
    """Full classifier: blocks, then global average pool -> dense(1) -> sigmoid.

    Initialization is seeded, so the same spec and seed reproduce identical
    parameters.
    """
    rng = np.random.default_rng(seed)
    b = _Builder(rng)
    src = "input"
    channels = spec.input_channels
    for i, block in enumerate(spec.blocks):
        try:
            src = build_block(block, b, src)
        except DimensionError as exc:
            raise DimensionError(f"block {i} ({block.kind}): {exc}") from exc
        channels = block.effective_out
    gap = b.add("global_avg_pool", [src], prefix="gap")
    head = b.add("dense", [gap],
                 {"weight": he_uniform(rng, (channels, 1), channels),
                  "bias": Tensor(np.zeros(1, dtype=np.float32), copy=False)},
                 prefix="head")
    b.add("activation", [head], attrs={"mode": "sigmoid"}, prefix="prob")
    meta = {"arch": spec.name,
            "input_channels": str(spec.input_channels),
            "input_size": str(spec.effective_input_size)}
    return LayerGraph(b.nodes, meta=meta)


def count_params(graph: LayerGraph) -> int:
    """Total element count over all trainable parameter tensors."""
    return sum(t.size for t in graph.trainable_parameters().values())


def predict_batched(graph: LayerGraph, inputs: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Classifier probabilities for a stack of inputs, shape (N,)."""
    probs = []
    for start in range(0, len(inputs), batch_size):
        out = graph.predict(inputs[start:start + batch_size])
        probs.append(out[:, 0])
    return np.concatenate(probs) if probs else np.zeros(0, dtype=np.float32)


def preset(name: str, in_channels: int = 4, alpha: float = 1.0) -> ModelSpec:
    """Named desk-scale architectures, one per block family."""
    if name not in PRESETS:
        raise ParameterError(f"unknown preset {name!r}; choose from {PRESETS}")
    B = BlockSpec
    if name == "tiny_vgg":
        blocks = (
            B("plain_conv", in_channels, 16, pool_after=2),
            B("plain_conv", 16, 32),
            B("plain_conv", 32, 32, pool_after=2),
            B("plain_conv", 32, 96),
            B("plain_conv", 96, 96, pool_after=2),
        )
    elif name == "tiny_mobile":
        c1 = _scaled(32, alpha)
        c2 = _scaled(64, alpha)
        blocks = (
            B("plain_conv", in_channels, 16, pool_after=2),
            B("depthwise_separable", 16, 32, width_multiplier=alpha, pool_after=2),
            B("depthwise_separable", c1, 64, width_multiplier=alpha),
            B("depthwise_separable", c2, 96, width_multiplier=alpha, pool_after=2),
        )
    elif name == "tiny_inception":
        blocks = (
            B("plain_conv", in_channels, 16, pool_after=2),
            B("inception", 16, branches=(8, 16, 4, 4), pool_after=2),
            B("inception", 32, branches=(16, 32, 8, 8), pool_after=2),
        )
    elif name == "tiny_residual":
        blocks = (
            B("plain_conv", in_channels, 16, pool_after=2),
            B("residual", 16, 16),
            B("residual", 16, 32, pool_after=2),
            B("residual", 32, 64, pool_after=2),
        )
    else:  # tiny_dense
        blocks = (
            B("plain_conv", in_channels, 16, pool_after=2),
            B("dense_block", 16, growth_rate=12, num_layers=3, pool_after=2),
            B("dense_block", 52, growth_rate=12, num_layers=3, pool_after=2),
        )
    return ModelSpec(input_channels=in_channels, blocks=blocks, name=name)


# ---------------------------------------------------------------------------
# Human-readable model config (key = value lines), consumed by `train --arch`.
# ---------------------------------------------------------------------------


def format_model_spec(spec: ModelSpec) -> str:
    lines = [f"name = {spec.name}",
             f"input_channels = {spec.input_channels}",
             f"input_size = {spec.input_size}",
             f"resolution_multiplier = {spec.resolution_multiplier}"]
    for blk in spec.blocks:
        parts = [blk.kind, f"in={blk.channels_in}"]
        if blk.kind == "inception":
            parts.append("branches=" + ",".join(str(x) for x in blk.branches))
        elif blk.kind == "dense_block":
            parts.append(f"growth={blk.growth_rate}")
            parts.append(f"layers={blk.num_layers}")
        else:
            parts.append(f"out={blk.channels_out}")
        if blk.kernel != 3:
            parts.append(f"kernel={blk.kernel}")
        if blk.width_multiplier != 1.0:
            parts.append(f"alpha={blk.width_multiplier}")
        if blk.stride != 1:
            parts.append(f"stride={blk.stride}")
        if blk.pool_after:
            parts.append(f"pool={blk.pool_after}")
        lines.append("block = " + " ".join(parts))
    return "\n".join(lines) + "\n"


def parse_model_spec(text: str) -> ModelSpec:
    name = "custom"
    input_channels = None
    input_size = 75
    rho = 1.0
    blocks: list[BlockSpec] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParameterError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key == "name":
            name = value
        elif key == "input_channels":
            input_channels = int(value)
        elif key == "input_size":
            input_size = int(value)
        elif key == "resolution_multiplier":
            rho = float(value)
        elif key == "block":
            parts = value.split()
            kind = parts[0]
            kv = {}
            for p in parts[1:]:
                if "=" not in p:
                    raise ParameterError(f"line {lineno}: bad block attribute {p!r}")
                k, v = p.split("=", 1)
                kv[k] = v
            blocks.append(BlockSpec(
                kind=kind,
                channels_in=int(kv.get("in", 0)),
                channels_out=int(kv.get("out", 0)),
                kernel=int(kv.get("kernel", 3)),
                width_multiplier=float(kv.get("alpha", 1.0)),
                growth_rate=int(kv.get("growth", 12)),
                num_layers=int(kv.get("layers", 3)),
                branches=tuple(int(x) for x in kv["branches"].split(",")) if "branches" in kv else (),
                stride=int(kv.get("stride", 1)),
                pool_after=int(kv.get("pool", 0)),
            ))
        else:
            raise ParameterError(f"line {lineno}: unknown key {key!r}")
    if input_channels is None:
        raise ParameterError("config must set input_channels")
    return ModelSpec(input_channels=input_channels, blocks=tuple(blocks),
                     input_size=input_size, resolution_multiplier=rho, name=name)
