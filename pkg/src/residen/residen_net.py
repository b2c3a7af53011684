"""Dense convolutional trunk with residual block-to-block shortcuts.

Layout: a 3x3 stem conv plus 2x2 maxpool, then dense blocks joined by
transition layers (batchnorm -> swish -> 1x1 conv to a fixed trunk width ->
2x2 maxpool). From the second boundary on, the input that entered block n
is average-pooled and added to the transition output, so block n+1 sees a
residual mix of the two paths; the fixed trunk width is what makes the
shapes line up. After the last block two plain conv+pool stages squeeze the
grid down before the flattened features reach the classifier head.

Every pooling stage halves H and W exactly, so spatial sizes stay integral
for power-of-two inputs. Builders validate the whole trace up front and
raise ConfigError before any parameter is allocated.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from . import ops
from .errors import ConfigError
from .layers import BatchNorm2d, Conv2d, Ctx, Dropout, Linear, MaxPool2d, ModelGraph
from .tensor import Tensor


@dataclass(frozen=True)
class DenseBlockConfig:
    """One dense block: ``num_layers`` composite layers, each adding ``growth_rate`` channels."""

    num_layers: int
    growth_rate: int

    def validate(self) -> None:
        if self.num_layers < 1:
            raise ConfigError(f"dense block needs at least one layer, got {self.num_layers}")
        if self.growth_rate < 1:
            raise ConfigError(f"growth rate must be positive, got {self.growth_rate}")

    def out_channels(self, in_channels: int) -> int:
        return in_channels + self.num_layers * self.growth_rate

    def to_dict(self) -> dict:
        return {"num_layers": self.num_layers, "growth_rate": self.growth_rate}


@dataclass(frozen=True)
class ResiDenConfig:
    input_hw: int = 128
    in_channels: int = 3
    stem_channels: int = 48
    blocks: Tuple[DenseBlockConfig, ...] = (
        DenseBlockConfig(12, 32),
        DenseBlockConfig(12, 32),
        DenseBlockConfig(36, 32),
    )
    trunk_channels: int = 256
    skip_connections: bool = True
    post_conv_channels: Tuple[int, ...] = (128, 256)
    head_widths: Tuple[int, ...] = (512, 1024, 2048)
    head_dropout: Tuple[float, ...] = (0.0, 0.4, 0.2)
    num_outputs: int = 12
    output_kind: str = "au"  # "au" -> sigmoid over units, "classes" -> softmax
    l1_lambda: float = 0.001
    l2_lambda: float = 0.001
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def validate(self) -> None:
        if self.input_hw < 1 or self.in_channels < 1:
            raise ConfigError("input size and channel count must be positive")
        if not self.blocks:
            raise ConfigError("at least one dense block is required")
        for b in self.blocks:
            b.validate()
        if self.trunk_channels < 1:
            raise ConfigError(f"trunk width must be positive, got {self.trunk_channels}")
        if len(self.head_widths) != len(self.head_dropout):
            raise ConfigError("head_widths and head_dropout must have equal length")
        for p in self.head_dropout:
            if not 0.0 <= p < 1.0:
                raise ConfigError(f"dropout rate must be in [0, 1), got {p}")
        if self.num_outputs < 1:
            raise ConfigError(f"output count must be positive, got {self.num_outputs}")
        if self.output_kind not in ("au", "classes"):
            raise ConfigError(f"unknown output kind {self.output_kind!r}")
        self.trace()  # raises on any shape inconsistency

    def trace(self) -> "List[str]":
        """Symbolic shape walk; returns human-readable stage lines, raises ConfigError."""
        lines: List[str] = []
        hw = self.input_hw
        lines.append(f"input {self.in_channels}x{hw}x{hw}")
        hw = _pooled(hw, "stem pool")
        ch = self.stem_channels
        lines.append(f"stem conv3x3 -> {ch} @ {hw}")
        for i, b in enumerate(self.blocks):
            ch = b.out_channels(ch)
            lines.append(f"block {i + 1} -> {ch} @ {hw}")
            if i < len(self.blocks) - 1:
                hw = _pooled(hw, f"transition {i + 1} pool")
                ch = self.trunk_channels
                lines.append(f"transition {i + 1} -> {ch} @ {hw}")
        for j, pc in enumerate(self.post_conv_channels):
            hw = _pooled(hw, f"post conv {j + 1} pool")
            ch = pc
            lines.append(f"post conv {j + 1} -> {ch} @ {hw}")
        lines.append(f"flatten -> {ch * hw * hw}")
        return lines

    def feature_width(self) -> int:
        """Width of the flattened feature vector; pure function of the config."""
        hw = _pooled(self.input_hw, "stem pool")
        ch = self.stem_channels
        for i, b in enumerate(self.blocks):
            ch = b.out_channels(ch)
            if i < len(self.blocks) - 1:
                hw = _pooled(hw, f"transition {i + 1} pool")
                ch = self.trunk_channels
        for pc in self.post_conv_channels:
            hw = _pooled(hw, "post conv pool")
            ch = pc
        return ch * hw * hw

    def to_dict(self) -> dict:
        return {
            "kind": "residen",
            "input_hw": self.input_hw,
            "in_channels": self.in_channels,
            "stem_channels": self.stem_channels,
            "blocks": [b.to_dict() for b in self.blocks],
            "trunk_channels": self.trunk_channels,
            "skip_connections": self.skip_connections,
            "post_conv_channels": list(self.post_conv_channels),
            "head_widths": list(self.head_widths),
            "head_dropout": list(self.head_dropout),
            "num_outputs": self.num_outputs,
            "output_kind": self.output_kind,
            "l1_lambda": self.l1_lambda,
            "l2_lambda": self.l2_lambda,
            "bn_momentum": self.bn_momentum,
            "bn_eps": self.bn_eps,
        }


def _pooled(hw: int, where: str) -> int:
    """2x2 stride-2 pooling must halve the grid exactly."""
    if hw < 2 or hw % 2 != 0:
        raise ConfigError(f"{where}: spatial size {hw} cannot be halved by a 2x2/2 pool")
    return hw // 2


class DenseBlock(ModelGraph):
    """Composite layers (batchnorm -> swish -> conv3x3) with cumulative concatenation."""

    def __init__(self, cfg: DenseBlockConfig, in_channels: int,
                 rng: np.random.Generator, dtype=np.float32,
                 bn_momentum: float = 0.1, bn_eps: float = 1e-5):
        super().__init__()
        cfg.validate()
        self.in_channels = in_channels
        self.cfg = cfg
        ch = in_channels
        for i in range(cfg.num_layers):
            self.add_child(f"bn{i}", BatchNorm2d(ch, bn_momentum, bn_eps, dtype=dtype))
            self.add_child(
                f"conv{i}", Conv2d(ch, cfg.growth_rate, 3, stride=1, pad=1, rng=rng, dtype=dtype)
            )
            ch += cfg.growth_rate
        self.out_channels = ch

    def forward(self, x: Tensor, ctx: Ctx) -> Tensor:
        cat = x
        for i in range(self.cfg.num_layers):
            h = self._children[f"bn{i}"](cat, ctx)
            h = ops.activation("swish", h)
            h = self._children[f"conv{i}"](h, ctx)
            cat = ops.concat_channels([cat, h])
        return cat


class Transition(ModelGraph):
    """batchnorm -> swish -> 1x1 conv to trunk width -> 2x2/2 maxpool."""

    def __init__(self, in_channels: int, out_channels: int,
                 rng: np.random.Generator, dtype=np.float32,
                 bn_momentum: float = 0.1, bn_eps: float = 1e-5):
        super().__init__()
        self.bn = self.add_child("bn", BatchNorm2d(in_channels, bn_momentum, bn_eps, dtype=dtype))
        self.conv = self.add_child(
            "conv", Conv2d(in_channels, out_channels, 1, stride=1, pad=0, rng=rng, dtype=dtype)
        )
        self.pool = self.add_child("pool", MaxPool2d(2, 2))

    def forward(self, x: Tensor, ctx: Ctx) -> Tensor:
        h = self.bn(x, ctx)
        h = ops.activation("swish", h)
        h = self.conv(h, ctx)
        return self.pool(h, ctx)


def build_dense_block(cfg: DenseBlockConfig, in_channels: int, seed: int = 0,
                      dtype=np.float32) -> DenseBlock:
    rng = np.random.Generator(np.random.PCG64(seed))
    return DenseBlock(cfg, in_channels, rng, dtype=dtype)


def build_transition(in_channels: int, out_channels: int, seed: int = 0,
                     dtype=np.float32) -> Transition:
    rng = np.random.Generator(np.random.PCG64(seed))
    return Transition(in_channels, out_channels, rng, dtype=dtype)


class ResiDenModel(ModelGraph):
    """Full trunk plus flatten plus (optionally) the standalone classifier head.

    ``with_head=False`` builds just the feature extractor; the fusion model
    uses that form as its image branch.
    """

    def __init__(self, cfg: ResiDenConfig, seed: int = 0, dtype=np.float32,
                 with_head: bool = True):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.with_head = with_head
        rng = np.random.Generator(np.random.PCG64(seed))
        dt = dtype

        self.stem_conv = self.add_child(
            "stem_conv",
            Conv2d(cfg.in_channels, cfg.stem_channels, 3, stride=1, pad=1, rng=rng, dtype=dt),
        )
        self.stem_pool = self.add_child("stem_pool", MaxPool2d(2, 2))

        ch = cfg.stem_channels
        hw = _pooled(cfg.input_hw, "stem pool")
        self._skip_sites: List[int] = []
        for i, b in enumerate(cfg.blocks):
            block = DenseBlock(b, ch, rng, dtype=dt, bn_momentum=cfg.bn_momentum,
                               bn_eps=cfg.bn_eps)
            self.add_child(f"block{i}", block)
            block_in_ch, block_in_hw = ch, hw
            ch = block.out_channels
            if i < len(cfg.blocks) - 1:
                self.add_child(
                    f"transition{i}",
                    Transition(ch, cfg.trunk_channels, rng, dtype=dt,
                               bn_momentum=cfg.bn_momentum, bn_eps=cfg.bn_eps),
                )
                hw = _pooled(hw, f"transition {i + 1} pool")
                ch = cfg.trunk_channels
                if cfg.skip_connections and i >= 1:
                    # shortcut: the tensor that entered block i, average-pooled,
                    # must match the transition output exactly
                    if block_in_ch != ch or _pooled(block_in_hw, "skip pool") != hw:
                        raise ConfigError(
                            f"skip at block boundary {i + 1}: shortcut "
                            f"{block_in_ch}@{block_in_hw // 2} vs trunk {ch}@{hw}"
                        )
                    self._skip_sites.append(i)

        self._post = []
        for j, pc in enumerate(cfg.post_conv_channels):
            self.add_child(
                f"post_conv{j}", Conv2d(ch, pc, 3, stride=1, pad=1, rng=rng, dtype=dt)
            )
            self.add_child(f"post_pool{j}", MaxPool2d(2, 2))
            self._post.append(j)
            hw = _pooled(hw, f"post conv {j + 1} pool")
            ch = pc

        self._feature_width = ch * hw * hw
        self._last_grid = (ch, hw)

        if with_head:
            w = self._feature_width
            for k, (width, p) in enumerate(zip(cfg.head_widths, cfg.head_dropout)):
                self.add_child(f"head_fc{k}", Linear(w, width, rng=rng, dtype=dt))
                if p > 0.0:
                    self.add_child(f"head_drop{k}", Dropout(p))
                w = width
            self.add_child("classifier", Linear(w, cfg.num_outputs, rng=rng, dtype=dt))

    # -- structural queries ---------------------------------------------

    @property
    def feature_width(self) -> int:
        return self._feature_width

    @property
    def skip_sites(self) -> List[int]:
        """Block indices (0-based) whose inputs feed a shortcut."""
        return list(self._skip_sites)

    def regularized_params(self):
        """Weights under the L1+L2 penalty: the post-block conv kernels."""
        return [self._children[f"post_conv{j}"].w for j in self._post]

    # -- forward passes ---------------------------------------------------

    def forward_features(self, x: Tensor, ctx: Ctx) -> Tensor:
        h = self.stem_conv(x, ctx)
        h = ops.activation("swish", h)
        h = self.stem_pool(h, ctx)
        n = len(self.cfg.blocks)
        for i in range(n):
            block_in = h
            h = self._children[f"block{i}"](h, ctx)
            if i < n - 1:
                h = self._children[f"transition{i}"](h, ctx)
                if self.cfg.skip_connections and i >= 1:
                    shortcut = ops.avgpool2d(block_in, 2, 2)
                    h = ops.residual_add(h, shortcut)
        for j in self._post:
            h = self._children[f"post_conv{j}"](h, ctx)
            h = ops.activation("swish", h)
            h = self._children[f"post_pool{j}"](h, ctx)
        ctx.grab("last_conv", h)
        return ctx.grab("features", ops.flatten(h))

    def head_features(self, x: Tensor, ctx: Ctx) -> Tensor:
        """Output of the last head layer (the 2048-wide vector in the stock config)."""
        if not self.with_head:
            raise ConfigError("this model was built without a classifier head")
        h = self.forward_features(x, ctx)
        for k in range(len(self.cfg.head_widths)):
            h = self._children[f"head_fc{k}"](h, ctx)
            h = ops.activation("swish", h)
            drop = self._children.get(f"head_drop{k}")
            if drop is not None:
                h = drop(h, ctx)
        return ctx.grab("head_features", h)

    def forward_logits(self, x: Tensor, ctx: Ctx) -> Tensor:
        h = self.head_features(x, ctx)
        return self._children["classifier"](h, ctx)

    def forward(self, x: Tensor, ctx: Ctx) -> Tensor:
        logits = self.forward_logits(x, ctx)
        if self.cfg.output_kind == "au":
            return ops.activation("sigmoid", logits)
        return ops.softmax(logits)

    def penalty(self) -> Tensor:
        return ops.l1l2_penalty(self.regularized_params(), self.cfg.l1_lambda,
                                self.cfg.l2_lambda)


def build_residen(cfg: ResiDenConfig, seed: int = 0, dtype=np.float32,
                  with_head: bool = True) -> ResiDenModel:
    return ResiDenModel(cfg, seed=seed, dtype=dtype, with_head=with_head)


def forward_features(model: ResiDenModel, x: Tensor, mode: str = "eval",
                     ctx: Optional[Ctx] = None) -> Tensor:
    return model.forward_features(x, ctx if ctx is not None else Ctx(mode))


def forward_standalone(model: ResiDenModel, x: Tensor, mode: str = "eval",
                       ctx: Optional[Ctx] = None) -> Tensor:
    """Per-unit probabilities from the standalone detector."""
    return model.forward(x, ctx if ctx is not None else Ctx(mode))


def config_from_dict(d: dict) -> ResiDenConfig:
    """Strict parse; unknown keys are configuration errors."""
    from .config import take_keys  # local import avoids a cycle at module load

    vals = take_keys(
        d, "residen architecture",
        required=("blocks",),
        optional={
            "kind": "residen",
            "input_hw": 128,
            "in_channels": 3,
            "stem_channels": 48,
            "trunk_channels": 256,
            "skip_connections": True,
            "post_conv_channels": [128, 256],
            "head_widths": [512, 1024, 2048],
            "head_dropout": [0.0, 0.4, 0.2],
            "num_outputs": 12,
            "output_kind": "au",
            "l1_lambda": 0.001,
            "l2_lambda": 0.001,
            "bn_momentum": 0.1,
            "bn_eps": 1e-5,
        },
    )
    if vals["kind"] != "residen":
        raise ConfigError(f"expected kind 'residen', got {vals['kind']!r}")
    raw_blocks = vals["blocks"]
    if not isinstance(raw_blocks, (list, tuple)) or not raw_blocks:
        raise ConfigError("blocks must be a non-empty list")
    blocks = []
    for i, rb in enumerate(raw_blocks):
        if not isinstance(rb, dict):
            raise ConfigError(f"blocks[{i}] must be an object")
        bv = take_keys(rb, f"blocks[{i}]", required=("num_layers", "growth_rate"), optional={})
        blocks.append(DenseBlockConfig(int(bv["num_layers"]), int(bv["growth_rate"])))
    cfg = ResiDenConfig(
        input_hw=int(vals["input_hw"]),
        in_channels=int(vals["in_channels"]),
        stem_channels=int(vals["stem_channels"]),
        blocks=tuple(blocks),
        trunk_channels=int(vals["trunk_channels"]),
        skip_connections=bool(vals["skip_connections"]),
        post_conv_channels=tuple(int(c) for c in vals["post_conv_channels"]),
        head_widths=tuple(int(w) for w in vals["head_widths"]),
        head_dropout=tuple(float(p) for p in vals["head_dropout"]),
        num_outputs=int(vals["num_outputs"]),
        output_kind=str(vals["output_kind"]),
        l1_lambda=float(vals["l1_lambda"]),
        l2_lambda=float(vals["l2_lambda"]),
        bn_momentum=float(vals["bn_momentum"]),
        bn_eps=float(vals["bn_eps"]),
    )
    cfg.validate()
    return cfg
