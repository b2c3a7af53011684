"""Expression classifier, class merging, and the feature/reducer path.

The classifier is a plain conv stack (swish activations, maxpool after a
configurable subset of convs) followed by three fully connected layers.
The layer before the classifier output doubles as the expression feature
vector that the fusion model consumes, after a two-layer reducer brings it
down to a compact width.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from . import ops
from .errors import ConfigError, LabelError
from .layers import Conv2d, Ctx, Dropout, Linear, MaxPool2d, ModelGraph
from .tensor import Tensor

EMOTION_ORDER: Tuple[str, ...] = (
    "surprise", "fear", "disgust", "happiness", "sadness", "anger", "neutral",
)


@dataclass(frozen=True)
class ExprNetConfig:
    input_hw: int = 128
    in_channels: int = 3
    conv_channels: Tuple[int, ...] = (48, 128, 256, 256)
    pool_after: Tuple[int, ...] = (1, 3, 4)  # 1-based conv indices followed by a 2x2/2 pool
    fc_widths: Tuple[int, ...] = (512, 512, 2048)
    fc_dropout: Tuple[float, ...] = (0.4, 0.2, 0.0)
    num_classes: int = 7

    def validate(self) -> None:
        if self.input_hw < 1 or self.in_channels < 1:
            raise ConfigError("input size and channel count must be positive")
        if not self.conv_channels:
            raise ConfigError("at least one conv stage is required")
        n = len(self.conv_channels)
        for p in self.pool_after:
            if not 1 <= p <= n:
                raise ConfigError(f"pool_after index {p} outside 1..{n}")
        if len(set(self.pool_after)) != len(self.pool_after):
            raise ConfigError("pool_after indices must be unique")
        if not self.fc_widths:
            raise ConfigError("at least one fully connected layer is required")
        if len(self.fc_widths) != len(self.fc_dropout):
            raise ConfigError("fc_widths and fc_dropout must have equal length")
        for p in self.fc_dropout:
            if not 0.0 <= p < 1.0:
                raise ConfigError(f"dropout rate must be in [0, 1), got {p}")
        if self.num_classes < 2:
            raise ConfigError(f"need at least two classes, got {self.num_classes}")
        self.flatten_width()  # raises if some pool cannot halve the grid

    def flatten_width(self) -> int:
        hw = self.input_hw
        pools = set(self.pool_after)
        for i in range(1, len(self.conv_channels) + 1):
            if i in pools:
                if hw < 2 or hw % 2 != 0:
                    raise ConfigError(
                        f"pool after conv {i}: spatial size {hw} cannot be halved"
                    )
                hw //= 2
        return self.conv_channels[-1] * hw * hw

    @property
    def feature_width(self) -> int:
        return self.fc_widths[-1]

    def to_dict(self) -> dict:
        return {
            "kind": "expr_cnn",
            "input_hw": self.input_hw,
            "in_channels": self.in_channels,
            "conv_channels": list(self.conv_channels),
            "pool_after": list(self.pool_after),
            "fc_widths": list(self.fc_widths),
            "fc_dropout": list(self.fc_dropout),
            "num_classes": self.num_classes,
        }


class ExprCnnModel(ModelGraph):
    """Conv stack + fully connected head; softmax over emotion classes."""

    def __init__(self, cfg: ExprNetConfig, seed: int = 0, dtype=np.float32):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        rng = np.random.Generator(np.random.PCG64(seed))
        ch = cfg.in_channels
        pools = set(cfg.pool_after)
        for i, out_ch in enumerate(cfg.conv_channels, start=1):
            self.add_child(f"conv{i}", Conv2d(ch, out_ch, 3, stride=1, pad=1, rng=rng,
                                              dtype=dtype))
            if i in pools:
                self.add_child(f"pool{i}", MaxPool2d(2, 2))
            ch = out_ch
        w = cfg.flatten_width()
        for k, (width, p) in enumerate(zip(cfg.fc_widths, cfg.fc_dropout), start=1):
            self.add_child(f"fc{k}", Linear(w, width, rng=rng, dtype=dtype))
            if p > 0.0:
                self.add_child(f"drop{k}", Dropout(p))
            w = width
        self.add_child("classifier", Linear(w, cfg.num_classes, rng=rng, dtype=dtype))

    @property
    def feature_width(self) -> int:
        return self.cfg.feature_width

    def features(self, x: Tensor, ctx: Ctx) -> Tensor:
        """Activation of the last fully connected layer before the classifier."""
        h = x
        pools = set(self.cfg.pool_after)
        for i in range(1, len(self.cfg.conv_channels) + 1):
            h = self._children[f"conv{i}"](h, ctx)
            h = ops.activation("swish", h)
            if i in pools:
                h = self._children[f"pool{i}"](h, ctx)
        h = ops.flatten(h)
        for k in range(1, len(self.cfg.fc_widths) + 1):
            h = self._children[f"fc{k}"](h, ctx)
            h = ops.activation("swish", h)
            drop = self._children.get(f"drop{k}")
            if drop is not None:
                h = drop(h, ctx)
        return ctx.grab("expr_features", h)

    def forward_logits(self, x: Tensor, ctx: Ctx) -> Tensor:
        return self._children["classifier"](self.features(x, ctx), ctx)

    def forward(self, x: Tensor, ctx: Ctx) -> Tensor:
        return ops.softmax(self.forward_logits(x, ctx))


def build_expr_cnn(cfg: ExprNetConfig, seed: int = 0, dtype=np.float32) -> ExprCnnModel:
    return ExprCnnModel(cfg, seed=seed, dtype=dtype)


class ExpressionExtractor:
    """Uniform handle on 'a trained classifier with a wide penultimate layer'.

    Works for the conv-stack classifier and for a trunk model built with
    ``output_kind='classes'``; anything without a named feature layer is a
    configuration error.
    """

    def __init__(self, model: ModelGraph):
        feats = getattr(model, "features", None) or getattr(model, "head_features", None)
        if feats is None:
            raise ConfigError("model has no named feature layer to extract from")
        self.model = model
        self._features = feats

    @property
    def feature_width(self) -> int:
        cfg = self.model.cfg
        if hasattr(cfg, "fc_widths"):
            return cfg.fc_widths[-1]
        return cfg.head_widths[-1]

    def features(self, x: Tensor, ctx: Ctx) -> Tensor:
        return self._features(x, ctx)

    def freeze(self) -> None:
        self.model.set_requires_grad(False)

    def unfreeze(self) -> None:
        self.model.set_requires_grad(True)


def extract_expression_features(model: ModelGraph, x: Tensor, mode: str = "eval") -> Tensor:
    """Feature vectors [N, width] from a classifier's penultimate layer."""
    return ExpressionExtractor(model).features(x, Ctx(mode))


class FeatureReducer(ModelGraph):
    """Two swish-activated linear layers squeezing expression features down."""

    def __init__(self, in_width: int, widths: Tuple[int, ...] = (512, 256),
                 seed: int = 0, dtype=np.float32):
        super().__init__()
        if not widths:
            raise ConfigError("reducer needs at least one layer width")
        self.in_width = in_width
        self.widths = tuple(int(w) for w in widths)
        rng = np.random.Generator(np.random.PCG64(seed))
        w = in_width
        for i, width in enumerate(self.widths, start=1):
            self.add_child(f"fc{i}", Linear(w, width, rng=rng, dtype=dtype))
            w = width

    @property
    def out_width(self) -> int:
        return self.widths[-1]

    def forward(self, x: Tensor, ctx: Ctx) -> Tensor:
        if x.shape[-1] != self.in_width:
            raise ConfigError(
                f"reducer expects width {self.in_width}, got {x.shape[-1]}"
            )
        h = x
        for i in range(1, len(self.widths) + 1):
            h = self._children[f"fc{i}"](h, ctx)
            h = ops.activation("swish", h)
        return h


def reduce_features(reducer: FeatureReducer, f: Tensor, ctx: Optional[Ctx] = None) -> Tensor:
    return reducer(f, ctx if ctx is not None else Ctx("eval"))


@dataclass(frozen=True)
class ClassMergeMap:
    """Relabeling from source class index to merged class index.

    ``mapping[i]`` is the merged index of source class ``i``. Merged indices
    must be exactly 0..K-1 with no gaps.
    """

    mapping: Tuple[int, ...]

    def __post_init__(self) -> None:
        if not self.mapping:
            raise ConfigError("class merge map cannot be empty")
        used = set(self.mapping)
        k = max(self.mapping) + 1
        if min(self.mapping) < 0 or used != set(range(k)):
            raise ConfigError(f"merged indices must cover 0..{k - 1} without gaps")

    @property
    def num_source(self) -> int:
        return len(self.mapping)

    @property
    def num_merged(self) -> int:
        return max(self.mapping) + 1

    @classmethod
    def identity(cls, k: int) -> "ClassMergeMap":
        return cls(tuple(range(k)))

    @classmethod
    def merge_pair(cls, k: int, a: int, b: int) -> "ClassMergeMap":
        """Collapse classes a and b; remaining classes keep their relative order."""
        if not (0 <= a < k and 0 <= b < k) or a == b:
            raise ConfigError(f"cannot merge classes {a} and {b} out of {k}")
        lo, hi = min(a, b), max(a, b)
        mapping = []
        for i in range(k):
            j = lo if i in (lo, hi) else i
            mapping.append(j if j < hi else j - 1)
        return cls(tuple(mapping))

    def apply(self, labels: Sequence[int]) -> np.ndarray:
        arr = np.asarray(labels, dtype=np.int64)
        if arr.size and (arr.min() < 0 or arr.max() >= self.num_source):
            bad = int(arr[(arr < 0) | (arr >= self.num_source)][0])
            raise LabelError(f"class index {bad} outside 0..{self.num_source - 1}")
        table = np.asarray(self.mapping)
        return table[arr]

    def merged_names(self, names: Sequence[str]) -> Tuple[str, ...]:
        if len(names) != self.num_source:
            raise ConfigError(
                f"expected {self.num_source} class names, got {len(names)}"
            )
        groups: "list[list[str]]" = [[] for _ in range(self.num_merged)]
        for src, dst in enumerate(self.mapping):
            groups[dst].append(names[src])
        return tuple("+".join(g) for g in groups)


def default_anger_disgust_merge() -> ClassMergeMap:
    """The stock 7 -> 6 merge: anger and disgust become one class."""
    a = EMOTION_ORDER.index("anger")
    d = EMOTION_ORDER.index("disgust")
    return ClassMergeMap.merge_pair(len(EMOTION_ORDER), d, a)


def merge_classes(labels: Sequence[int], cmap: ClassMergeMap) -> np.ndarray:
    return cmap.apply(labels)


def compose_merge_pairs(base: int, pairs: Sequence[Sequence[int]]) -> ClassMergeMap:
    """Fold a list of [a, b] merges (each over the then-current classes) into one map."""
    cmap = ClassMergeMap.identity(base)
    for a, b in pairs:
        step = ClassMergeMap.merge_pair(cmap.num_merged, int(a), int(b))
        cmap = ClassMergeMap(tuple(step.mapping[m] for m in cmap.mapping))
    return cmap


def config_from_dict(d: dict) -> ExprNetConfig:
    from .config import take_keys

    vals = take_keys(
        d, "expression architecture",
        required=(),
        optional={
            "kind": "expr_cnn",
            "input_hw": 128,
            "in_channels": 3,
            "conv_channels": [48, 128, 256, 256],
            "pool_after": [1, 3, 4],
            "fc_widths": [512, 512, 2048],
            "fc_dropout": [0.4, 0.2, 0.0],
            "num_classes": 7,
        },
    )
    if vals["kind"] != "expr_cnn":
        raise ConfigError(f"expected kind 'expr_cnn', got {vals['kind']!r}")
    cfg = ExprNetConfig(
        input_hw=int(vals["input_hw"]),
        in_channels=int(vals["in_channels"]),
        conv_channels=tuple(int(c) for c in vals["conv_channels"]),
        pool_after=tuple(int(p) for p in vals["pool_after"]),
        fc_widths=tuple(int(w) for w in vals["fc_widths"]),
        fc_dropout=tuple(float(p) for p in vals["fc_dropout"]),
        num_classes=int(vals["num_classes"]),
    )
    cfg.validate()
    return cfg
