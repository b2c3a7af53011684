"""Fusion detector: image trunk features joined with reduced expression features.

The image branch is the dense trunk (flatten output), the expression branch
is a trained classifier's penultimate vector pushed through the reducer.
Both are concatenated and classified by a three-layer head with sigmoid
outputs, one per action unit. The expression extractor is frozen unless
joint fine-tuning is requested; the reducer always trains with the head.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import ops
from .errors import ConfigError, DimensionError
from .expression import ExpressionExtractor, FeatureReducer
from .layers import Ctx, Dropout, Linear, ModelGraph
from .residen_net import ResiDenConfig, ResiDenModel
from .tensor import Tensor


@dataclass(frozen=True)
class FusionConfig:
    image_feature_width: int = 4096
    expr_raw_width: int = 2048
    reducer_widths: Tuple[int, ...] = (512, 256)
    head_widths: Tuple[int, ...] = (512, 2048, 2048)
    head_dropout: Tuple[float, ...] = (0.0, 0.0, 0.0)
    num_aus: int = 12
    joint_finetune: bool = False

    def validate(self) -> None:
        if self.image_feature_width < 1 or self.expr_raw_width < 1:
            raise ConfigError("feature widths must be positive")
        if not self.reducer_widths:
            raise ConfigError("reducer needs at least one layer width")
        if not self.head_widths:
            raise ConfigError("fusion head needs at least one layer width")
        if len(self.head_widths) != len(self.head_dropout):
            raise ConfigError("head_widths and head_dropout must have equal length")
        for p in self.head_dropout:
            if not 0.0 <= p < 1.0:
                raise ConfigError(f"dropout rate must be in [0, 1), got {p}")
        if self.num_aus < 1:
            raise ConfigError(f"unit count must be positive, got {self.num_aus}")

    @property
    def expr_feature_width(self) -> int:
        return self.reducer_widths[-1]

    @property
    def fused_width(self) -> int:
        return self.image_feature_width + self.expr_feature_width

    def to_dict(self) -> dict:
        return {
            "kind": "fusion",
            "image_feature_width": self.image_feature_width,
            "expr_raw_width": self.expr_raw_width,
            "reducer_widths": list(self.reducer_widths),
            "head_widths": list(self.head_widths),
            "head_dropout": list(self.head_dropout),
            "num_aus": self.num_aus,
            "joint_finetune": self.joint_finetune,
        }


def fuse_features(img_features: Tensor, expr_features: Tensor,
                  expected_img: Optional[int] = None,
                  expected_expr: Optional[int] = None) -> Tensor:
    """Column-wise concatenation with strict width checks."""
    if img_features.data.ndim != 2 or expr_features.data.ndim != 2:
        raise DimensionError("fusion inputs must be [N, width] matrices")
    if img_features.shape[0] != expr_features.shape[0]:
        raise DimensionError(
            f"batch mismatch: {img_features.shape[0]} vs {expr_features.shape[0]}"
        )
    if expected_img is not None and img_features.shape[1] != expected_img:
        raise DimensionError(
            f"image features must be width {expected_img}, got {img_features.shape[1]}"
        )
    if expected_expr is not None and expr_features.shape[1] != expected_expr:
        raise DimensionError(
            f"expression features must be width {expected_expr}, got {expr_features.shape[1]}"
        )
    return ops.concat_cols([img_features, expr_features])


class FusionModel(ModelGraph):
    """Image trunk + expression extractor + reducer + fused classifier head."""

    def __init__(self, cfg: FusionConfig, image_cfg: ResiDenConfig,
                 extractor: ExpressionExtractor, seed: int = 0, dtype=np.float32):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.image_cfg = image_cfg
        image = ResiDenModel(image_cfg, seed=seed, dtype=dtype, with_head=False)
        if image.feature_width != cfg.image_feature_width:
            raise ConfigError(
                f"image branch produces {image.feature_width}-wide features, "
                f"config says {cfg.image_feature_width}"
            )
        if extractor.feature_width != cfg.expr_raw_width:
            raise ConfigError(
                f"extractor produces {extractor.feature_width}-wide features, "
                f"config says {cfg.expr_raw_width}"
            )
        self.image = self.add_child("image", image)
        self.extractor = extractor
        self.add_child("extractor", extractor.model)
        self.reducer = self.add_child(
            "reducer",
            FeatureReducer(cfg.expr_raw_width, cfg.reducer_widths, seed=seed + 1, dtype=dtype),
        )
        rng = np.random.Generator(np.random.PCG64(seed + 2))
        w = cfg.fused_width
        for k, (width, p) in enumerate(zip(cfg.head_widths, cfg.head_dropout)):
            self.add_child(f"head_fc{k}", Linear(w, width, rng=rng, dtype=dtype))
            if p > 0.0:
                self.add_child(f"head_drop{k}", Dropout(p))
            w = width
        self.add_child("classifier", Linear(w, cfg.num_aus, rng=rng, dtype=dtype))
        self.set_extractor_frozen(not cfg.joint_finetune)

    def set_extractor_frozen(self, frozen: bool) -> None:
        self.extractor.model.set_requires_grad(not frozen)
        self._extractor_frozen = frozen

    @property
    def extractor_frozen(self) -> bool:
        return self._extractor_frozen

    def _head(self, fused: Tensor, ctx: Ctx) -> Tensor:
        h = fused
        for k in range(len(self.cfg.head_widths)):
            h = self._children[f"head_fc{k}"](h, ctx)
            h = ops.activation("swish", h)
            drop = self._children.get(f"head_drop{k}")
            if drop is not None:
                h = drop(h, ctx)
        return self._children["classifier"](h, ctx)

    def forward_logits(self, x: Tensor, ctx: Ctx,
                       expr_raw: Optional[Tensor] = None) -> Tensor:
        """Per-unit logits. ``expr_raw`` substitutes precomputed extractor features."""
        img = self.image.forward_features(x, ctx)
        if expr_raw is None:
            # frozen extractor runs in eval mode so its dropout and batch
            # statistics stay out of the picture
            ectx = ctx if not self._extractor_frozen else Ctx("eval", ctx.seed, ctx.capture)
            expr_raw = self.extractor.features(x, ectx)
        elif expr_raw.shape[1] != self.cfg.expr_raw_width:
            raise DimensionError(
                f"precomputed expression features must be width "
                f"{self.cfg.expr_raw_width}, got {expr_raw.shape[1]}"
            )
        reduced = self.reducer(expr_raw, ctx)
        fused = fuse_features(img, reduced, self.cfg.image_feature_width,
                              self.cfg.expr_feature_width)
        return self._head(fused, ctx)

    def forward(self, x: Tensor, ctx: Ctx, expr_raw: Optional[Tensor] = None) -> Tensor:
        return ops.activation("sigmoid", self.forward_logits(x, ctx, expr_raw))

    def trainable_param_set(self):
        """Everything except the extractor when it is frozen."""
        ps = self.param_set()
        if not self._extractor_frozen:
            return ps
        keep = [n for n in ps.names() if not n.startswith("extractor.")]
        return ps.subset(keep)


def build_fusion(cfg: FusionConfig, image_cfg: ResiDenConfig,
                 extractor: ExpressionExtractor, seed: int = 0,
                 dtype=np.float32) -> FusionModel:
    return FusionModel(cfg, image_cfg, extractor, seed=seed, dtype=dtype)


def predict_aus(model: ModelGraph, x: Tensor, threshold: float = 0.5,
                probs: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    """(binary predictions, probabilities) at the given threshold."""
    if not 0.0 < threshold < 1.0:
        raise ConfigError(f"threshold must be inside (0, 1), got {threshold}")
    if probs is None:
        probs = model.forward(x, Ctx("eval")).data
    binary = (probs >= threshold).astype(np.int64)
    return binary, probs


def config_from_dict(d: dict) -> FusionConfig:
    from .config import take_keys

    vals = take_keys(
        d, "fusion architecture",
        required=(),
        optional={
            "kind": "fusion",
            "image_feature_width": 4096,
            "expr_raw_width": 2048,
            "reducer_widths": [512, 256],
            "head_widths": [512, 2048, 2048],
            "head_dropout": [0.0, 0.0, 0.0],
            "num_aus": 12,
            "joint_finetune": False,
        },
    )
    if vals["kind"] != "fusion":
        raise ConfigError(f"expected kind 'fusion', got {vals['kind']!r}")
    cfg = FusionConfig(
        image_feature_width=int(vals["image_feature_width"]),
        expr_raw_width=int(vals["expr_raw_width"]),
        reducer_widths=tuple(int(w) for w in vals["reducer_widths"]),
        head_widths=tuple(int(w) for w in vals["head_widths"]),
        head_dropout=tuple(float(p) for p in vals["head_dropout"]),
        num_aus=int(vals["num_aus"]),
        joint_finetune=bool(vals["joint_finetune"]),
    )
    cfg.validate()
    return cfg
