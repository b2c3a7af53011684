"""Run configuration: strict JSON parsing with every default materialized.

A raw config is a nested JSON object with ``task``, ``architecture``,
``data``, ``training`` and ``output`` sections. Resolution fills defaults,
validates every field, and rejects unknown keys, so a resolved config both
round-trips through JSON and fully determines the run. Checkpoints embed
the resolved form.
"""

from __future__ import annotations

import copy
import json
from typing import Any, Dict, Mapping, Optional, Sequence

from .errors import ConfigError

REQUIRED = object()

TASKS = ("au", "expression", "fusion")


def take_keys(d: Mapping[str, Any], where: str, required: Sequence[str] = (),
              optional: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """Pull exactly the declared keys out of a mapping.

    Missing required keys and unknown keys are configuration errors; optional
    keys fall back to (a deep copy of) their default.
    """
    if not isinstance(d, Mapping):
        raise ConfigError(f"{where} must be an object, got {type(d).__name__}")
    optional = optional or {}
    out: Dict[str, Any] = {}
    for key in required:
        if key not in d:
            raise ConfigError(f"missing required key {key!r} in {where}")
        out[key] = d[key]
    for key, default in optional.items():
        out[key] = d[key] if key in d else copy.deepcopy(default)
    unknown = set(d) - set(required) - set(optional)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(sorted(unknown))}")
    return out


def load_config_file(path: str) -> Dict[str, Any]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must contain a JSON object")
    return raw


def _parse_augment(d: Mapping[str, Any]) -> Dict[str, Any]:
    vals = take_keys(
        d, "data.augment",
        optional={"enabled": True, "rotation_degrees": 15.0, "scale_factor": 0.1},
    )
    rot = float(vals["rotation_degrees"])
    sf = float(vals["scale_factor"])
    if rot < 0:
        raise ConfigError(f"rotation_degrees must be non-negative, got {rot}")
    if sf < 0:
        raise ConfigError(f"scale_factor must be non-negative, got {sf}")
    return {"enabled": bool(vals["enabled"]), "rotation_degrees": rot, "scale_factor": sf}


def _parse_data(d: Mapping[str, Any], task: str) -> Dict[str, Any]:
    from .data import resolve_au_list

    vals = take_keys(
        d, "data",
        optional={
            "manifest": None,
            "au_list": "disfa",
            "binarize_threshold": 2,
            "forehead_margin": 0.25,
            "out_hw": 128,
            "augment": {},
            "channel_means": None,
            "merge_classes": [],
        },
    )
    out: Dict[str, Any] = {}
    out["manifest"] = None if vals["manifest"] is None else str(vals["manifest"])
    out["au_list"] = list(resolve_au_list(vals["au_list"]).ids)
    bt = int(vals["binarize_threshold"])
    if not 1 <= bt <= 5:
        raise ConfigError(f"binarize_threshold must be in 1..5, got {bt}")
    out["binarize_threshold"] = bt
    margin = float(vals["forehead_margin"])
    if margin < 0:
        raise ConfigError(f"forehead_margin must be non-negative, got {margin}")
    out["forehead_margin"] = margin
    hw = int(vals["out_hw"])
    if hw < 8:
        raise ConfigError(f"out_hw must be at least 8, got {hw}")
    out["out_hw"] = hw
    out["augment"] = _parse_augment(vals["augment"] or {})
    cm = vals["channel_means"]
    if cm is not None:
        cm = [float(v) for v in cm]
        if len(cm) != 3:
            raise ConfigError(f"channel_means needs 3 values, got {len(cm)}")
    out["channel_means"] = cm
    merges = vals["merge_classes"]
    if not isinstance(merges, list):
        raise ConfigError("merge_classes must be a list of [a, b] pairs")
    pairs = []
    for m in merges:
        if not isinstance(m, (list, tuple)) or len(m) != 2:
            raise ConfigError(f"merge_classes entries must be pairs, got {m!r}")
        pairs.append([int(m[0]), int(m[1])])
    if pairs and task != "expression":
        raise ConfigError("merge_classes only applies to the expression task")
    out["merge_classes"] = pairs
    return out


def _parse_training(d: Mapping[str, Any]) -> Dict[str, Any]:
    vals = take_keys(
        d, "training",
        optional={
            "epochs": 30,
            "batch_size": 32,
            "lr": 0.001,
            "beta1": 0.9,
            "beta2": 0.999,
            "adam_eps": 1e-8,
            "early_stop_patience": 10,
            "threshold": 0.5,
            "image_checkpoint": None,
            "expr_checkpoint": None,
            "expr_cache": None,
        },
    )
    out = {
        "epochs": int(vals["epochs"]),
        "batch_size": int(vals["batch_size"]),
        "lr": float(vals["lr"]),
        "beta1": float(vals["beta1"]),
        "beta2": float(vals["beta2"]),
        "adam_eps": float(vals["adam_eps"]),
        "early_stop_patience": int(vals["early_stop_patience"]),
        "threshold": float(vals["threshold"]),
        "image_checkpoint": None if vals["image_checkpoint"] is None
        else str(vals["image_checkpoint"]),
        "expr_checkpoint": None if vals["expr_checkpoint"] is None
        else str(vals["expr_checkpoint"]),
        "expr_cache": None if vals["expr_cache"] is None else str(vals["expr_cache"]),
    }
    if out["epochs"] < 0:
        raise ConfigError(f"epochs must be non-negative, got {out['epochs']}")
    if out["batch_size"] < 1:
        raise ConfigError(f"batch_size must be positive, got {out['batch_size']}")
    if out["lr"] <= 0:
        raise ConfigError(f"lr must be positive, got {out['lr']}")
    if not 0.0 < out["threshold"] < 1.0:
        raise ConfigError(f"threshold must be inside (0, 1), got {out['threshold']}")
    if out["early_stop_patience"] < 1:
        raise ConfigError("early_stop_patience must be at least 1")
    return out


def _parse_output(d: Mapping[str, Any]) -> Dict[str, Any]:
    vals = take_keys(d, "output", optional={"dir": None, "heatmap_samples": 0})
    hs = int(vals["heatmap_samples"])
    if hs < 0:
        raise ConfigError(f"heatmap_samples must be non-negative, got {hs}")
    return {"dir": None if vals["dir"] is None else str(vals["dir"]),
            "heatmap_samples": hs}


def _merged_class_count(base: int, pairs: Sequence[Sequence[int]]) -> int:
    n = base
    for a, b in pairs:
        if not (0 <= a < n and 0 <= b < n) or a == b:
            raise ConfigError(f"merge pair [{a}, {b}] invalid for {n} classes")
        n -= 1
    return n


def _parse_architecture(arch: Mapping[str, Any], task: str,
                        data_cfg: Dict[str, Any]) -> Dict[str, Any]:
    from . import expression, fusion, residen_net

    if not isinstance(arch, Mapping):
        raise ConfigError("architecture must be an object")
    arch = dict(arch)
    num_aus = len(data_cfg["au_list"])

    if task == "au":
        arch.setdefault("kind", "residen")
        if arch["kind"] != "residen":
            raise ConfigError("task 'au' requires a 'residen' architecture")
        arch.setdefault("num_outputs", num_aus)
        arch.setdefault("output_kind", "au")
        cfg = residen_net.config_from_dict(arch)
        if cfg.output_kind != "au":
            raise ConfigError("task 'au' requires output_kind 'au'")
        if cfg.num_outputs != num_aus:
            raise ConfigError(
                f"architecture has {cfg.num_outputs} outputs but the class list "
                f"names {num_aus} action units"
            )
        return cfg.to_dict()

    if task == "expression":
        # default class count follows the stock emotion list after merging;
        # an explicit num_classes (e.g. a 6-class set) simply wins
        classes = _merged_class_count(len(expression.EMOTION_ORDER),
                                      data_cfg["merge_classes"])
        arch.setdefault("kind", "expr_cnn")
        if arch["kind"] == "expr_cnn":
            arch.setdefault("num_classes", classes)
            return expression.config_from_dict(arch).to_dict()
        if arch["kind"] == "residen":
            arch.setdefault("num_outputs", classes)
            arch.setdefault("output_kind", "classes")
            rcfg = residen_net.config_from_dict(arch)
            if rcfg.output_kind != "classes":
                raise ConfigError("expression task on a trunk model needs "
                                  "output_kind 'classes'")
            return rcfg.to_dict()
        raise ConfigError(f"unsupported expression architecture {arch['kind']!r}")

    # fusion: optional inline branch architectures ride along
    arch.setdefault("kind", "fusion")
    if arch["kind"] != "fusion":
        raise ConfigError("task 'fusion' requires a 'fusion' architecture")
    image_arch = arch.pop("image", None)
    expr_arch = arch.pop("expr", None)
    arch.setdefault("num_aus", num_aus)
    cfg = fusion.config_from_dict(arch)
    if cfg.num_aus != num_aus:
        raise ConfigError(
            f"architecture has {cfg.num_aus} outputs but the class list names "
            f"{num_aus} action units"
        )
    out = cfg.to_dict()
    if image_arch is not None:
        icfg = residen_net.config_from_dict(dict(image_arch))
        if icfg.feature_width() != cfg.image_feature_width:
            raise ConfigError(
                f"image branch yields {icfg.feature_width()}-wide features, "
                f"fusion expects {cfg.image_feature_width}"
            )
        out["image"] = icfg.to_dict()
    if expr_arch is not None:
        out["expr"] = _parse_expr_branch(expr_arch, cfg.expr_raw_width)
    return out


def _parse_expr_branch(expr_arch: Mapping[str, Any], want_width: int) -> Dict[str, Any]:
    from . import expression, residen_net

    expr_arch = dict(expr_arch)
    kind = expr_arch.get("kind", "expr_cnn")
    if kind == "expr_cnn":
        ecfg = expression.config_from_dict(expr_arch)
        width = ecfg.feature_width
        d = ecfg.to_dict()
    elif kind == "residen":
        expr_arch.setdefault("output_kind", "classes")
        rcfg = residen_net.config_from_dict(expr_arch)
        if rcfg.output_kind != "classes":
            raise ConfigError("an expression branch trunk needs output_kind 'classes'")
        width = rcfg.head_widths[-1]
        d = rcfg.to_dict()
    else:
        raise ConfigError(f"unsupported expression branch kind {kind!r}")
    if width != want_width:
        raise ConfigError(
            f"expression branch yields {width}-wide features, fusion expects {want_width}"
        )
    return d


def resolve_run_config(raw: Mapping[str, Any]) -> Dict[str, Any]:
    """Validate a raw config dict and return the fully materialized form."""
    top = take_keys(
        raw, "config",
        required=("task",),
        optional={"seed": 0, "architecture": {}, "data": {}, "training": {},
                  "output": {}},
    )
    task = top["task"]
    if task not in TASKS:
        raise ConfigError(f"task must be one of {TASKS}, got {task!r}")
    data_cfg = _parse_data(top["data"] or {}, task)
    resolved = {
        "task": task,
        "seed": int(top["seed"]),
        "architecture": _parse_architecture(top["architecture"] or {}, task, data_cfg),
        "data": data_cfg,
        "training": _parse_training(top["training"] or {}),
        "output": _parse_output(top["output"] or {}),
    }
    return resolved


def config_digest_bytes(resolved: Mapping[str, Any]) -> bytes:
    """Canonical bytes for hashing: sorted keys, no whitespace drift."""
    return json.dumps(resolved, sort_keys=True, separators=(",", ":")).encode("utf-8")
