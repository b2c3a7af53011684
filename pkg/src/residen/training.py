"""Training loops, evaluation, feature extraction and cross-dataset transfer.

Determinism contract: given the same resolved config and files, every run
produces identical checkpoints, epoch logs and reports. All randomness is
derived from the run seed: epoch permutations from (seed, epoch), dropout
masks from (seed, epoch, step), augmentation from (seed, epoch, sample id).
"""

from __future__ import annotations

import copy
import csv
import math
import os
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import ops
from .checkpoint import (
    CheckpointData,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
)
from .data import (
    AuClassList,
    AugmentSpec,
    FaceDataset,
    Manifest,
    align_au_classes,
    load_manifest,
    resolve_au_list,
)
from .errors import ConfigError, DataError, NumericError, ProtocolError
from .expression import (
    EMOTION_ORDER,
    ExpressionExtractor,
    build_expr_cnn,
    compose_merge_pairs,
    config_from_dict as expr_config_from_dict,
)
from .feature_cache import FeatureCache, read_feature_cache, write_feature_cache
from .fusion import FusionModel, build_fusion, config_from_dict as fusion_config_from_dict
from .layers import Ctx, mix_seed
from .metrics import (
    MetricsReport,
    confusion_matrix,
    counts_from_predictions,
    expression_accuracy,
    report_from_counts,
)
from .optim import Adam
from .residen_net import (
    build_residen,
    config_from_dict as residen_config_from_dict,
)
from .tensor import Tape, Tensor, backward

PERM_TAG = 0x7065726D
DROP_TAG = 0x64726F70

AU_LOG_HEADER = ("epoch", "train_loss", "val_mean_accuracy", "val_mean_final_score")
EXPR_LOG_HEADER = ("epoch", "train_loss", "val_accuracy")

# trunk fields that must agree between a checkpoint and an inline branch config
_TRUNK_FIELDS = ("input_hw", "in_channels", "stem_channels", "blocks",
                 "trunk_channels", "skip_connections", "post_conv_channels")


def dataset_from_config(resolved: dict, manifest_path: Optional[str] = None,
                        with_au_labels: bool = True) -> FaceDataset:
    data_cfg = resolved["data"]
    path = manifest_path or data_cfg["manifest"]
    if not path:
        raise ConfigError("no manifest path given (data.manifest)")
    manifest = load_manifest(path)
    au_list = AuClassList(tuple(data_cfg["au_list"])) if with_au_labels else None
    return FaceDataset(
        manifest,
        out_hw=data_cfg["out_hw"],
        forehead_margin=data_cfg["forehead_margin"],
        binarize_threshold=data_cfg["binarize_threshold"],
        au_list=au_list,
    )


def _chunks(ids: Sequence[str], size: int) -> List[List[str]]:
    return [list(ids[i:i + size]) for i in range(0, len(ids), size)]


def _check_trunk_match(ckpt_arch: dict, inline_arch: dict, what: str) -> None:
    for key in _TRUNK_FIELDS:
        if ckpt_arch.get(key) != inline_arch.get(key):
            raise ConfigError(
                f"{what}: checkpoint {key}={ckpt_arch.get(key)!r} does not match "
                f"the configured {key}={inline_arch.get(key)!r}"
            )


def build_training_model(resolved: dict):
    """Build the model for a resolved config, loading branch checkpoints.

    Returns (model, aux) where aux carries the trainable ParamSet, the
    penalty closure, and the optional expression feature cache. For fusion
    runs the branch architectures are materialized into
    resolved['architecture'] so the saved checkpoint is self-sufficient.
    """
    task = resolved["task"]
    seed = resolved["seed"]
    arch = resolved["architecture"]
    train_cfg = resolved["training"]

    if task == "au":
        cfg = residen_config_from_dict(arch)
        model = build_residen(cfg, seed=seed)
        return model, {"trainable": model.param_set(), "penalty": model.penalty,
                       "cache": None}

    if task == "expression":
        if arch["kind"] == "expr_cnn":
            model = build_expr_cnn(expr_config_from_dict(arch), seed=seed)
            penalty = None
        else:
            rcfg = residen_config_from_dict(arch)
            model = build_residen(rcfg, seed=seed)
            penalty = model.penalty
        return model, {"trainable": model.param_set(), "penalty": penalty,
                       "cache": None}

    # fusion: wire the two branches, optionally from checkpoints
    image_arch = arch.get("image")
    expr_arch = arch.get("expr")
    image_ckpt = None
    expr_ckpt = None
    if train_cfg["image_checkpoint"]:
        image_ckpt = load_checkpoint(train_cfg["image_checkpoint"])
        ckpt_arch = image_ckpt.config.get("architecture", {})
        if ckpt_arch.get("kind") != "residen":
            raise ConfigError("image_checkpoint must hold a trunk detector model")
        if image_arch is not None:
            _check_trunk_match(ckpt_arch, image_arch, "image branch")
        image_arch = ckpt_arch
    if train_cfg["expr_checkpoint"]:
        expr_ckpt = load_checkpoint(train_cfg["expr_checkpoint"])
        ckpt_arch = expr_ckpt.config.get("architecture", {})
        if ckpt_arch.get("kind") not in ("expr_cnn", "residen"):
            raise ConfigError("expr_checkpoint must hold a classifier model")
        if expr_arch is not None and ckpt_arch.get("kind") == expr_arch.get("kind"):
            if ckpt_arch != expr_arch:
                raise ConfigError("expr branch architecture does not match the checkpoint")
        expr_arch = ckpt_arch

    from .residen_net import ResiDenConfig

    if image_arch is None:
        image_arch = ResiDenConfig(num_outputs=arch["num_aus"]).to_dict()
    if expr_arch is None:
        from .expression import ExprNetConfig

        expr_arch = ExprNetConfig().to_dict()
    arch["image"] = image_arch
    arch["expr"] = expr_arch

    fcfg = fusion_config_from_dict(
        {k: v for k, v in arch.items() if k not in ("image", "expr")}
    )
    icfg = residen_config_from_dict(image_arch)
    if expr_arch["kind"] == "expr_cnn":
        expr_model = build_expr_cnn(expr_config_from_dict(expr_arch), seed=seed)
    else:
        expr_model = build_residen(residen_config_from_dict(expr_arch), seed=seed)
    if expr_ckpt is not None:
        expr_model.import_arrays(expr_ckpt.model_arrays())
    extractor = ExpressionExtractor(expr_model)
    model = build_fusion(fcfg, icfg, extractor, seed=seed)
    if image_ckpt is not None:
        model.image.import_arrays(image_ckpt.model_arrays(), ignore_extra=True)

    cache = None
    if train_cfg["expr_cache"]:
        if expr_ckpt is None:
            raise ConfigError(
                "expr_cache requires expr_checkpoint so provenance can be verified"
            )
        cache = read_feature_cache(train_cfg["expr_cache"])
        if cache.checkpoint_id != expr_ckpt.id:
            raise ProtocolError(
                f"feature cache was produced by checkpoint {cache.checkpoint_id}, "
                f"not by {expr_ckpt.id}"
            )
        if cache.width != fcfg.expr_raw_width:
            raise ConfigError(
                f"feature cache width {cache.width} does not match the expected "
                f"expression feature width {fcfg.expr_raw_width}"
            )
    return model, {"trainable": model.trainable_param_set(),
                   "penalty": model.image.penalty, "cache": cache}


# ---------------------------------------------------------------------------
# evaluation


def _forward_eval_probs(model, dataset: FaceDataset, ids: Sequence[str],
                        means: Sequence[float], batch_size: int,
                        cache: Optional[FeatureCache] = None) -> np.ndarray:
    out = []
    for batch_ids in _chunks(ids, batch_size):
        x = Tensor(dataset.batch(batch_ids, means))
        if cache is not None and isinstance(model, FusionModel):
            probs = model.forward(x, Ctx("eval"), Tensor(cache.matrix(batch_ids)))
        else:
            probs = model.forward(x, Ctx("eval"))
        out.append(probs.data)
    return np.concatenate(out, axis=0)


def evaluate_detector(model, dataset: FaceDataset, ids: Sequence[str],
                      threshold: float, means: Sequence[float], batch_size: int,
                      source_list: AuClassList,
                      target_list: Optional[AuClassList] = None,
                      cache: Optional[FeatureCache] = None,
                      dataset_name: str = "", checkpoint_id: str = "",
                      return_probs: bool = False):
    """MetricsReport over the given ids; optionally transferring class lists.

    ``source_list`` is what the model predicts; ``target_list`` is what the
    labels contain. Source units absent from the target are dropped and
    recorded in the report.
    """
    target = target_list if target_list is not None else source_list
    dropped = [a for a in source_list.ids if a not in target.ids]
    probs_src = _forward_eval_probs(model, dataset, ids, means, batch_size, cache)
    probs = align_au_classes(probs_src, source_list, target)
    truth = dataset.au_matrix(ids)
    pred = (probs >= threshold).astype(np.int64)
    counts = counts_from_predictions(pred, truth)
    report = report_from_counts(target.ids, counts, threshold, len(ids),
                                dataset=dataset_name, checkpoint_id=checkpoint_id,
                                dropped_aus=dropped)
    if return_probs:
        return report, probs
    return report


def evaluate_expression(model, dataset: FaceDataset, ids: Sequence[str],
                        means: Sequence[float], batch_size: int,
                        merge_pairs: Sequence[Sequence[int]] = ()) -> Tuple[float, np.ndarray]:
    """(accuracy, confusion matrix) for an emotion classifier."""
    preds = []
    for batch_ids in _chunks(ids, batch_size):
        x = Tensor(dataset.batch(batch_ids, means))
        logits = model.forward_logits(x, Ctx("eval"))
        preds.append(np.argmax(logits.data, axis=1))
    pred = np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)
    truth = dataset.emotion_vector(ids)
    if merge_pairs:
        truth = compose_merge_pairs(len(EMOTION_ORDER), merge_pairs).apply(truth)
    k = model.cfg.num_classes if hasattr(model.cfg, "num_classes") else model.cfg.num_outputs
    return expression_accuracy(pred, truth), confusion_matrix(pred, truth, k)


# ---------------------------------------------------------------------------
# the training loop


def _write_epoch_log(path: str, header: Sequence[str], rows: List[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([row["epoch"]] + [repr(row[k]) for k in header[1:]])


def train_run(resolved: dict, quiet: bool = False) -> dict:
    """Run one training job to completion; returns paths, rows and scores."""
    resolved = copy.deepcopy(resolved)
    task = resolved["task"]
    seed = resolved["seed"]
    train_cfg = resolved["training"]
    out_dir = resolved["output"]["dir"]
    if not out_dir:
        raise ConfigError("training needs output.dir")
    os.makedirs(out_dir, exist_ok=True)

    def say(msg: str) -> None:
        if not quiet:
            print(msg, flush=True)

    dataset = dataset_from_config(resolved, with_au_labels=(task != "expression"))
    train_ids = dataset.ids("train")
    if not train_ids:
        raise DataError("the train split is empty")
    val_ids = dataset.ids("val")
    eval_ids = val_ids if val_ids else train_ids
    if not val_ids:
        say("note: no val split; epoch metrics are computed on the train split")

    data_cfg = resolved["data"]
    if data_cfg["channel_means"] is None:
        data_cfg["channel_means"] = dataset.channel_means("train")
    means = data_cfg["channel_means"]

    model, aux = build_training_model(resolved)
    cache: Optional[FeatureCache] = aux["cache"]
    say(f"model built: {model.param_count()} trainable parameters")

    optimizer = Adam(aux["trainable"], lr=train_cfg["lr"], beta1=train_cfg["beta1"],
                     beta2=train_cfg["beta2"], eps=train_cfg["adam_eps"])

    au_task = task in ("au", "fusion")
    au_list = AuClassList(tuple(data_cfg["au_list"])) if au_task else None
    merge_pairs = data_cfg["merge_classes"]
    merge_map = (compose_merge_pairs(len(EMOTION_ORDER), merge_pairs)
                 if merge_pairs else None)
    augment = AugmentSpec.from_dict(data_cfg["augment"])
    batch_size = train_cfg["batch_size"]
    threshold = train_cfg["threshold"]

    header = AU_LOG_HEADER if au_task else EXPR_LOG_HEADER
    best_path = os.path.join(out_dir, "best.ckpt")
    last_path = os.path.join(out_dir, "last.ckpt")
    log_path = os.path.join(out_dir, "epochs.csv")
    curves_path = os.path.join(out_dir, "curves.png")

    rows: List[dict] = []
    best_score = -math.inf
    best_epoch = -1
    best_id = ""

    _write_epoch_log(log_path, header, rows)
    if train_cfg["epochs"] == 0:
        best_id = save_checkpoint(best_path, resolved, model, epoch=0,
                                  rng_state={"seed": seed, "completed_epochs": 0})
        save_checkpoint(last_path, resolved, model, epoch=0,
                        rng_state={"seed": seed, "completed_epochs": 0},
                        optimizer=optimizer)
        _render_curves(curves_path, rows, au_task)
        say("epochs=0: saved the initialized model")
        return {"best_path": best_path, "last_path": last_path, "rows": rows,
                "best_score": None, "best_epoch": None, "checkpoint_id": best_id}

    for epoch in range(train_cfg["epochs"]):
        perm_rng = np.random.Generator(np.random.PCG64(mix_seed(seed, PERM_TAG, epoch)))
        order = [train_ids[i] for i in perm_rng.permutation(len(train_ids))]
        total_loss = 0.0
        total_n = 0
        for step, batch_ids in enumerate(_chunks(order, batch_size)):
            xb = dataset.batch(batch_ids, means,
                               augment=augment if augment.enabled else None,
                               seed=seed, epoch=epoch)
            ctx = Ctx("train", mix_seed(seed, DROP_TAG, epoch, step))
            tape = Tape()
            with tape:
                x = Tensor(xb)
                if au_task:
                    yb = dataset.au_matrix(batch_ids).astype(np.float32)
                    if cache is not None:
                        probs = model.forward(x, ctx, Tensor(cache.matrix(batch_ids)))
                    else:
                        probs = model.forward(x, ctx)
                    loss = ops.bce_multilabel_loss(probs, yb)
                    if aux["penalty"] is not None:
                        loss = ops.residual_add(loss, aux["penalty"]())
                else:
                    yb = dataset.emotion_vector(batch_ids)
                    if merge_map is not None:
                        yb = merge_map.apply(yb)
                    logits = model.forward_logits(x, ctx)
                    loss = ops.crossentropy_loss(logits, yb)
            lv = loss.item()
            if not math.isfinite(lv):
                raise NumericError(
                    f"non-finite loss at epoch {epoch + 1} step {step + 1}; the "
                    f"best checkpoint so far is preserved at {best_path}"
                )
            backward(tape, loss)
            optimizer.step()
            optimizer.zero_grad()
            total_loss += lv * len(batch_ids)
            total_n += len(batch_ids)
        train_loss = total_loss / total_n

        if au_task:
            report = evaluate_detector(model, dataset, eval_ids, threshold, means,
                                       batch_size, au_list, cache=cache)
            score = report.mean_final_score
            row = {"epoch": epoch + 1, "train_loss": train_loss,
                   "val_mean_accuracy": report.mean_accuracy,
                   "val_mean_final_score": score}
            say(f"epoch {epoch + 1}/{train_cfg['epochs']} "
                f"train_loss={train_loss:.4f} val_acc={report.mean_accuracy:.4f} "
                f"val_final={score:.4f}")
        else:
            acc, _ = evaluate_expression(model, dataset, eval_ids, means, batch_size,
                                         merge_pairs)
            score = acc
            row = {"epoch": epoch + 1, "train_loss": train_loss, "val_accuracy": acc}
            say(f"epoch {epoch + 1}/{train_cfg['epochs']} "
                f"train_loss={train_loss:.4f} val_acc={acc:.4f}")
        rows.append(row)
        _write_epoch_log(log_path, header, rows)

        if score > best_score:
            best_score = score
            best_epoch = epoch
            best_id = save_checkpoint(
                best_path, resolved, model, epoch=epoch + 1,
                rng_state={"seed": seed, "completed_epochs": epoch + 1},
            )
        if epoch - best_epoch >= train_cfg["early_stop_patience"]:
            say(f"early stop: no improvement for {train_cfg['early_stop_patience']} "
                f"epochs (best at epoch {best_epoch + 1})")
            break

    save_checkpoint(last_path, resolved, model, epoch=rows[-1]["epoch"],
                    rng_state={"seed": seed, "completed_epochs": rows[-1]["epoch"]},
                    optimizer=optimizer)
    _render_curves(curves_path, rows, au_task)
    say(f"best score {best_score:.4f} at epoch {best_epoch + 1}; "
        f"checkpoint {best_id} at {best_path}")
    return {"best_path": best_path, "last_path": last_path, "rows": rows,
            "best_score": best_score, "best_epoch": best_epoch + 1,
            "checkpoint_id": best_id}


def _render_curves(path: str, rows: List[dict], au_task: bool) -> None:
    from .plots import save_training_curves

    save_training_curves(rows, path,
                         score_key="val_mean_final_score" if au_task else "none")


# ---------------------------------------------------------------------------
# checkpoint-driven entry points (eval / cross-eval / extract)


def manifest_au_arity(manifest: Manifest) -> Optional[int]:
    """Common unit-label arity across samples, or None if no sample has unit labels."""
    arity = None
    for rec in manifest:
        row = rec.au_binary if rec.au_binary is not None else rec.au_intensities
        if row is None:
            continue
        if arity is None:
            arity = len(row)
        elif arity != len(row):
            raise DataError(
                f"sample {rec.id}: {len(row)} unit labels, others have {arity}"
            )
    return arity


def infer_manifest_au_list(manifest: Manifest) -> Optional[AuClassList]:
    """Guess the class list from label arity: 12 and 11 map to the stock lists."""
    arity = manifest_au_arity(manifest)
    if arity == len(resolve_au_list("disfa")):
        return resolve_au_list("disfa")
    if arity == len(resolve_au_list("emotionet")):
        return resolve_au_list("emotionet")
    return None


def _detector_from_checkpoint(ckpt: CheckpointData):
    arch = ckpt.config.get("architecture", {})
    kind = arch.get("kind")
    if kind == "residen" and arch.get("output_kind") != "au":
        raise ConfigError("this checkpoint is a classifier, not a detector")
    if kind not in ("residen", "fusion"):
        raise ConfigError(f"cannot evaluate a {kind!r} checkpoint as a detector")
    return model_from_checkpoint(ckpt)


def pick_eval_split(dataset: FaceDataset, split: Optional[str]) -> Tuple[str, List[str]]:
    if split:
        ids = dataset.ids(split) if split != "all" else [r.id for r in dataset.manifest]
        if not ids:
            raise DataError(f"split {split!r} has no samples")
        return split, ids
    for name in ("test", "val", "train"):
        ids = dataset.ids(name)
        if ids:
            return name, ids
    raise DataError("the manifest has no samples")


class EvalContext:
    """Everything needed to evaluate a detector checkpoint on a manifest."""

    def __init__(self, ckpt: CheckpointData, model, dataset: FaceDataset,
                 ids: List[str], split: str, source: AuClassList,
                 target: AuClassList, threshold: float, means: List[float],
                 batch_size: int, dataset_name: str):
        self.ckpt = ckpt
        self.model = model
        self.dataset = dataset
        self.ids = ids
        self.split = split
        self.source = source
        self.target = target
        self.threshold = threshold
        self.means = means
        self.batch_size = batch_size
        self.dataset_name = dataset_name

    def run(self) -> MetricsReport:
        return evaluate_detector(
            self.model, self.dataset, self.ids, self.threshold, self.means,
            self.batch_size, self.source, self.target,
            dataset_name=self.dataset_name, checkpoint_id=self.ckpt.id,
        )


def prepare_evaluation(ckpt_path: str, manifest_path: str, au_list=None,
                       threshold: Optional[float] = None,
                       split: Optional[str] = None,
                       batch_size: Optional[int] = None,
                       same_list_only: bool = False) -> EvalContext:
    """Load a detector checkpoint and a manifest, resolving the class lists.

    ``same_list_only`` is the plain-eval contract: the manifest must carry
    the checkpoint's own class list, otherwise the caller is pointed at the
    transfer path.
    """
    ckpt = load_checkpoint(ckpt_path)
    model = _detector_from_checkpoint(ckpt)
    source = AuClassList(tuple(ckpt.config["data"]["au_list"]))
    if threshold is None:
        threshold = float(ckpt.config["training"]["threshold"])
    if batch_size is None:
        batch_size = int(ckpt.config["training"]["batch_size"])
    means = ckpt.config["data"]["channel_means"]
    if means is None:
        raise ConfigError(
            "checkpoint lacks channel means; it was not produced by a training run"
        )
    manifest = load_manifest(manifest_path)
    if same_list_only:
        arity = manifest_au_arity(manifest)
        if arity is not None and arity != len(source):
            raise ProtocolError(
                f"manifest labels {arity} units but the checkpoint predicts "
                f"{len(source)}; use cross-eval to align the class lists"
            )
        target = source
    elif au_list is not None:
        target = resolve_au_list(au_list)
    else:
        # arity matching the checkpoint's own list means same-dataset
        # evaluation; otherwise try the stock lists
        arity = manifest_au_arity(manifest)
        if arity == len(source):
            target = source
        else:
            target = infer_manifest_au_list(manifest)
        if target is None:
            raise ProtocolError(
                "cannot infer the manifest's class list from label arity; "
                "pass one explicitly"
            )
    data_cfg = ckpt.config["data"]
    dataset = FaceDataset(manifest, out_hw=data_cfg["out_hw"],
                          forehead_margin=data_cfg["forehead_margin"],
                          binarize_threshold=data_cfg["binarize_threshold"],
                          au_list=target)
    split_name, ids = pick_eval_split(dataset, split)
    return EvalContext(ckpt, model, dataset, ids, split_name, source, target,
                       threshold, means, batch_size,
                       os.path.basename(manifest_path))


def cross_evaluate_checkpoint(ckpt_path: str, manifest_path: str,
                              au_list=None, threshold: Optional[float] = None,
                              split: Optional[str] = None,
                              batch_size: Optional[int] = None) -> MetricsReport:
    """Evaluate a detector checkpoint on a manifest, aligning class lists.

    Same-dataset evaluation is the special case target == source: nothing is
    dropped and the report is identical to a plain evaluation.
    """
    return prepare_evaluation(ckpt_path, manifest_path, au_list=au_list,
                              threshold=threshold, split=split,
                              batch_size=batch_size).run()


def extract_features_to_cache(ckpt_path: str, manifest_path: str, out_path: str,
                              batch_size: Optional[int] = None) -> Tuple[int, int]:
    """Write an expression feature cache for every sample in the manifest.

    Returns (count, width).
    """
    ckpt = load_checkpoint(ckpt_path)
    arch = ckpt.config.get("architecture", {})
    kind = arch.get("kind")
    if kind == "residen" and arch.get("output_kind") != "classes":
        raise ConfigError("feature extraction needs a classifier checkpoint")
    if kind not in ("expr_cnn", "residen"):
        raise ConfigError(f"cannot extract features from a {kind!r} checkpoint")
    model = model_from_checkpoint(ckpt)
    extractor = ExpressionExtractor(model)
    if batch_size is None:
        batch_size = int(ckpt.config["training"]["batch_size"])
    means = ckpt.config["data"]["channel_means"]
    if means is None:
        raise ConfigError(
            "checkpoint lacks channel means; it was not produced by a training run"
        )
    data_cfg = ckpt.config["data"]
    manifest = load_manifest(manifest_path)
    dataset = FaceDataset(manifest, out_hw=data_cfg["out_hw"],
                          forehead_margin=data_cfg["forehead_margin"],
                          binarize_threshold=data_cfg["binarize_threshold"])
    ids = [r.id for r in manifest]
    features: Dict[str, np.ndarray] = {}
    for batch_ids in _chunks(ids, batch_size):
        x = Tensor(dataset.batch(batch_ids, means))
        f = extractor.features(x, Ctx("eval")).data
        for i, sample_id in enumerate(batch_ids):
            features[sample_id] = f[i]
    write_feature_cache(out_path, ckpt.id, features,
                        width=extractor.feature_width)
    return len(features), extractor.feature_width
