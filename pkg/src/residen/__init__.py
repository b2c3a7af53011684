"""Dense-residual convolutional toolkit for facial action unit detection.

The package bundles a small eager autodiff engine (``tensor``, ``ops``), the
dense-block detector backbone (``residen_net``), an expression classifier and
feature reducer (``expression``), the two-branch fused detector (``fusion``),
data and synthetic-corpus tooling (``data``, ``synth``), metrics and
attribution maps (``metrics``), and training / evaluation drivers exposed on
the ``residen`` command line (``training``, ``cli``).
"""

from .config import load_config_file, resolve_run_config
from .data import (
    AU_NAMES,
    DISFA_AUS,
    EMOTIONET_AUS,
    AuClassList,
    FaceDataset,
    align_au_classes,
    binarize_intensity,
    load_manifest,
    resolve_au_list,
    save_manifest,
)
from .errors import (
    ConfigError,
    DataError,
    DimensionError,
    LabelError,
    NumericError,
    ProtocolError,
    ResidenError,
    UndefinedMetricError,
    UsageError,
)
from .expression import (
    EMOTION_ORDER,
    ClassMergeMap,
    ExpressionExtractor,
    ExprCnnModel,
    ExprNetConfig,
    FeatureReducer,
    default_anger_disgust_merge,
    merge_classes,
)
from .fusion import FusionConfig, FusionModel, build_fusion, fuse_features, predict_aus
from .gradcheck import grad_check, run_suite
from .layers import Ctx, ModelGraph, mix_seed
from .metrics import (
    MetricsReport,
    class_activation_map,
    final_score,
    mean_over_aus,
    report_from_counts,
    saliency_map,
)
from .optim import Adam
from .residen_net import DenseBlockConfig, ResiDenConfig, ResiDenModel, build_residen
from .tensor import ParamSet, Tape, Tensor
from .training import (
    cross_evaluate_checkpoint,
    extract_features_to_cache,
    prepare_evaluation,
    train_run,
)

__version__ = "1.0.0"

__all__ = [
    "AU_NAMES",
    "DISFA_AUS",
    "EMOTIONET_AUS",
    "EMOTION_ORDER",
    "Adam",
    "AuClassList",
    "ClassMergeMap",
    "ConfigError",
    "Ctx",
    "DataError",
    "DenseBlockConfig",
    "DimensionError",
    "ExprCnnModel",
    "ExprNetConfig",
    "ExpressionExtractor",
    "FaceDataset",
    "FeatureReducer",
    "FusionConfig",
    "FusionModel",
    "LabelError",
    "MetricsReport",
    "ModelGraph",
    "NumericError",
    "ParamSet",
    "ProtocolError",
    "ResiDenConfig",
    "ResiDenModel",
    "ResidenError",
    "Tape",
    "Tensor",
    "UndefinedMetricError",
    "UsageError",
    "align_au_classes",
    "binarize_intensity",
    "build_fusion",
    "build_residen",
    "class_activation_map",
    "cross_evaluate_checkpoint",
    "default_anger_disgust_merge",
    "extract_features_to_cache",
    "final_score",
    "fuse_features",
    "grad_check",
    "load_config_file",
    "load_manifest",
    "mean_over_aus",
    "merge_classes",
    "mix_seed",
    "predict_aus",
    "prepare_evaluation",
    "report_from_counts",
    "resolve_au_list",
    "resolve_run_config",
    "run_suite",
    "saliency_map",
    "save_manifest",
    "train_run",
    "__version__",
]
