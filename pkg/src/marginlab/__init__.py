"""Desk-scale laboratory for margin-based adversarial robustness.

The package trains small classifiers with a combined defense loss
(smoothed cross-entropy, paired cosine embedding terms, within-class
variance, and an input-Jacobian penalty), attacks them with the
standard gradient-sign and CW-L2 families, and measures embedding
separability, margins, and certified-style distortion bounds. All
numerics run on a self-contained reverse-mode autodiff tape that
supports differentiating through gradients.
"""

from .analysis import (
    BlackBoxResult,
    ConfusionReport,
    DistillConfig,
    MarginReport,
    QueryOnlyModel,
    SeparabilityReport,
    adversarial_confusion,
    blackbox_evaluate,
    centroid_distance_matrix,
    class_spreads,
    davies_bouldin,
    distill_proxy,
    distortion_lower_bound,
    embedding_jacobian_norms,
    embedding_margin,
    pca_projection,
    report_json,
    separability_report,
)
from .attacks import (
    ATTACK_FAMILIES,
    AdversarialResult,
    AttackConfig,
    AttackEvaluation,
    CWParams,
    bim,
    cw_l2,
    evaluate_attack,
    fgsm,
    pgd,
    run_attack,
    write_attack_csv,
)
from .autograd import CompGraph, Gradients, Var, backward, forward_op, jacobian
from .config import (
    AnalysisConfig,
    AttackSpec,
    ConfigError,
    DatasetConfig,
    ModelConfig,
    RunConfig,
    load_config,
    parse_config,
    save_config,
    serialize_config,
)
from .data import (
    BadMagicError,
    CountMismatchError,
    DataError,
    Dataset,
    TruncatedFileError,
    load_csv,
    load_idx,
    make_digits_dataset,
    make_toy_dataset,
)
from .losses import (
    DefenseLossConfig,
    LossBreakdown,
    class_variance_loss,
    cosine_similarity,
    defense_loss,
    jacobian_penalty,
    siamese_loss,
    smoothed_cross_entropy,
    smoothing_target,
)
from .model import (
    CheckpointError,
    CheckpointShapeError,
    CheckpointVersionError,
    CorruptCheckpointError,
    LayerSpec,
    Network,
    conv_classifier,
    init_parameters,
    load_checkpoint,
    mlp_classifier,
    save_checkpoint,
)
from .tensor import Tensor
from .train import (
    AdversarialTrainingConfig,
    LogRecord,
    SiameseBatch,
    TrainConfig,
    TrainingDivergedError,
    adversarial_augment,
    build_siamese_batch,
    sgd_step,
    train,
    write_training_csv,
)

__version__ = "0.1.0"

__all__ = [
    "ATTACK_FAMILIES",
    "AdversarialResult",
    "AdversarialTrainingConfig",
    "AnalysisConfig",
    "AttackConfig",
    "AttackEvaluation",
    "AttackSpec",
    "BadMagicError",
    "BlackBoxResult",
    "CWParams",
    "CheckpointError",
    "CheckpointShapeError",
    "CheckpointVersionError",
    "CompGraph",
    "ConfigError",
    "ConfusionReport",
    "CorruptCheckpointError",
    "CountMismatchError",
    "DataError",
    "Dataset",
    "DatasetConfig",
    "DefenseLossConfig",
    "DistillConfig",
    "Gradients",
    "LayerSpec",
    "LogRecord",
    "LossBreakdown",
    "MarginReport",
    "ModelConfig",
    "Network",
    "QueryOnlyModel",
    "RunConfig",
    "SeparabilityReport",
    "SiameseBatch",
    "Tensor",
    "TrainConfig",
    "TrainingDivergedError",
    "TruncatedFileError",
    "Var",
    "adversarial_augment",
    "adversarial_confusion",
    "backward",
    "bim",
    "blackbox_evaluate",
    "build_siamese_batch",
    "centroid_distance_matrix",
    "class_spreads",
    "class_variance_loss",
    "conv_classifier",
    "cosine_similarity",
    "cw_l2",
    "davies_bouldin",
    "defense_loss",
    "distill_proxy",
    "distortion_lower_bound",
    "embedding_jacobian_norms",
    "embedding_margin",
    "evaluate_attack",
    "fgsm",
    "forward_op",
    "init_parameters",
    "jacobian",
    "jacobian_penalty",
    "load_checkpoint",
    "load_config",
    "load_csv",
    "load_idx",
    "make_digits_dataset",
    "make_toy_dataset",
    "mlp_classifier",
    "parse_config",
    "pca_projection",
    "pgd",
    "report_json",
    "run_attack",
    "save_checkpoint",
    "save_config",
    "separability_report",
    "serialize_config",
    "sgd_step",
    "siamese_loss",
    "smoothed_cross_entropy",
    "smoothing_target",
    "train",
    "write_attack_csv",
    "write_training_csv",
]
