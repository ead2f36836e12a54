from .backbones import (
    FEATURE_DIM,
    BackboneTrainConfig,
    FactualClassifier,
    FeatureBackbone2d,
    FeatureBackbone3d,
    classify,
    features_2d,
    features_3d,
    train_backbone_2d,
    train_backbone_3d,
    train_factual_classifier,
)
from .experiments import (
    DataUtilityResult,
    data_utility_experiment,
    factual_correctness_eval,
    guidance_sweep,
    metric_row,
    permutation_null,
)
from .fid import (
    GaussianSummary,
    MetricError,
    extract_slices,
    fid_2_5d,
    fid_3d,
    fid_from_features,
    frechet_distance,
    gaussian_summary,
)
from .metrics import auc, binary_auc, precision

__all__ = [name for name in dir() if not name.startswith("_")]
