"""Deviation-learning toolkit for visual anomaly detection with contaminated training sets."""

from .backbone import EncoderConfig, FeatureBundle, MultiScaleEncoder
from .data import (
    CategoryData,
    ContaminationSpec,
    ImageSample,
    inject_contamination,
    load_category,
    make_training_batch,
)
from .evaluation import MetricsReport, SweepSpec, auc_pr, auc_roc, run_sweep, score_test_set
from .exceptions import ConfigurationError, DegeneratePriorError
from .heads import AnomalyDetector, DetectorConfig, HeadOutputs, topk_score
from .losses import (
    ReferenceStats,
    bce_loss,
    deviation_loss,
    focal_seg_loss,
    kmeans_soft_targets,
    sample_reference_stats,
    soft_deviation_loss,
)
from .noise_synth import BlendSpec, PseudoAnomalySynthesizer, blend_pseudo_anomaly, generate_perlin_mask
from .reweighting import (
    DivergenceSpec,
    compute_weights,
    reweighted_objective,
    weights_alpha,
    weights_kl,
    weights_reverse_kl,
)
from .trainer import TrainConfig, TrainResult, VariantFlags, ablation_variant, train

__version__ = "0.1.0"
