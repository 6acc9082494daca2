"""roadseg: road-surface semantic segmentation toolkit.

Twelve-class pixel labeling of road scenes with a residual encoder-decoder
network, class-imbalance weighting, staged training recipes, per-class
accuracy evaluation, and a synthetic scene generator for desk-scale testing.
"""

from .augmentation import (
    AppliedTransform,
    AugmentationPolicy,
    apply_policy,
    apply_transform,
    draw_policy_transform,
    horizontal_flip,
    identity_policy,
    perspective_warp,
)
from .dataset import (
    ClassDistribution,
    CorpusSplit,
    SegmentationSample,
    ValidationReport,
    compute_class_distribution,
    load_manifest_corpus,
    load_sample,
    read_manifest,
    save_sample,
    split_corpus,
    validate_corpus,
    write_manifest,
)
from .errors import (
    CheckpointError,
    ConfigError,
    DivergenceError,
    EmptyCorpusError,
    EmptyEvaluationError,
    FormatError,
    GenerationError,
    MaskShapeError,
    RoadSegError,
    ShapeError,
    UnknownClassError,
)
from .evaluation import (
    ConfusionMatrix,
    MetricsReport,
    accumulate_confusion,
    derive_metrics,
    render_report,
    row_normalize,
)
from .model import (
    Checkpoint,
    ModelConfig,
    SegmentationNet,
    build_model,
    count_parameters,
    load_checkpoint,
    predict_logits,
    predict_mask,
    save_checkpoint,
    transfer_parameters,
)
from .schema import ClassDef, LabelSchema, colorize_mask, default_schema
from .synthetic import SceneRecipe, default_road_profile, generate_corpus, generate_scene
from .training import (
    PRESET_NAMES,
    LearningRatePolicy,
    StageSpec,
    TrainingConfiguration,
    TrainingHistory,
    WeightVector,
    compute_class_weights,
    preset_configuration,
    run_configuration,
    train_stage,
    weighted_cross_entropy,
)

__version__ = "0.1.0"
