"""Class-weight schemes, weighted cross-entropy, staged training, and the
named configuration registry.

The two-stage "DW" recipe trains one model without class weights, then uses
its parameters as the starting point for a second, weighted model. "I"/"IW"
recipes train three models with progressive resizing (images divided by 4,
then 2, then full size). Class weights make every class contribute a similar
share of the loss despite the heavy pixel imbalance.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .augmentation import AugmentationPolicy, apply_policy
from .dataset import (
    ClassDistribution,
    CorpusSplit,
    SegmentationSample,
    compute_class_distribution,
    split_corpus,
)
from .errors import ConfigError, DivergenceError, ShapeError
from .evaluation import ConfusionMatrix, MetricsReport, accumulate_confusion, derive_metrics
from .model import (
    Checkpoint,
    ModelConfig,
    SegmentationNet,
    build_model,
    checkpoint_from_model,
    normalize_images,
    transfer_parameters,
)
from .schema import LabelSchema, default_schema

WEIGHT_SCHEMES = ("uniform", "inverse-frequency", "median-frequency")


@dataclass(frozen=True)
class WeightVector:
    weights: np.ndarray  # (C,) positive finite
    scheme: str

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=np.float64)
        object.__setattr__(self, "weights", w)
        if (w <= 0).any() or not np.isfinite(w).all():
            raise ConfigError("class weights must be positive and finite")


def compute_class_weights(dist: ClassDistribution | np.ndarray, scheme: str) -> WeightVector:
    """Map a class distribution to loss weights.

    uniform: all ones. inverse-frequency: proportional to 1/fraction,
    rescaled to mean 1. median-frequency: median(fractions)/fraction, the
    median taken over observed classes so it stays positive on partial
    corpora. Classes with zero pixels get the largest weight among observed
    classes.
    """
    fractions = dist.fractions if isinstance(dist, ClassDistribution) else np.asarray(dist, dtype=np.float64)
    if scheme not in WEIGHT_SCHEMES:
        raise ConfigError(f"unknown weight scheme {scheme!r}; choose from {WEIGHT_SCHEMES}")
    if scheme == "uniform":
        return WeightVector(np.ones_like(fractions), scheme)
    observed = fractions > 0
    if not observed.any():
        raise ConfigError("cannot weight a distribution with no observed pixels")
    raw = np.zeros_like(fractions)
    if scheme == "inverse-frequency":
        raw[observed] = 1.0 / fractions[observed]
        raw[~observed] = raw[observed].max()
        raw = raw / raw.mean()
    else:  # median-frequency
        med = float(np.median(fractions[observed]))
        raw[observed] = med / fractions[observed]
        raw[~observed] = raw[observed].max()
    return WeightVector(raw, scheme)


def weighted_cross_entropy(logits, targets, weights) -> torch.Tensor:
    """Weight-normalized pixel cross-entropy.

    logits: (..., C) channels-last; targets: integer ids of matching leading
    shape; weights: WeightVector or length-C vector. Returns
    sum_p w[t_p] * nll_p / sum_p w[t_p]; with uniform weights this is exactly
    the mean cross-entropy, and rescaling all weights leaves it unchanged.
    """
    if isinstance(weights, WeightVector):
        weights = weights.weights
    logits = torch.as_tensor(logits)
    targets = torch.as_tensor(targets, dtype=torch.long)
    weight_t = torch.as_tensor(np.asarray(weights), dtype=logits.dtype)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"logits {tuple(logits.shape)} do not match targets {tuple(targets.shape)}")
    if weight_t.ndim != 1 or weight_t.shape[0] != logits.shape[-1]:
        raise ShapeError(f"need {logits.shape[-1]} class weights, got {tuple(weight_t.shape)}")
    log_probs = torch.log_softmax(logits, dim=-1)
    nll = -log_probs.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    w = weight_t[targets]
    return (w * nll).sum() / w.sum()


@dataclass(frozen=True)
class LearningRatePolicy:
    """One-cycle (cosine warmup then cosine decay) or constant learning rate."""

    kind: str = "one-cycle"
    lr_max: float = 1e-3
    momentum: float = 0.9
    start_div: float = 25.0
    final_div: float = 1e4
    pct_start: float = 0.25

    def __post_init__(self) -> None:
        if self.kind not in ("one-cycle", "constant"):
            raise ConfigError(f"unknown learning rate policy {self.kind!r}")
        if self.lr_max <= 0:
            raise ConfigError("lr_max must be positive")

    def lr_at(self, step: int, total_steps: int) -> float:
        if self.kind == "constant":
            return self.lr_max
        warmup = max(int(round(self.pct_start * total_steps)), 1)
        lo_start = self.lr_max / self.start_div
        lo_final = self.lr_max / self.final_div
        if step < warmup:
            t = step / warmup
            return lo_start + (self.lr_max - lo_start) * (1 - math.cos(math.pi * t)) / 2
        t = (step - warmup) / max(total_steps - warmup, 1)
        return lo_final + (self.lr_max - lo_final) * (1 + math.cos(math.pi * t)) / 2


@dataclass(frozen=True)
class StageSpec:
    resize_divisor: int = 1
    weighted: bool = False
    epochs: int = 25
    batch_size: int = 8
    learning_rate: LearningRatePolicy = field(default_factory=LearningRatePolicy)
    init_from: str = "previous"  # "previous" | "fresh"

    def __post_init__(self) -> None:
        if self.resize_divisor not in (1, 2, 4):
            raise ConfigError(f"resize_divisor must be 1, 2, or 4, got {self.resize_divisor}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.init_from not in ("previous", "fresh"):
            raise ConfigError(f"init_from must be 'previous' or 'fresh', got {self.init_from!r}")


@dataclass(frozen=True)
class TrainingConfiguration:
    name: str
    encoder_variant: str = "Tiny"
    stages: tuple[StageSpec, ...] = ()
    weight_scheme: str = "inverse-frequency"
    augmentation: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    validation_fraction: float = 0.2
    num_classes: int = 12

    def __post_init__(self) -> None:
        if not self.stages:
            raise ConfigError("a training configuration needs at least one stage")
        if self.weight_scheme not in WEIGHT_SCHEMES:
            raise ConfigError(f"unknown weight scheme {self.weight_scheme!r}")

    def model_config(self) -> ModelConfig:
        return ModelConfig(encoder_variant=self.encoder_variant, num_classes=self.num_classes)


_PRESET_ENCODERS = {"r34": "R34-like", "r50": "R50-like"}
# recipe kind -> list of (resize_divisor, weighted, init_from)
_PRESET_STAGES = {
    "S": [(1, False, "fresh")],
    "SW": [(1, True, "fresh")],
    "I": [(4, False, "fresh"), (2, False, "previous"), (1, False, "previous")],
    "IW": [(4, True, "fresh"), (2, True, "previous"), (1, True, "previous")],
    "DW": [(1, False, "fresh"), (1, True, "previous")],
}
PRESET_NAMES = tuple(f"{enc}-{kind}" for enc in _PRESET_ENCODERS for kind in _PRESET_STAGES)

DEFAULT_EPOCHS = 25  # comparison mode
FINAL_DW_EPOCHS = 100  # per stage, final mode


def preset_configuration(
    name: str,
    final: bool = False,
    epochs: int | None = None,
    encoder_variant: str | None = None,
    **overrides,
) -> TrainingConfiguration:
    """Expand a named recipe (r34-S ... r50-DW) into its stage list.

    `final` switches DW recipes to 100 epochs per stage. `epochs` and
    `encoder_variant` override the defaults, e.g. for desk-scale runs.
    """
    if name not in PRESET_NAMES:
        raise ConfigError(f"unknown preset {name!r}; choose from {PRESET_NAMES}")
    enc_key, kind = name.split("-", 1)
    stage_epochs = epochs if epochs is not None else DEFAULT_EPOCHS
    if final and kind == "DW" and epochs is None:
        stage_epochs = FINAL_DW_EPOCHS
    stages = tuple(
        StageSpec(resize_divisor=div, weighted=wt, epochs=stage_epochs, init_from=init)
        for div, wt, init in _PRESET_STAGES[kind]
    )
    return TrainingConfiguration(
        name=name,
        encoder_variant=encoder_variant or _PRESET_ENCODERS[enc_key],
        stages=stages,
        **overrides,
    )


def configuration_to_dict(config: TrainingConfiguration) -> dict:
    return {
        "name": config.name,
        "encoder_variant": config.encoder_variant,
        "weight_scheme": config.weight_scheme,
        "validation_fraction": config.validation_fraction,
        "num_classes": config.num_classes,
        "augmentation": {
            "flip_probability": config.augmentation.flip_probability,
            "warp_magnitude": config.augmentation.warp_magnitude,
            "seed": config.augmentation.seed,
        },
        "stages": [
            {
                "resize_divisor": s.resize_divisor,
                "weighted": s.weighted,
                "epochs": s.epochs,
                "batch_size": s.batch_size,
                "init_from": s.init_from,
                "learning_rate": {
                    "kind": s.learning_rate.kind,
                    "lr_max": s.learning_rate.lr_max,
                    "momentum": s.learning_rate.momentum,
                    "start_div": s.learning_rate.start_div,
                    "final_div": s.learning_rate.final_div,
                    "pct_start": s.learning_rate.pct_start,
                },
            }
            for s in config.stages
        ],
    }


def configuration_from_dict(data: dict, final: bool = False) -> TrainingConfiguration:
    """Build a configuration from a run-config dict: either {"preset": name}
    plus optional overrides, or an explicit stage list."""
    common = {}
    if "weight_scheme" in data:
        common["weight_scheme"] = data["weight_scheme"]
    if "validation_fraction" in data:
        common["validation_fraction"] = float(data["validation_fraction"])
    if "num_classes" in data:
        common["num_classes"] = int(data["num_classes"])
    if "augmentation" in data:
        common["augmentation"] = AugmentationPolicy(**data["augmentation"])
    if "preset" in data:
        return preset_configuration(
            data["preset"],
            final=final,
            epochs=data.get("epochs"),
            encoder_variant=data.get("encoder_variant"),
            **common,
        )
    try:
        stages = tuple(
            StageSpec(
                resize_divisor=int(s.get("resize_divisor", 1)),
                weighted=bool(s.get("weighted", False)),
                epochs=int(s.get("epochs", DEFAULT_EPOCHS)),
                batch_size=int(s.get("batch_size", 8)),
                learning_rate=LearningRatePolicy(**s.get("learning_rate", {})),
                init_from=s.get("init_from", "previous"),
            )
            for s in data["stages"]
        )
    except KeyError as exc:
        raise ConfigError(f"run config needs either 'preset' or 'stages': missing {exc}") from exc
    return TrainingConfiguration(
        name=data.get("name", "custom"),
        encoder_variant=data.get("encoder_variant", "Tiny"),
        stages=stages,
        **common,
    )


def load_run_config(path: str | Path, final: bool = False) -> TrainingConfiguration:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"run config {path} is not valid JSON: {exc}") from exc
    return configuration_from_dict(data, final=final)


@dataclass(frozen=True)
class EpochRecord:
    stage: str
    stage_index: int
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float
    per_class_accuracy: np.ndarray


@dataclass
class TrainingHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def extend(self, other: "TrainingHistory") -> None:
        self.records.extend(other.records)

    def to_csv(self, path: str | Path, schema: LabelSchema) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["stage", "stage_index", "epoch", "train_loss", "val_loss", "val_accuracy"]
                + [f"acc_{name}" for name in schema.names]
            )
            for r in self.records:
                per_class = [
                    "" if math.isnan(a) else f"{a:.6f}" for a in r.per_class_accuracy
                ]
                writer.writerow(
                    [r.stage, r.stage_index, r.epoch, f"{r.train_loss:.6f}", f"{r.val_loss:.6f}", f"{r.val_accuracy:.6f}"]
                    + per_class
                )


def resize_sample(sample: SegmentationSample, divisor: int) -> SegmentationSample:
    """Downscale by an integer divisor: bilinear image, nearest-neighbor mask."""
    if divisor == 1:
        return sample
    h, w = sample.mask.shape
    size = (max(w // divisor, 1), max(h // divisor, 1))
    image = np.asarray(Image.fromarray(sample.image).resize(size, Image.BILINEAR))
    mask = np.asarray(Image.fromarray(sample.mask).resize(size, Image.NEAREST))
    return SegmentationSample(image=image, mask=mask, source_id=sample.source_id)


def compute_normalization(samples: list[SegmentationSample]) -> dict:
    """Per-channel mean/std of unit-scaled pixels over the corpus."""
    acc = np.zeros(3)
    acc_sq = np.zeros(3)
    n = 0
    for s in samples:
        x = s.image.reshape(-1, 3).astype(np.float64) / 255.0
        acc += x.sum(axis=0)
        acc_sq += (x**2).sum(axis=0)
        n += x.shape[0]
    mean = acc / n
    std = np.sqrt(np.maximum(acc_sq / n - mean**2, 1e-8))
    return {"mean": mean.tolist(), "std": std.tolist()}


def evaluate_model(
    model: SegmentationNet,
    samples: list[SegmentationSample],
    weights: WeightVector,
    normalization: dict | None,
    batch_size: int = 8,
) -> tuple[float, ConfusionMatrix]:
    """Deterministic eval-mode loss and confusion matrix over the samples."""
    num_classes = model.config.num_classes
    model.eval()
    losses = []
    matrix = ConfusionMatrix(np.zeros((num_classes, num_classes), dtype=np.int64))
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start : start + batch_size]
            images = np.stack([s.image for s in chunk])
            masks = np.stack([s.mask for s in chunk])
            logits = model(normalize_images(images, normalization)).permute(0, 2, 3, 1)
            losses.append(float(weighted_cross_entropy(logits, masks.astype(np.int64), weights)))
            preds = logits.argmax(dim=-1).numpy().astype(np.uint8)
            matrix = matrix.merge(accumulate_confusion(list(preds), list(masks), num_classes))
    return float(np.mean(losses)), matrix


def _augmentation_seed(policy_seed: int, run_seed: int, stage_index: int, epoch: int, index: int) -> int:
    entropy = (policy_seed & (2**63 - 1), run_seed & (2**63 - 1), stage_index, epoch, index)
    return int(np.random.SeedSequence(entropy=entropy).generate_state(1)[0])


def train_stage(
    model: SegmentationNet,
    train_set: list[SegmentationSample],
    val_set: list[SegmentationSample],
    stage: StageSpec,
    policy: AugmentationPolicy,
    seed: int,
    *,
    weight_scheme: str = "inverse-frequency",
    stage_name: str = "stage",
    stage_index: int = 0,
    normalization: dict | None = None,
    schema: LabelSchema | None = None,
) -> tuple[Checkpoint, TrainingHistory]:
    """Run one training stage; returns the checkpoint and per-epoch history.

    The resize divisor is applied to the train and validation sets; class
    weights (when the stage is weighted) come from the resized training
    masks. Validation samples are never augmented.
    """
    schema = schema or default_schema()
    if not train_set:
        raise ConfigError("train set is empty")
    train_rs = [resize_sample(s, stage.resize_divisor) for s in train_set]
    val_rs = [resize_sample(s, stage.resize_divisor) for s in val_set]
    num_classes = model.config.num_classes
    if stage.weighted:
        dist = compute_class_distribution(train_rs, schema)
        weights = compute_class_weights(dist, weight_scheme)
    else:
        weights = WeightVector(np.ones(num_classes), "uniform")

    initial_val_loss, initial_matrix = (math.nan, None)
    if val_rs:
        initial_val_loss, initial_matrix = evaluate_model(
            model, val_rs, weights, normalization, stage.batch_size
        )

    rng = np.random.default_rng(seed)
    optimizer = torch.optim.SGD(
        model.parameters(), lr=stage.learning_rate.lr_max, momentum=stage.learning_rate.momentum
    )
    steps_per_epoch = max((len(train_rs) + stage.batch_size - 1) // stage.batch_size, 1)
    total_steps = stage.epochs * steps_per_epoch
    history = TrainingHistory()
    step = 0
    for epoch in range(1, stage.epochs + 1):
        model.train()
        order = rng.permutation(len(train_rs))
        epoch_losses = []
        for start in range(0, len(order), stage.batch_size):
            batch_idx = order[start : start + stage.batch_size]
            batch = [
                apply_policy(
                    train_rs[i],
                    policy,
                    _augmentation_seed(policy.seed, seed, stage_index, epoch, int(i)),
                )
                for i in batch_idx
            ]
            images = np.stack([s.image for s in batch])
            masks = np.stack([s.mask for s in batch]).astype(np.int64)
            lr = stage.learning_rate.lr_at(step, total_steps)
            for group in optimizer.param_groups:
                group["lr"] = lr
            optimizer.zero_grad()
            logits = model(normalize_images(images, normalization)).permute(0, 2, 3, 1)
            loss = weighted_cross_entropy(logits, masks, weights)
            loss.backward()
            optimizer.step()
            epoch_losses.append(float(loss.detach()))
            step += 1
        train_loss = float(np.mean(epoch_losses))
        if not math.isfinite(train_loss):
            raise DivergenceError(f"non-finite training loss in stage {stage_name!r} at epoch {epoch}")
        if val_rs:
            val_loss, matrix = evaluate_model(model, val_rs, weights, normalization, stage.batch_size)
            val_metrics = derive_metrics(matrix)
            val_accuracy = val_metrics.total_accuracy
            per_class = val_metrics.per_class_accuracy
        else:
            val_loss, val_accuracy = math.nan, math.nan
            per_class = np.full(num_classes, np.nan)
        history.records.append(
            EpochRecord(
                stage=stage_name,
                stage_index=stage_index,
                epoch=epoch,
                train_loss=train_loss,
                val_loss=val_loss,
                val_accuracy=val_accuracy,
                per_class_accuracy=per_class,
            )
        )
    meta = {
        "stage": stage_name,
        "stage_index": stage_index,
        "epochs_completed": stage.epochs,
        "final_train_loss": history.records[-1].train_loss,
        "final_val_loss": history.records[-1].val_loss,
        "final_val_accuracy": history.records[-1].val_accuracy,
        "initial_val_loss": initial_val_loss,
        "initial_val_accuracy": (
            derive_metrics(initial_matrix).total_accuracy if initial_matrix is not None else math.nan
        ),
        "weighted": stage.weighted,
        "weight_scheme": weights.scheme,
        "class_weights": weights.weights.tolist(),
        "resize_divisor": stage.resize_divisor,
    }
    return checkpoint_from_model(model, training_meta=meta, normalization=normalization), history


@dataclass
class RunResult:
    checkpoint: Checkpoint
    stage_checkpoints: list[Checkpoint]
    history: TrainingHistory
    report: MetricsReport
    split: CorpusSplit


def run_configuration(
    config: TrainingConfiguration,
    corpus: list[SegmentationSample],
    seed: int,
    schema: LabelSchema | None = None,
) -> RunResult:
    """Execute the configuration's stages in order and evaluate the result.

    Stages with init_from="previous" start from the previous stage's
    parameters via transfer_parameters; the final metrics are computed on the
    validation split at full resolution.
    """
    schema = schema or default_schema()
    split = split_corpus(corpus, config.validation_fraction, seed)
    train_set = [corpus[i] for i in split.train]
    val_set = [corpus[i] for i in split.validation]
    normalization = compute_normalization(train_set)
    model_config = config.model_config()

    model: SegmentationNet | None = None
    previous: Checkpoint | None = None
    history = TrainingHistory()
    stage_checkpoints: list[Checkpoint] = []
    for index, stage in enumerate(config.stages):
        torch.manual_seed((seed + 7919 * index) & (2**31 - 1))
        model = build_model(model_config)
        if stage.init_from == "previous" and previous is not None:
            transfer_parameters(previous, model)
        stage_name = f"{config.name}/stage{index + 1}"
        checkpoint, stage_history = train_stage(
            model,
            train_set,
            val_set,
            stage,
            config.augmentation,
            seed=seed + index,
            weight_scheme=config.weight_scheme,
            stage_name=stage_name,
            stage_index=index,
            normalization=normalization,
            schema=schema,
        )
        history.extend(stage_history)
        stage_checkpoints.append(checkpoint)
        previous = checkpoint

    uniform = WeightVector(np.ones(model_config.num_classes), "uniform")
    _, matrix = evaluate_model(model, val_set, uniform, normalization)
    report = derive_metrics(matrix, config_name=config.name)
    return RunResult(
        checkpoint=previous,
        stage_checkpoints=stage_checkpoints,
        history=history,
        report=report,
        split=split,
    )
