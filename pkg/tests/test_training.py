import math

import numpy as np
import pytest
import torch

from roadseg.augmentation import identity_policy
from roadseg.dataset import distribution_from_fractions
from roadseg.errors import ConfigError, DivergenceError, ShapeError
from roadseg.model import ModelConfig, build_model
from roadseg.synthetic import default_road_profile, generate_corpus
from roadseg.training import (
    PRESET_NAMES,
    LearningRatePolicy,
    StageSpec,
    TrainingConfiguration,
    WeightVector,
    compute_class_weights,
    configuration_from_dict,
    configuration_to_dict,
    preset_configuration,
    run_configuration,
    train_stage,
    weighted_cross_entropy,
)

RTK_FRACTIONS = default_road_profile().fractions


# ---- class weights ----


def test_uniform_weights_all_ones():
    weights = compute_class_weights(distribution_from_fractions([0.25] * 4), "uniform")
    np.testing.assert_array_equal(weights.weights, np.ones(4))


def test_inverse_frequency_hand_case():
    weights = compute_class_weights(distribution_from_fractions([0.5, 0.25, 0.25]), "inverse-frequency")
    np.testing.assert_allclose(weights.weights, [0.6, 1.2, 1.2])
    assert abs(weights.weights.mean() - 1.0) < 1e-12


def test_median_frequency_hand_case():
    weights = compute_class_weights(distribution_from_fractions([0.5, 0.25, 0.25]), "median-frequency")
    np.testing.assert_allclose(weights.weights, [0.5, 1.0, 1.0])


def test_inverse_frequency_reverses_rtk_ranking():
    weights = compute_class_weights(distribution_from_fractions(RTK_FRACTIONS), "inverse-frequency").weights
    fractions = RTK_FRACTIONS
    for a in range(12):
        for b in range(12):
            if fractions[a] > fractions[b]:
                assert weights[a] < weights[b]
            elif fractions[a] == fractions[b]:
                assert weights[a] == weights[b]
    assert weights.argmin() == 0  # Background gets the smallest weight
    # the tied smallest classes (Cats-Eye, Storm-Drain) share the largest weight
    top = set(np.flatnonzero(weights == weights.max()))
    assert top == {6, 7}


def test_zero_fraction_gets_max_observed_weight():
    weights = compute_class_weights(distribution_from_fractions([0.8, 0.2, 0.0]), "inverse-frequency").weights
    raw = np.array([1 / 0.8, 1 / 0.2, 1 / 0.2])
    np.testing.assert_allclose(weights, raw / raw.mean())
    mf = compute_class_weights(distribution_from_fractions([0.8, 0.2, 0.0]), "median-frequency").weights
    assert mf[2] == mf.max() and np.isfinite(mf).all()


def test_unknown_scheme_rejected():
    with pytest.raises(ConfigError):
        compute_class_weights(distribution_from_fractions([1.0]), "sqrt")


# ---- weighted cross-entropy ----


def _reference_cross_entropy(logits, targets):
    """Independent numpy mean cross-entropy."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    nll = -np.take_along_axis(log_probs, targets[..., None], axis=-1)[..., 0]
    return nll.mean()


@pytest.mark.parametrize("seed", range(5))
def test_uniform_weights_equal_unweighted_cross_entropy(seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(2, 6, 6, 12))
    targets = rng.integers(0, 12, size=(2, 6, 6))
    loss = float(weighted_cross_entropy(logits, targets, np.full(12, 3.7)))
    ref = _reference_cross_entropy(logits, targets)
    assert abs(loss - ref) / abs(ref) < 1e-6


def test_frozen_hand_computed_value():
    # 2 pixels, C=2, logits [[2,0],[0,2]], targets [0,1], weights (1,3)
    logits = np.array([[[[2.0, 0.0], [0.0, 2.0]]]])  # (1,1,2,2)
    targets = np.array([[[0, 1]]])
    loss = float(weighted_cross_entropy(logits, targets, np.array([1.0, 3.0])))
    expected = (1 * math.log1p(math.exp(-2)) + 3 * math.log1p(math.exp(-2))) / 4
    assert abs(loss - expected) < 1e-12
    assert abs(loss - 0.1269280110429725) < 1e-12


def test_confident_correct_prediction_loss_tends_to_zero():
    logits = np.zeros((1, 2, 2, 3))
    targets = np.array([[[0, 1], [2, 0]]])
    for i in range(2):
        for j in range(2):
            logits[0, i, j, targets[0, i, j]] = 200.0
    assert float(weighted_cross_entropy(logits, targets, np.ones(3))) < 1e-8


@pytest.mark.parametrize("k", (0.1, 3.0, 1e4))
def test_weight_scaling_invariance(k):
    rng = np.random.default_rng(10)
    logits = rng.normal(size=(2, 5, 5, 7))
    targets = rng.integers(0, 7, size=(2, 5, 5))
    weights = rng.uniform(0.1, 5.0, size=7)
    base = float(weighted_cross_entropy(logits, targets, weights))
    scaled = float(weighted_cross_entropy(logits, targets, k * weights))
    assert abs(base - scaled) / abs(base) < 1e-6


def test_loss_shape_mismatch():
    with pytest.raises(ShapeError):
        weighted_cross_entropy(np.zeros((2, 4, 4, 3)), np.zeros((2, 4, 5), dtype=int), np.ones(3))
    with pytest.raises(ShapeError):
        weighted_cross_entropy(np.zeros((2, 4, 4, 3)), np.zeros((2, 4, 4), dtype=int), np.ones(5))


def test_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(11)
    logits = torch.tensor(rng.normal(size=(2, 4, 4, 5)), dtype=torch.float64, requires_grad=True)
    targets = torch.tensor(rng.integers(0, 5, size=(2, 4, 4)))
    weights = rng.uniform(0.2, 4.0, size=5)
    loss = weighted_cross_entropy(logits, targets, weights)
    (analytic,) = torch.autograd.grad(loss, logits)
    analytic = analytic.numpy()

    h = 1e-6
    fd = np.zeros_like(analytic)
    base = logits.detach().numpy()
    for idx in np.ndindex(base.shape):
        plus, minus = base.copy(), base.copy()
        plus[idx] += h
        minus[idx] -= h
        fd[idx] = (
            float(weighted_cross_entropy(torch.tensor(plus), targets, weights))
            - float(weighted_cross_entropy(torch.tensor(minus), targets, weights))
        ) / (2 * h)
    assert np.linalg.norm(analytic - fd) / np.linalg.norm(fd) < 1e-3


def test_model_gradient_matches_finite_differences():
    """Training-loss gradients on a Tiny model vs central differences for a
    sampled 10-parameter subset."""
    torch.manual_seed(21)
    model = build_model(ModelConfig(encoder_variant="Tiny")).double()
    with torch.no_grad():
        model.head.weight.normal_(0, 0.3)
        model.head.bias.normal_(0, 0.3)
    model.train()
    rng = np.random.default_rng(21)
    images = torch.tensor(rng.normal(size=(2, 3, 16, 16)))
    targets = torch.tensor(rng.integers(0, 12, size=(2, 16, 16)))
    weights = rng.uniform(0.5, 2.0, size=12)

    def loss_fn():
        return weighted_cross_entropy(model(images).permute(0, 2, 3, 1), targets, weights)

    loss = loss_fn()
    params = [p for p in model.parameters() if p.requires_grad]
    grads = torch.autograd.grad(loss, params)
    flat_sizes = [p.numel() for p in params]
    total = sum(flat_sizes)
    picks = rng.choice(total, size=10, replace=False)
    h = 1e-6
    for flat_index in picks:
        p_idx = 0
        offset = int(flat_index)
        while offset >= flat_sizes[p_idx]:
            offset -= flat_sizes[p_idx]
            p_idx += 1
        param = params[p_idx]
        with torch.no_grad():
            original = param.view(-1)[offset].item()
            param.view(-1)[offset] = original + h
            up = float(loss_fn())
            param.view(-1)[offset] = original - h
            down = float(loss_fn())
            param.view(-1)[offset] = original
        fd = (up - down) / (2 * h)
        analytic = grads[p_idx].view(-1)[offset].item()
        scale = max(abs(fd), abs(analytic), 1e-4)
        assert abs(analytic - fd) / scale < 1e-3, (p_idx, offset, analytic, fd)


# ---- learning-rate policy ----


def test_one_cycle_shape():
    policy = LearningRatePolicy(kind="one-cycle", lr_max=0.1, start_div=10, final_div=100, pct_start=0.25)
    total = 100
    lrs = [policy.lr_at(s, total) for s in range(total)]
    assert abs(lrs[0] - 0.01) < 1e-12
    peak = int(0.25 * total)
    assert abs(lrs[peak] - 0.1) < 1e-12
    assert all(b >= a - 1e-12 for a, b in zip(lrs[: peak + 1], lrs[1 : peak + 1]))  # rising
    assert all(b <= a + 1e-12 for a, b in zip(lrs[peak:], lrs[peak + 1 :]))  # falling
    assert lrs[-1] > 0.1 / 100


def test_constant_policy():
    policy = LearningRatePolicy(kind="constant", lr_max=0.05)
    assert policy.lr_at(0, 10) == policy.lr_at(9, 10) == 0.05


def test_lr_policy_validation():
    with pytest.raises(ConfigError):
        LearningRatePolicy(kind="cyclic")
    with pytest.raises(ConfigError):
        LearningRatePolicy(lr_max=0)


# ---- configuration / presets ----


def test_stage_spec_validation():
    with pytest.raises(ConfigError):
        StageSpec(epochs=0)
    with pytest.raises(ConfigError):
        StageSpec(resize_divisor=3)
    with pytest.raises(ConfigError):
        StageSpec(init_from="scratch")
    with pytest.raises(ConfigError):
        StageSpec(batch_size=0)


def test_configuration_needs_stages():
    with pytest.raises(ConfigError):
        TrainingConfiguration(name="x", stages=())


def test_preset_dw_expansion():
    config = preset_configuration("r34-DW")
    assert config.encoder_variant == "R34-like"
    assert len(config.stages) == 2
    assert [s.weighted for s in config.stages] == [False, True]
    assert [s.resize_divisor for s in config.stages] == [1, 1]
    assert [s.init_from for s in config.stages] == ["fresh", "previous"]
    assert all(s.epochs == 25 for s in config.stages)


def test_preset_iw_expansion():
    config = preset_configuration("r50-IW")
    assert config.encoder_variant == "R50-like"
    assert len(config.stages) == 3
    assert [s.resize_divisor for s in config.stages] == [4, 2, 1]
    assert all(s.weighted for s in config.stages)


def test_preset_final_mode_switches_dw_to_100_epochs():
    config = preset_configuration("r34-DW", final=True)
    assert [s.epochs for s in config.stages] == [100, 100]
    untouched = preset_configuration("r34-S", final=True)
    assert [s.epochs for s in untouched.stages] == [25]


def test_unknown_preset():
    with pytest.raises(ConfigError):
        preset_configuration("r18-S")


def test_all_presets_expand():
    assert len(PRESET_NAMES) == 10
    for name in PRESET_NAMES:
        config = preset_configuration(name)
        assert config.name == name


def test_configuration_dict_round_trip():
    config = preset_configuration("r34-DW", encoder_variant="Tiny")
    data = configuration_to_dict(config)
    again = configuration_from_dict(data)
    assert again == TrainingConfiguration(
        name=config.name,
        encoder_variant="Tiny",
        stages=config.stages,
        weight_scheme=config.weight_scheme,
        augmentation=config.augmentation,
        validation_fraction=config.validation_fraction,
        num_classes=config.num_classes,
    )


def test_configuration_from_dict_requires_preset_or_stages():
    with pytest.raises(ConfigError):
        configuration_from_dict({"name": "x"})


def test_final_flag_through_run_config():
    config = configuration_from_dict({"preset": "r34-DW"}, final=True)
    assert [s.epochs for s in config.stages] == [100, 100]
    config = configuration_from_dict({"preset": "r34-DW", "epochs": 3}, final=True)
    assert [s.epochs for s in config.stages] == [3, 3]  # explicit epochs win


# ---- staged training ----


@pytest.fixture(scope="module")
def small_corpus(schema):
    return generate_corpus(10, default_road_profile(schema), seed=3, width=48, height=48)


def _quick_stage(epochs=1, weighted=False, lr=0.02, kind="one-cycle"):
    return StageSpec(
        resize_divisor=1,
        weighted=weighted,
        epochs=epochs,
        batch_size=8,
        learning_rate=LearningRatePolicy(kind=kind, lr_max=lr),
        init_from="fresh",
    )


def test_train_stage_bookkeeping(schema, small_corpus):
    torch.manual_seed(1)
    model = build_model(ModelConfig(encoder_variant="Tiny"))
    checkpoint, history = train_stage(
        model, small_corpus[:4], small_corpus[4:6], _quick_stage(epochs=1), identity_policy(), seed=0,
        schema=schema,
    )
    assert len(history.records) == 1
    record = history.records[0]
    assert record.epoch == 1 and math.isfinite(record.train_loss)
    assert checkpoint.training_meta["epochs_completed"] == 1
    assert math.isfinite(checkpoint.training_meta["final_val_accuracy"])


def test_train_stage_loss_decreases(schema, small_corpus):
    torch.manual_seed(2)
    model = build_model(ModelConfig(encoder_variant="Tiny"))
    _, history = train_stage(
        model, small_corpus, [], _quick_stage(epochs=30, lr=0.05), identity_policy(), seed=1,
        schema=schema,
    )
    assert history.records[-1].train_loss < history.records[0].train_loss


def test_train_stage_divergence_raises(schema, small_corpus):
    torch.manual_seed(3)
    model = build_model(ModelConfig(encoder_variant="Tiny"))
    with pytest.raises(DivergenceError, match="epoch"):
        train_stage(
            model, small_corpus[:8], [], _quick_stage(epochs=4, lr=1e18, kind="constant"),
            identity_policy(), seed=2, schema=schema,
        )


def _desk_dw_config(epochs=2):
    policy = LearningRatePolicy(kind="one-cycle", lr_max=0.03)
    return TrainingConfiguration(
        name="desk-DW",
        encoder_variant="Tiny",
        stages=(
            StageSpec(1, False, epochs, 8, policy, "fresh"),
            StageSpec(1, True, epochs, 8, policy, "previous"),
        ),
        augmentation=identity_policy(),
        validation_fraction=0.2,
    )


def test_run_configuration_dw_handoff(schema, small_corpus):
    result = run_configuration(_desk_dw_config(), small_corpus, seed=5, schema=schema)
    assert len(result.stage_checkpoints) == 2
    stage1, stage2 = (c.training_meta for c in result.stage_checkpoints)
    # the second stage starts from the first stage's parameters
    assert stage2["initial_val_accuracy"] == stage1["final_val_accuracy"]
    assert len(result.history.records) == 4
    assert result.report.matrix.total > 0


def test_run_configuration_deterministic(schema, small_corpus):
    a = run_configuration(_desk_dw_config(), small_corpus, seed=9, schema=schema)
    b = run_configuration(_desk_dw_config(), small_corpus, seed=9, schema=schema)
    la = [r.train_loss for r in a.history.records]
    lb = [r.train_loss for r in b.history.records]
    np.testing.assert_allclose(la, lb, rtol=1e-4)
    assert a.split == b.split


def test_run_configuration_history_csv(tmp_path, schema, small_corpus):
    result = run_configuration(_desk_dw_config(), small_corpus, seed=5, schema=schema)
    path = tmp_path / "history.csv"
    result.history.to_csv(path, schema)
    lines = path.read_text(encoding="utf-8").strip().splitlines()
    assert len(lines) == 1 + len(result.history.records)
    assert lines[0].startswith("stage,stage_index,epoch,train_loss,val_loss,val_accuracy,acc_Background")


def test_weight_vector_requires_positive_finite():
    with pytest.raises(ConfigError):
        WeightVector(np.array([1.0, 0.0]), "uniform")
    with pytest.raises(ConfigError):
        WeightVector(np.array([1.0, np.inf]), "uniform")
