import json
import math

import numpy as np
import pytest
from PIL import Image

from roadseg.errors import ConfigError, EmptyEvaluationError, ShapeError
from roadseg.evaluation import (
    ConfusionMatrix,
    accumulate_confusion,
    derive_metrics,
    read_report_json,
    render_matrix_cells,
    render_report,
    report_from_dict,
    report_to_dict,
    row_normalize,
    write_report_csv,
    write_report_json,
)


def _brute_force_confusion(pred, true, num_classes):
    counts = [[0] * num_classes for _ in range(num_classes)]
    for p, t in zip(pred.ravel().tolist(), true.ravel().tolist()):
        counts[t][p] += 1
    return np.array(counts, dtype=np.int64)


def test_perfect_prediction_is_diagonal():
    rng = np.random.default_rng(0)
    mask = rng.integers(0, 5, size=(9, 9))
    matrix = accumulate_confusion(mask, mask, 5)
    assert matrix.total == 81
    np.testing.assert_array_equal(np.diag(matrix.counts), np.bincount(mask.ravel(), minlength=5))
    assert (matrix.counts - np.diag(np.diag(matrix.counts)) == 0).all()


def test_hand_counted_two_by_two():
    true = np.array([[0, 0], [1, 1]])
    pred = np.array([[0, 1], [1, 1]])
    matrix = accumulate_confusion(pred, true, 2)
    assert matrix.counts[0, 0] == 1
    assert matrix.counts[0, 1] == 1
    assert matrix.counts[1, 1] == 2
    assert matrix.counts[1, 0] == 0


def test_batched_accumulation_equals_single_pass():
    rng = np.random.default_rng(1)
    preds = [rng.integers(0, 6, size=(7, 5)) for _ in range(4)]
    trues = [rng.integers(0, 6, size=(7, 5)) for _ in range(4)]
    batched = accumulate_confusion(preds, trues, 6)
    merged = accumulate_confusion(preds[0], trues[0], 6)
    for p, t in zip(preds[1:], trues[1:]):
        merged = merged.merge(accumulate_confusion(p, t, 6))
    single = accumulate_confusion(
        np.concatenate([p.ravel() for p in preds]), np.concatenate([t.ravel() for t in trues]), 6
    )
    np.testing.assert_array_equal(batched.counts, merged.counts)
    np.testing.assert_array_equal(batched.counts, single.counts)


def test_accumulate_shape_mismatch():
    with pytest.raises(ShapeError):
        accumulate_confusion(np.zeros((2, 2), dtype=int), np.zeros((3, 2), dtype=int), 4)


@pytest.mark.parametrize("seed", range(5))
def test_accumulate_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    pred = rng.integers(0, 12, size=(11, 13))
    true = rng.integers(0, 12, size=(11, 13))
    matrix = accumulate_confusion(pred, true, 12)
    np.testing.assert_array_equal(matrix.counts, _brute_force_confusion(pred, true, 12))


def test_derive_metrics_perfect():
    matrix = ConfusionMatrix(np.diag([5, 7, 9]))
    report = derive_metrics(matrix)
    np.testing.assert_array_equal(report.per_class_accuracy, [1.0, 1.0, 1.0])
    assert report.total_accuracy == 1.0


def test_derive_metrics_hand_case():
    report = derive_metrics(ConfusionMatrix(np.array([[8, 2], [1, 9]])))
    np.testing.assert_allclose(report.per_class_accuracy, [0.8, 0.9])
    assert report.total_accuracy == 17 / 20


def test_derive_metrics_absent_class_is_nan():
    matrix = ConfusionMatrix(np.array([[4, 0, 0], [0, 3, 0], [0, 0, 0]]))
    report = derive_metrics(matrix)
    assert math.isnan(report.per_class_accuracy[2])
    assert report.total_accuracy == 1.0
    assert report.class_mean_accuracy == 1.0


def test_derive_metrics_empty_matrix():
    with pytest.raises(EmptyEvaluationError):
        derive_metrics(ConfusionMatrix(np.zeros((3, 3), dtype=int)))


def test_row_normalize_hand_case():
    np.testing.assert_array_equal(
        row_normalize(np.array([[2, 2], [0, 4]])), np.array([[0.5, 0.5], [0.0, 1.0]])
    )


def test_row_normalize_zero_row_stays_zero():
    out = row_normalize(np.array([[0, 0], [3, 1]]))
    np.testing.assert_array_equal(out[0], [0.0, 0.0])


@pytest.mark.parametrize("seed", range(5))
def test_row_normalize_rows_sum_to_one(seed):
    rng = np.random.default_rng(seed)
    matrix = rng.integers(0, 50, size=(12, 12))
    sums = row_normalize(matrix).sum(axis=1)
    nonzero = matrix.sum(axis=1) > 0
    np.testing.assert_allclose(sums[nonzero], 1.0, atol=1e-9)
    assert (sums[~nonzero] == 0).all()


def test_trace_bounded_by_total_with_equality_iff_perfect():
    rng = np.random.default_rng(2)
    true = rng.integers(0, 4, size=(8, 8))
    pred = true.copy()
    matrix = accumulate_confusion(pred, true, 4)
    assert np.trace(matrix.counts) == matrix.total
    pred[0, 0] = (pred[0, 0] + 1) % 4
    matrix = accumulate_confusion(pred, true, 4)
    assert np.trace(matrix.counts) == matrix.total - 1


def test_total_accuracy_is_pixel_weighted_mean_of_per_class():
    rng = np.random.default_rng(3)
    matrix = accumulate_confusion(rng.integers(0, 6, (20, 20)), rng.integers(0, 6, (20, 20)), 6)
    report = derive_metrics(matrix)
    row_sums = matrix.counts.sum(axis=1)
    present = row_sums > 0
    weighted = (row_sums[present] * report.per_class_accuracy[present]).sum() / matrix.total
    np.testing.assert_allclose(weighted, report.total_accuracy, rtol=1e-12)


def test_report_json_round_trip_bit_exact(tmp_path, schema):
    rng = np.random.default_rng(4)
    matrix = accumulate_confusion(rng.integers(0, 12, (30, 30)), rng.integers(0, 12, (30, 30)), 12)
    report = derive_metrics(matrix, config_name="r34-DW")
    path = tmp_path / "metrics.json"
    write_report_json(report, schema, path)
    loaded = read_report_json(path)
    assert loaded.config_name == report.config_name
    assert loaded.total_accuracy == report.total_accuracy  # bit-exact float round trip
    np.testing.assert_array_equal(loaded.matrix.counts, report.matrix.counts)
    np.testing.assert_array_equal(loaded.normalized_matrix, report.normalized_matrix)
    both_nan = np.isnan(loaded.per_class_accuracy) & np.isnan(report.per_class_accuracy)
    equal = loaded.per_class_accuracy == report.per_class_accuracy
    assert (both_nan | equal).all()


def test_report_dict_round_trip_preserves_nan():
    matrix = ConfusionMatrix(np.array([[4, 0], [0, 0]]))
    report = derive_metrics(matrix)
    again = report_from_dict(report_to_dict(report))
    assert math.isnan(again.per_class_accuracy[1])


def test_report_csv_has_class_rows_plus_total(tmp_path, schema):
    rng = np.random.default_rng(5)
    matrix = accumulate_confusion(rng.integers(0, 12, (16, 16)), rng.integers(0, 12, (16, 16)), 12)
    report = derive_metrics(matrix)
    path = tmp_path / "metrics.csv"
    write_report_csv(report, schema, path)
    lines = path.read_text(encoding="utf-8").strip().splitlines()
    assert len(lines) == 1 + 12 + 1  # header + classes + Total
    assert lines[-1].split(",")[1] == "Total"


def test_matrix_cells_png_decodes_to_normalized_values(tmp_path):
    rng = np.random.default_rng(6)
    matrix = accumulate_confusion(rng.integers(0, 5, (40, 40)), rng.integers(0, 5, (40, 40)), 5)
    normalized = row_normalize(matrix)
    path = tmp_path / "cells.png"
    cell = 24
    render_matrix_cells(normalized, path, cell_size=cell)
    decoded = np.asarray(Image.open(path))
    assert decoded.shape == (5 * cell, 5 * cell)
    for i in range(5):
        for j in range(5):
            value = decoded[i * cell + cell // 2, j * cell + cell // 2] / 255.0
            assert abs(value - normalized[i, j]) <= 0.5 / 255 + 1e-12


def test_render_report_writes_all_formats(tmp_path, schema):
    rng = np.random.default_rng(7)
    matrix = accumulate_confusion(rng.integers(0, 12, (24, 24)), rng.integers(0, 12, (24, 24)), 12)
    report = derive_metrics(matrix, config_name="demo")
    written = render_report(report, schema, tmp_path)
    assert set(written) == {"csv", "json", "png", "figure"}
    for path in written.values():
        assert path.exists() and path.stat().st_size > 0
    data = json.loads(written["json"].read_text(encoding="utf-8"))
    assert data["config_name"] == "demo"


def test_render_report_unknown_format(tmp_path, schema):
    matrix = ConfusionMatrix(np.eye(12, dtype=int))
    report = derive_metrics(matrix)
    with pytest.raises(ConfigError):
        render_report(report, schema, tmp_path, formats=("csv", "pdf"))


def test_confusion_matrix_validation():
    with pytest.raises(ShapeError):
        ConfusionMatrix(np.zeros((2, 3), dtype=int))
    with pytest.raises(ShapeError):
        ConfusionMatrix(np.array([[1, -1], [0, 0]]))
    with pytest.raises(ShapeError):
        ConfusionMatrix(np.eye(2, dtype=int)).merge(ConfusionMatrix(np.eye(3, dtype=int)))
