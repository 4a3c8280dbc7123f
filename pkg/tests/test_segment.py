import csv
import json

import numpy as np
import pytest

from atlasaug import toydata
from atlasaug.engine import ShapeError
from atlasaug.segment import (EvalReport, SegModel, dice, evaluate_suite,
                              mean_foreground_dice, predict_labels,
                              train_segmenter)

WIDTHS = (4, 8, 8)


# ---------------------------------------------------------------------------
# dice


def test_dice_perfect_overlap():
    x = np.array([[1, 1], [0, 0]])
    assert dice(x, x, 1) == 1.0


def test_dice_disjoint():
    a = np.array([1, 1, 0, 0])
    b = np.array([0, 0, 1, 1])
    assert dice(a, b, 1) == 0.0


def test_dice_half_overlap():
    # |A| = 4, |B| = 4, |A n B| = 2
    a = np.array([1, 1, 1, 1, 0, 0])
    b = np.array([1, 1, 0, 0, 1, 1])
    assert dice(a, b, 1) == 0.5


def test_dice_mutually_absent_label():
    z = np.zeros((3, 3), dtype=np.int32)
    assert dice(z, z, 2) == 1.0


def test_dice_shape_mismatch():
    with pytest.raises(ShapeError):
        dice(np.zeros((2, 2)), np.zeros((3, 3)), 1)


def test_mean_foreground_dice_excludes_background():
    pred = np.array([[0, 1], [2, 0]])
    truth = np.array([[1, 1], [2, 2]])
    # label 1: 2*1/3, label 2: 2*1/3; background plays no part
    assert mean_foreground_dice(pred, truth, 3) == pytest.approx(2 / 3)


# ---------------------------------------------------------------------------
# prediction


def test_fresh_model_predicts_background():
    # zero-initialised logits tie-break toward label 0
    model = SegModel.create(3, widths=WIDTHS, seed=0)
    out = predict_labels(model, np.zeros((16, 16), dtype=np.float32))
    assert not out.any()


def test_predict_shape_and_dtype():
    model = SegModel.create(4, widths=WIDTHS, seed=1)
    out = predict_labels(model, np.zeros((16, 20), dtype=np.float32))
    assert out.shape == (16, 20)
    assert out.dtype == np.int32


def test_predict_3d_volume_slicewise():
    model = SegModel.create(3, widths=WIDTHS, seed=2)
    vol = np.random.default_rng(0).normal(size=(5, 16, 16)).astype(np.float32)
    out = predict_labels(model, vol)
    assert out.shape == vol.shape
    for k in range(5):
        np.testing.assert_array_equal(out[k], predict_labels(model, vol[k]))


def test_predict_deterministic():
    model = SegModel.create(3, widths=WIDTHS, seed=3)
    img = np.random.default_rng(1).normal(size=(16, 16)).astype(np.float32)
    np.testing.assert_array_equal(predict_labels(model, img),
                                  predict_labels(model, img))


def test_predict_rejects_bad_rank():
    model = SegModel.create(3, widths=WIDTHS)
    with pytest.raises(ShapeError):
        predict_labels(model, np.zeros((2, 2, 2, 2), dtype=np.float32))


# ---------------------------------------------------------------------------
# training


def atlas_fixture():
    params = toydata.ToyGenParams(size=24, warp_amplitude=2.0, warp_spacing=6,
                                  seed=13)
    labels, image = toydata.make_template(params)
    return image, labels


def test_train_zero_epochs_noop():
    image, labels = atlas_fixture()
    model = SegModel.create(4, widths=WIDTHS, seed=4)
    before = model.net.clone_state()
    train_segmenter(model, lambda rng: (image, labels), [image], [labels],
                    max_epochs=0, patience=3, seed=0)
    for k, v in model.net.clone_state().items():
        np.testing.assert_array_equal(before[k], v)


def test_train_overfits_atlas():
    image, labels = atlas_fixture()
    model = SegModel.create(4, widths=WIDTHS, seed=5)
    train_segmenter(model, lambda rng: (image, labels), [image], [labels],
                    max_epochs=20, patience=20, seed=0,
                    iters_per_epoch=10, batch_size=4, learning_rate=5e-3)
    pred = predict_labels(model, image)
    assert mean_foreground_dice(pred, labels, 4) > 0.90


def test_train_deterministic():
    image, labels = atlas_fixture()

    def run():
        model = SegModel.create(4, widths=WIDTHS, seed=6)
        train_segmenter(model, lambda rng: (image, labels), [image], [labels],
                        max_epochs=4, patience=4, seed=1,
                        iters_per_epoch=3, batch_size=2)
        return model.best_epoch, tuple(model.val_history)

    assert run() == run()


def test_train_restores_best_checkpoint():
    image, labels = atlas_fixture()
    model = SegModel.create(4, widths=WIDTHS, seed=7)
    train_segmenter(model, lambda rng: (image, labels), [image], [labels],
                    max_epochs=8, patience=8, seed=2,
                    iters_per_epoch=5, batch_size=2, learning_rate=5e-3)
    # the returned weights correspond to the best recorded validation score
    score = mean_foreground_dice(predict_labels(model, image), labels, 4)
    assert score == pytest.approx(max(model.val_history), abs=1e-12)


# ---------------------------------------------------------------------------
# evaluation harness


def fixture_truths():
    t0 = np.array([[1, 1], [2, 0]], dtype=np.int32)
    t1 = np.array([[2, 2], [1, 0]], dtype=np.int32)
    return [t0, t1]


def test_perfect_method_improvement():
    truths = fixture_truths()
    base = [np.zeros_like(t) for t in truths]
    report = evaluate_suite({"exact": [t.copy() for t in truths], "base": base},
                            truths, "base", label_count=3)
    entry = report.summary["methods"]["exact"]
    assert entry["mean_dice"] == 1.0
    base_mean = report.summary["methods"]["base"]["mean_dice"]
    assert entry["improvement_vs_baseline"] == pytest.approx(1.0 - base_mean)


def test_baseline_self_improvement_zero():
    truths = fixture_truths()
    preds = [t.copy() for t in truths]
    report = evaluate_suite({"m": preds, "base": [p.copy() for p in preds]},
                            truths, "base", label_count=3)
    assert report.summary["methods"]["m"]["improvement_vs_baseline"] == 0.0


def test_two_subject_oracle():
    # hand-computed: subject 0 pred hits 1 of 2 voxels of label 1
    # (dice 2*1/(1+2) = 2/3) and misses label 2 entirely (0.0);
    # subject 1 is exact (1.0, 1.0)
    truths = fixture_truths()
    pred0 = np.array([[1, 0], [0, 0]], dtype=np.int32)
    report = evaluate_suite({"m": [pred0, truths[1].copy()],
                             "base": [t.copy() for t in truths]},
                            truths, "base", label_count=3)
    m = report.summary["methods"]["m"]
    assert m["per_subject_mean_dice"][0] == pytest.approx((2 / 3 + 0.0) / 2)
    assert m["per_subject_mean_dice"][1] == 1.0
    assert m["mean_dice"] == pytest.approx(np.mean([2 / 3, 0.0, 1.0, 1.0]))


def test_missing_prediction_names_method_and_subject():
    truths = fixture_truths()
    with pytest.raises(ValueError, match="'m'.*subject 1"):
        evaluate_suite({"m": [truths[0]], "base": [t.copy() for t in truths]},
                       truths, "base", label_count=3)


def test_unknown_baseline():
    truths = fixture_truths()
    with pytest.raises(ValueError):
        evaluate_suite({"m": truths}, truths, "nope", label_count=3)


def test_label_order_by_reference_volume():
    truths = fixture_truths()
    ref = np.array([[2, 2], [2, 1]], dtype=np.int32)   # label 2 dominates
    report = evaluate_suite({"base": [t.copy() for t in truths]}, truths,
                            "base", label_count=3, reference_labels=ref)
    assert report.label_order == [2, 1]


def test_report_csv_and_json_layout(tmp_path):
    truths = fixture_truths()
    report = evaluate_suite({"base": [t.copy() for t in truths]}, truths,
                            "base", label_count=3)
    cp, jp = tmp_path / "metrics.csv", tmp_path / "summary.json"
    report.write_csv(cp)
    report.write_json(jp)
    with open(cp) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["method", "subject", "label", "dice"]
    assert len(rows) == 1 + len(report.rows)
    with open(jp) as fh:
        summary = json.load(fh)
    assert summary["baseline"] == "base"
    assert "base" in summary["methods"]
