import numpy as np
import pytest
import torch

from semiseg import data as dat
from semiseg import evaluate as ev
from semiseg import model as mod
from semiseg.errors import ArgumentError, UndefinedMetricError


def test_confusion_perfect_prediction():
    cm = ev.ConfusionMatrix(3)
    gt = np.array([[0, 1], [2, 1]])
    ev.confusion_update(cm, gt, gt)
    assert np.trace(cm.counts) == 4
    assert cm.counts.sum() == 4


def test_confusion_ignores_ignore_index():
    cm = ev.ConfusionMatrix(3)
    gt = np.full((2, 2), 255)
    ev.confusion_update(cm, np.zeros((2, 2), dtype=int), gt)
    assert cm.counts.sum() == 0


def test_confusion_hand_tally():
    cm = ev.ConfusionMatrix(2)
    gt = np.array([[0, 0, 1], [1, 1, 0], [255, 1, 0]])
    pred = np.array([[0, 1, 1], [1, 0, 0], [0, 1, 1]])
    ev.confusion_update(cm, pred, gt)
    # rows = gt, cols = pred, counted by hand
    assert cm.counts.tolist() == [[2, 2], [1, 3]]


def test_confusion_errors():
    cm = ev.ConfusionMatrix(2)
    with pytest.raises(ArgumentError):
        ev.confusion_update(cm, np.zeros((2, 2), dtype=int), np.zeros((3, 3), dtype=int))
    with pytest.raises(ArgumentError):
        ev.confusion_update(cm, np.full((2, 2), 5), np.zeros((2, 2), dtype=int))


def test_confusion_additivity():
    rng = np.random.default_rng(0)
    a_pred, a_gt = rng.integers(0, 3, (2, 8, 8))
    b_pred, b_gt = rng.integers(0, 3, (2, 8, 8))
    whole = ev.ConfusionMatrix(3)
    ev.confusion_update(whole, np.concatenate([a_pred, b_pred]), np.concatenate([a_gt, b_gt]))
    parts = ev.ConfusionMatrix(3)
    ev.confusion_update(parts, a_pred, a_gt)
    ev.confusion_update(parts, b_pred, b_gt)
    assert np.array_equal(whole.counts, parts.counts)


def test_miou_closed_form():
    cm = ev.ConfusionMatrix(2, np.array([[50, 10], [20, 20]]))
    per_class, mean = ev.miou(cm)
    assert abs(per_class[0] - 50 / 80) < 1e-12
    assert abs(per_class[1] - 20 / 50) < 1e-12
    assert abs(mean - 0.5125) < 1e-12


def test_miou_perfect_and_disjoint():
    per, mean = ev.miou(ev.ConfusionMatrix(2, np.array([[7, 0], [0, 9]])))
    assert per == [1.0, 1.0] and mean == 1.0
    per, mean = ev.miou(ev.ConfusionMatrix(2, np.array([[0, 4], [5, 0]])))
    assert per == [0.0, 0.0] and mean == 0.0


def test_miou_excludes_absent_class():
    # class 2 never appears in gt or pred: excluded from the mean
    cm = ev.ConfusionMatrix(3, np.array([[4, 0, 0], [0, 4, 0], [0, 0, 0]]))
    per, mean = ev.miou(cm)
    assert np.isnan(per[2])
    assert mean == 1.0


def test_miou_empty_undefined():
    with pytest.raises(UndefinedMetricError):
        ev.miou(ev.ConfusionMatrix(3))


def test_miou_permutation_invariance():
    rng = np.random.default_rng(4)
    counts = rng.integers(0, 50, (3, 3))
    _, mean = ev.miou(ev.ConfusionMatrix(3, counts))
    perm = np.array([2, 0, 1])
    _, mean_p = ev.miou(ev.ConfusionMatrix(3, counts[perm][:, perm]))
    assert abs(mean - mean_p) < 1e-12


def test_dice_closed_form():
    cm = ev.ConfusionMatrix(2, np.array([[100, 10], [20, 30]]))
    per, _ = ev.dice(cm)
    # class 1: tp=30 fp=10 fn=20 -> 60/90
    assert abs(per[1] - 2 / 3) < 1e-12


def test_dice_perfect_and_disjoint():
    per, mean = ev.dice(ev.ConfusionMatrix(2, np.array([[5, 0], [0, 5]])))
    assert per == [1.0, 1.0] and mean == 1.0
    per, mean = ev.dice(ev.ConfusionMatrix(2, np.array([[0, 3], [3, 0]])))
    assert per[1] == 0.0 and mean == 0.0


def test_cd_metrics():
    cm = ev.ConfusionMatrix(2, np.array([[90, 0], [10, 0]]))
    changed, oa = ev.cd_metrics(cm)
    assert changed == 0.0 and abs(oa - 0.9) < 1e-12
    cm = ev.ConfusionMatrix(2, np.array([[50, 5], [10, 35]]))
    changed, oa = ev.cd_metrics(cm)
    assert abs(changed - 35 / 50) < 1e-12
    assert abs(oa - 0.85) < 1e-12
    with pytest.raises(ArgumentError):
        ev.cd_metrics(ev.ConfusionMatrix(3))


def _small_net():
    return mod.TinySegNet(
        mod.TinyNetConfig(num_classes=3, widths=(8, 12, 12), feature_dim=12, decoder_width=12, init_seed=5)
    )


def test_sliding_window_degenerate_exact():
    net = _small_net()
    img = torch.rand(3, 32, 32, generator=torch.Generator().manual_seed(1))
    whole = mod.predict(net, img)
    for window in (32, 64, 512):
        tiled = ev.sliding_window_predict(net, img, window)
        assert torch.equal(tiled, whole)


def test_sliding_window_two_tile_oracle():
    net = _small_net()
    g = torch.Generator().manual_seed(2)
    img = torch.rand(3, 32, 48, generator=g)
    window, stride = 32, 16
    got = ev.sliding_window_predict(net, img, window, stride)
    p0 = mod.predict(net, img[:, :, 0:32])
    p1 = mod.predict(net, img[:, :, 16:48])
    acc = torch.zeros(3, 32, 48, dtype=torch.float64)
    hits = torch.zeros(1, 32, 48, dtype=torch.float64)
    acc[:, :, 0:32] += p0.double()
    hits[:, :, 0:32] += 1
    acc[:, :, 16:48] += p1.double()
    hits[:, :, 16:48] += 1
    want = acc / hits
    want = want / want.sum(dim=0, keepdim=True)
    assert torch.allclose(got.double(), want, atol=1e-6)


def test_sliding_window_simplex_property():
    net = _small_net()
    img = torch.rand(3, 40, 56, generator=torch.Generator().manual_seed(3))
    probs = ev.sliding_window_predict(net, img, 24, 16)
    assert probs.shape == (3, 40, 56)
    assert torch.allclose(probs.sum(dim=0), torch.ones(40, 56), atol=1e-5)
    assert (probs >= 0).all()


def test_sliding_window_errors():
    net = _small_net()
    img = torch.rand(3, 32, 32)
    with pytest.raises(ArgumentError):
        ev.sliding_window_predict(net, img, 8, 16)  # stride > window


def test_evaluate_index_and_report(tiny_ds, tmp_path):
    net = _small_net()
    result = ev.evaluate_index(net, tiny_ds, ids=list(range(6)))
    assert result["n_items"] == 6
    assert len(result["per_class_iou"]) == 3
    path = tmp_path / "report.txt"
    ev.write_report(result, str(path), meta={"checkpoint": "x.pt"})
    text = path.read_text()
    assert "mean iou" in text
    class_rows = [l for l in text.splitlines() if l.strip() and l.split()[0].isdigit()]
    assert len(class_rows) == 3
