import json
import math
import os

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from semiseg import config as cf
from semiseg import data as dat
from semiseg import model as mod
from semiseg import train as tr
from semiseg.consistency import VariantConfig
from semiseg.errors import ArgumentError, NumericError


def test_poly_lr_endpoints():
    assert tr.poly_lr(0.01, 0, 100, 0.9) == 0.01
    assert tr.poly_lr(0.01, 100, 100, 0.9) == 0.0


def test_poly_lr_closed_form():
    got = tr.poly_lr(0.001, 50, 100, 0.9)
    assert abs(got - 0.001 * 0.5**0.9) < 1e-15


def test_poly_lr_strictly_decreasing():
    vals = [tr.poly_lr(1.0, i, 50, 0.9) for i in range(51)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_poly_lr_errors():
    with pytest.raises(ArgumentError):
        tr.poly_lr(0.01, 0, 0, 0.9)
    with pytest.raises(ArgumentError):
        tr.poly_lr(0.01, 101, 100, 0.9)


def _logits_target(seed=0, k=3, side=6):
    g = torch.Generator().manual_seed(seed)
    logits = torch.randn(1, k, side, side, generator=g)
    target = torch.randint(0, k, (1, side, side), generator=g)
    return logits, target


def test_ohem_degenerate_threshold_is_plain_ce():
    logits, target = _logits_target(1)
    got = tr.ohem_ce(logits, target, thresh=1.0, min_kept=1)
    want = F.cross_entropy(logits, target)
    assert torch.allclose(got, want, atol=1e-7)


def test_ohem_min_kept_covers_all_pixels():
    logits, target = _logits_target(2)
    got = tr.ohem_ce(logits, target, thresh=0.0, min_kept=10_000)
    want = F.cross_entropy(logits, target)
    assert torch.allclose(got, want, atol=1e-7)


def test_ohem_keeps_exactly_k_hardest():
    # confident logits everywhere: nothing passes thresh, so exactly the
    # min_kept lowest-confidence pixels are scored
    g = torch.Generator().manual_seed(3)
    target = torch.randint(0, 3, (1, 5, 5), generator=g)
    logits = torch.full((1, 3, 5, 5), -4.0)
    logits.scatter_(1, target.unsqueeze(1), 4.0)
    logits += 0.05 * torch.randn(1, 3, 5, 5, generator=g)
    p_t = F.softmax(logits, dim=1).gather(1, target.unsqueeze(1)).squeeze(1)
    hardest = torch.topk(p_t.reshape(-1), 5, largest=False).indices
    ce_map = F.cross_entropy(logits, target, reduction="none").reshape(-1)
    want = ce_map[hardest].mean()
    got = tr.ohem_ce(logits, target, thresh=0.05, min_kept=5)
    assert torch.allclose(got, want, atol=1e-6)


def test_ohem_all_ignored_returns_zero():
    logits, _ = _logits_target(4)
    target = torch.full((1, 6, 6), 255, dtype=torch.long)
    assert tr.ohem_ce(logits, target, 0.7, 5).item() == 0.0


def test_ohem_respects_ignore_index():
    logits, target = _logits_target(5)
    target[0, 0, :] = 255
    got = tr.ohem_ce(logits, target, thresh=1.0, min_kept=1)
    want = F.cross_entropy(logits, target, ignore_index=255)
    assert torch.allclose(got, want, atol=1e-7)


def _run_cfg(epochs=2, seed=0, variant="supervised_only", **kw):
    cfg = cf.RunConfig()
    cfg.variant = VariantConfig.for_variant(variant)
    cfg.train.total_epochs = epochs
    cfg.train.seed = seed
    cfg.train.batch_l = 4
    cfg.train.batch_u = 4
    cfg.train.train_size = 32
    cfg.model.widths = (8, 12, 12)
    cfg.model.feature_dim = 12
    cfg.model.decoder_width = 12
    for k, v in kw.items():
        setattr(cfg.train, k, v)
    return cfg


@pytest.fixture(scope="module")
def split20(tiny_ds):
    return dat.make_splits(tiny_ds, dat.SplitSpec("blended", 8, 0))


def test_run_training_invalid_epochs(tiny_ds, split20, tmp_path):
    labeled, unlabeled = split20
    with pytest.raises(ArgumentError):
        tr.run_training(_run_cfg(epochs=0), tiny_ds, labeled, unlabeled, str(tmp_path / "r"))


def test_run_training_deterministic(tiny_ds, split20, tmp_path):
    labeled, unlabeled = split20
    _, _, h1 = tr.run_training(_run_cfg(variant="fixmatch"), tiny_ds, labeled, unlabeled, str(tmp_path / "r1"))
    _, _, h2 = tr.run_training(_run_cfg(variant="fixmatch"), tiny_ds, labeled, unlabeled, str(tmp_path / "r2"))
    assert [r["loss_total"] for r in h1] == [r["loss_total"] for r in h2]
    assert [r["loss_s"] for r in h1] == [r["loss_s"] for r in h2]


def test_run_training_metrics_schema(tiny_ds, split20, tmp_path):
    labeled, unlabeled = split20
    ck, mt, hist = tr.run_training(_run_cfg(), tiny_ds, labeled, unlabeled, str(tmp_path / "r"))
    with open(mt) as f:
        lines = [json.loads(l) for l in f]
    assert len(lines) == len(hist)
    for rec in lines:
        assert set(rec) >= {"step", "epoch", "lr", "loss_s", "loss_u", "loss_total", "mask_ratio"}
    assert [r["step"] for r in lines] == list(range(len(lines)))
    assert os.path.exists(ck)


def test_run_training_supervised_loss_decreases(tiny_ds, split20, tmp_path):
    labeled, unlabeled = split20
    _, _, hist = tr.run_training(_run_cfg(epochs=20), tiny_ds, labeled, unlabeled, str(tmp_path / "r"))
    by_epoch = {}
    for rec in hist:
        by_epoch.setdefault(rec["epoch"], []).append(rec["loss_s"])
    means = [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]
    drops = sum(1 for a, b in zip(means, means[1:]) if b < a)
    # noisy 8-image epochs will not fall monotonically, but training should
    # trend down and end far below where it started
    assert drops / (len(means) - 1) >= 0.6
    assert means[-1] < 0.5 * means[0]


def test_checkpoint_probe_round_trip(tiny_ds, split20, tmp_path):
    labeled, unlabeled = split20
    ck, _, _ = tr.run_training(_run_cfg(), tiny_ds, labeled, unlabeled, str(tmp_path / "r"))
    net, _ = mod.load_checkpoint(ck)
    probe = torch.rand(2, 3, 32, 32, generator=torch.Generator().manual_seed(0))
    out1 = net(probe)
    net2, _ = mod.load_checkpoint(ck)
    assert torch.equal(out1, net2(probe))


def test_run_training_aborts_on_divergence(tiny_ds, split20, tmp_path):
    labeled, unlabeled = split20
    cfg = _run_cfg(epochs=3, base_lr=1e14, checkpoint_every=1)
    out = tmp_path / "r"
    with pytest.raises(NumericError):
        tr.run_training(cfg, tiny_ds, labeled, unlabeled, str(out))
    # the last good checkpoint from an earlier epoch survives the abort
    assert os.path.exists(out / "last.pt")
    mod.load_checkpoint(out / "last.pt")


def test_ohem_path_in_training(tiny_ds, split20, tmp_path):
    labeled, unlabeled = split20
    cfg = _run_cfg(epochs=1, ohem_thresh=0.7)
    _, _, hist = tr.run_training(cfg, tiny_ds, labeled, unlabeled, str(tmp_path / "r"))
    assert all(math.isfinite(r["loss_s"]) for r in hist)
