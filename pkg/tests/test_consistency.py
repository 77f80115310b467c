import math

import numpy as np
import pytest
import torch

from semiseg import augment as aug
from semiseg import consistency as cons
from semiseg import featperturb as fp
from semiseg import model as mod
from semiseg.errors import ArgumentError, ConfigurationError, ContractViolation, NumericError
from semiseg.rng import RngBundle

from conftest import seeded_batch


def rand_probs(shape, gen):
    logits = torch.randn(*shape, generator=gen)
    return torch.softmax(logits, dim=0 if len(shape) == 3 else 1)


def brute_masked_ce(logits, pl):
    """Scalar per-pixel reimplementation in float64."""
    lg = logits.detach().to(torch.float64).numpy()
    if lg.ndim == 3:
        lg = lg[None]
        hard = pl.hard.numpy()[None]
        valid = pl.valid.numpy()[None]
    else:
        hard = pl.hard.numpy()
        valid = pl.valid.numpy()
    total, count = 0.0, 0
    n, k, h, w = lg.shape
    for b in range(n):
        for y in range(h):
            for x in range(w):
                if not valid[b, y, x]:
                    continue
                z = lg[b, :, y, x]
                m = z.max()
                logsumexp = m + math.log(np.exp(z - m).sum())
                total += logsumexp - z[hard[b, y, x]]
                count += 1
    return 0.0 if count == 0 else total / count


def test_pseudo_label_matches_argmax(torch_gen):
    probs = rand_probs((4, 6, 6), torch_gen(0))
    pl = cons.pseudo_label(probs, 0.3)
    assert torch.equal(pl.hard, probs.argmax(dim=0))
    assert torch.equal(pl.valid, probs.max(dim=0).values >= 0.3)


def test_pseudo_label_tau_zero_all_valid(torch_gen):
    probs = rand_probs((3, 5, 5), torch_gen(1))
    pl = cons.pseudo_label(probs, 0.0)
    assert bool(pl.valid.all())


def test_pseudo_label_contract_violation(torch_gen):
    bad = torch.rand(3, 4, 4, generator=torch_gen(2)) + 0.5
    with pytest.raises(ContractViolation):
        cons.pseudo_label(bad, 0.5)
    with pytest.raises(ArgumentError):
        cons.pseudo_label(rand_probs((3, 4, 4), torch_gen(3)), 1.5)


def test_pseudo_label_carries_no_grad(torch_gen):
    logits = torch.randn(3, 4, 4, generator=torch_gen(4), requires_grad=True)
    pl = cons.pseudo_label(torch.softmax(logits, dim=0), 0.5)
    assert not pl.hard.requires_grad and not pl.valid.requires_grad


def test_masked_ce_brute_force_oracle(torch_gen):
    g = torch_gen(10)
    for trial in range(200):
        k = int(torch.randint(2, 5, (1,), generator=g))
        logits = torch.randn(k, 4, 4, generator=g, dtype=torch.float64)
        probs = torch.softmax(torch.randn(k, 4, 4, generator=g, dtype=torch.float64), dim=0)
        tau = float(torch.rand(1, generator=g))
        pl = cons.pseudo_label(probs, tau)
        got = cons.masked_ce(logits, pl).item()
        want = brute_masked_ce(logits, pl)
        assert abs(got - want) <= 1e-6


def test_masked_ce_empty_mask_zero_grad(torch_gen):
    logits = torch.randn(3, 4, 4, generator=torch_gen(5), requires_grad=True)
    pl = cons.PseudoLabel(hard=torch.zeros(4, 4, dtype=torch.long), valid=torch.zeros(4, 4, dtype=torch.bool))
    loss = cons.masked_ce(logits, pl)
    assert loss.item() == 0.0
    loss.backward()
    assert torch.equal(logits.grad, torch.zeros_like(logits))


def test_masked_ce_shape_mismatch(torch_gen):
    pl = cons.PseudoLabel(hard=torch.zeros(4, 4, dtype=torch.long), valid=torch.ones(4, 4, dtype=torch.bool))
    with pytest.raises(ArgumentError):
        cons.masked_ce(torch.randn(3, 5, 5, generator=torch_gen(6)), pl)


def test_variant_presets():
    expect = {
        "supervised_only": (0, 0),
        "fixmatch": (1, 0),
        "uniperb": (1, 1),
        "dusperb": (2, 0),
        "unimatch": (2, 1),
        "hybrid_single": (1, 0),
        "hybrid_dual": (2, 0),
        "feature_only": (0, 1),
    }
    for name, (n_img, n_feat) in expect.items():
        cfg = cons.VariantConfig.for_variant(name)
        assert (cfg.n_image_streams, cfg.n_feature_streams) == (n_img, n_feat)
        assert cfg.lambda_fp == 0.5 and cfg.mu_img == 0.5 and cfg.tau == 0.95
    assert cons.VariantConfig.for_variant("hybrid_dual").hybrid


def test_variant_unknown_lists_valid():
    with pytest.raises(ConfigurationError, match="fixmatch"):
        cons.VariantConfig.for_variant("megamatch")


def test_variant_overrides():
    cfg = cons.VariantConfig.for_variant("unimatch", tau=0.5, lambda_fp=0.0)
    assert cfg.tau == 0.5
    assert cfg.active_feature_streams == 0
    assert cfg.active_image_streams == 2


def test_unsup_loss_composition(torch_gen):
    g = torch_gen(20)
    probs = rand_probs((3, 6, 6), g)
    pl = cons.pseudo_label(probs, 0.0)
    fp_lg = [torch.randn(3, 6, 6, generator=g)]
    s_lg = [torch.randn(3, 6, 6, generator=g), torch.randn(3, 6, 6, generator=g)]
    cfg = cons.VariantConfig.for_variant("unimatch", tau=0.0)
    got = cons.unimatch_unsup_loss(fp_lg, s_lg, pl, cfg)
    want = 0.5 * cons.masked_ce(fp_lg[0], pl) + 0.5 * 0.5 * (cons.masked_ce(s_lg[0], pl) + cons.masked_ce(s_lg[1], pl))
    assert torch.allclose(got, want, atol=1e-7)


def test_unsup_loss_errors(torch_gen):
    probs = rand_probs((3, 4, 4), torch_gen(21))
    pl = cons.pseudo_label(probs, 0.0)
    cfg = cons.VariantConfig.for_variant("unimatch")
    with pytest.raises(ArgumentError):
        cons.unimatch_unsup_loss([], [], pl, cfg)
    with pytest.raises(ArgumentError):
        cons.unimatch_unsup_loss([], [torch.randn(3, 4, 4)], pl, cfg)  # wants 2 image streams


def _toy_batches(n_l=2, n_u=4, side=32, seed=0):
    rng = np.random.default_rng(seed)
    li = [rng.random((3, side, side)).astype(np.float32) for _ in range(n_l)]
    lm = rng.integers(0, 3, size=(n_l, side, side)).astype(np.int64)
    ui = [rng.random((3, side, side)).astype(np.float32) for _ in range(n_u)]
    return li, lm, ui


def _net(seed=3):
    return mod.TinySegNet(
        mod.TinyNetConfig(num_classes=3, widths=(8, 12, 12), feature_dim=12, decoder_width=12, init_seed=seed)
    )


def test_train_step_supervised_only():
    li, lm, _ = _toy_batches()
    res = cons.train_step(
        _net(),
        (li, lm),
        [],
        cons.VariantConfig.for_variant("supervised_only"),
        aug.AugPipelineConfig(train_size=32),
        fp.FeaturePerturbSpec(),
        RngBundle(0),
    )
    assert res.loss_u.item() == 0.0
    assert res.mask_ratio == 0.0
    assert torch.allclose(res.loss_total, 0.5 * res.loss_s)


def test_train_step_stream_counts():
    li, lm, ui = _toy_batches()
    for name, n_s, n_f in [("fixmatch", 1, 0), ("unimatch", 2, 1), ("feature_only", 0, 1), ("hybrid_dual", 2, 0)]:
        res = cons.train_step(
            _net(),
            (li, lm),
            ui,
            cons.VariantConfig.for_variant(name, tau=0.0),
            aug.AugPipelineConfig(train_size=32),
            fp.FeaturePerturbSpec(),
            RngBundle(1),
            want_intermediates=True,
        )
        assert len(res.intermediates["strong_logits"]) == n_s
        assert len(res.intermediates["fp_logits"]) == n_f
        assert 0.0 <= res.mask_ratio <= 1.0
        res.loss_total.backward()


def test_train_step_traced_recomposition():
    # loss_u must equal a recomputation from the exported stream logits
    li, lm, ui = _toy_batches(seed=5)
    cfg = cons.VariantConfig.for_variant("unimatch", tau=0.0)
    res = cons.train_step(
        _net(),
        (li, lm),
        ui,
        cfg,
        aug.AugPipelineConfig(train_size=32),
        fp.FeaturePerturbSpec(),
        RngBundle(2),
        want_intermediates=True,
    )
    inter = res.intermediates
    pl = inter["pl"]
    fp_part = sum(cons.masked_ce(lg, pl) for lg in inter["fp_logits"]) / len(inter["fp_logits"])
    img_part = sum(
        cons.masked_ce(lg, t) for lg, t in zip(inter["strong_logits"], inter["strong_targets"])
    ) / len(inter["strong_logits"])
    want = cfg.lambda_fp * fp_part + cfg.mu_img * img_part
    assert abs(res.loss_u.item() - want.item()) < 1e-6


def test_train_step_reduction_identity_fixmatch():
    li, lm, ui = _toy_batches(seed=9)
    a = cons.train_step(
        _net(7),
        (li, lm),
        ui,
        cons.VariantConfig.for_variant("unimatch", lambda_fp=0.0, n_image_streams=1, tau=0.0),
        aug.AugPipelineConfig(train_size=32),
        fp.FeaturePerturbSpec(),
        RngBundle(11),
    )
    b = cons.train_step(
        _net(7),
        (li, lm),
        ui,
        cons.VariantConfig.for_variant("fixmatch", tau=0.0),
        aug.AugPipelineConfig(train_size=32),
        fp.FeaturePerturbSpec(),
        RngBundle(11),
    )
    assert a.loss_total.item() == b.loss_total.item()
    assert a.loss_u.item() == b.loss_u.item()


def test_train_step_reduction_identity_feature_only():
    li, lm, ui = _toy_batches(seed=10)
    a = cons.train_step(
        _net(7),
        (li, lm),
        ui,
        cons.VariantConfig.for_variant("unimatch", mu_img=0.0, n_feature_streams=1, tau=0.0),
        aug.AugPipelineConfig(train_size=32),
        fp.FeaturePerturbSpec(),
        RngBundle(12),
    )
    b = cons.train_step(
        _net(7),
        (li, lm),
        ui,
        cons.VariantConfig.for_variant("feature_only", tau=0.0),
        aug.AugPipelineConfig(train_size=32),
        fp.FeaturePerturbSpec(),
        RngBundle(12),
    )
    assert a.loss_total.item() == b.loss_total.item()


def test_train_step_argument_errors():
    li, lm, ui = _toy_batches()
    cfg = cons.VariantConfig.for_variant("unimatch")
    with pytest.raises(ArgumentError):
        cons.train_step(_net(), ([], np.zeros((0, 32, 32))), ui, cfg, aug.AugPipelineConfig(train_size=32), fp.FeaturePerturbSpec(), RngBundle(0))
    with pytest.raises(ArgumentError):
        cons.train_step(_net(), (li, lm), [], cfg, aug.AugPipelineConfig(train_size=32), fp.FeaturePerturbSpec(), RngBundle(0))


def test_train_step_non_finite_detection():
    li, lm, ui = _toy_batches()
    net = _net()
    with torch.no_grad():
        net.classifier.weight.fill_(float("nan"))
    with pytest.raises(NumericError):
        cons.train_step(
            net,
            (li, lm),
            ui,
            cons.VariantConfig.for_variant("supervised_only"),
            aug.AugPipelineConfig(train_size=32),
            fp.FeaturePerturbSpec(),
            RngBundle(0),
        )
