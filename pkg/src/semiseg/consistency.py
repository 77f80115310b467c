"""Pseudo-labeling, confidence masking, and the consistency loss compositions.

One training step runs up to three kinds of forward streams on the unlabeled
batch, all supervised by the pseudo label of the shared weak view:

  * feature streams:  weak image -> encoder -> perturb -> decoder
  * image streams:    independently sampled strong views -> full model
  * hybrid streams:   strong views whose features are also perturbed
                      (ablation variant; replaces the image streams)

The unsupervised loss is  lambda * mean(feature-stream CE) +
mu * mean(image-stream CE), with each CE restricted to pixels whose weak-view
confidence clears tau. The total step loss is (loss_s + loss_u) / 2.

Stream classes with zero weight or zero count are skipped entirely, never
just multiplied by zero: this keeps the reduction identities (e.g. unimatch
with lambda=0 and one image stream versus plain fixmatch) bit-exact under a
shared seed, because the skipped class consumes no randomness.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F

from . import augment as aug
from . import featperturb as fp
from . import model as mod
from .errors import ArgumentError, ConfigurationError, ContractViolation, NumericError
from .rng import RngBundle

CE_IGNORE = -100

VARIANTS = (
    "supervised_only",
    "fixmatch",
    "uniperb",
    "dusperb",
    "unimatch",
    "hybrid_single",
    "hybrid_dual",
    "feature_only",
)

# (image streams, feature streams) implied by each named variant
_VARIANT_STREAMS = {
    "supervised_only": (0, 0),
    "fixmatch": (1, 0),
    "uniperb": (1, 1),
    "dusperb": (2, 0),
    "unimatch": (2, 1),
    "hybrid_single": (1, 0),
    "hybrid_dual": (2, 0),
    "feature_only": (0, 1),
}


@dataclass
class VariantConfig:
    variant: str = "unimatch"
    n_image_streams: int = 2
    n_feature_streams: int = 1
    lambda_fp: float = 0.5
    mu_img: float = 0.5
    tau: float = 0.95

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if self.n_image_streams < 0 or self.n_feature_streams < 0:
            raise ConfigurationError("stream counts must be >= 0")
        if self.lambda_fp < 0 or self.mu_img < 0:
            raise ConfigurationError("loss weights must be >= 0")
        if not (0.0 <= self.tau <= 1.0):
            raise ConfigurationError(f"tau must be in [0, 1], got {self.tau}")

    @property
    def hybrid(self) -> bool:
        return self.variant in ("hybrid_single", "hybrid_dual")

    @property
    def active_image_streams(self) -> int:
        return self.n_image_streams if self.mu_img > 0 else 0

    @property
    def active_feature_streams(self) -> int:
        return self.n_feature_streams if self.lambda_fp > 0 else 0

    @classmethod
    def for_variant(cls, name: str, **overrides) -> "VariantConfig":
        if name not in _VARIANT_STREAMS:
            raise ConfigurationError(f"unknown variant {name!r}, expected one of {VARIANTS}")
        n_img, n_feat = _VARIANT_STREAMS[name]
        cfg = cls(variant=name, n_image_streams=n_img, n_feature_streams=n_feat)
        cfg = replace(cfg, **overrides)
        cfg.validate()
        return cfg


@dataclass
class PseudoLabel:
    hard: torch.Tensor  # per-pixel argmax class indices
    valid: torch.Tensor  # confidence >= tau


def pseudo_label(probs: torch.Tensor, tau: float) -> PseudoLabel:
    """Hard argmax mask plus a validity mask from confidence thresholding.

    probs must be normalized per pixel; the result carries no gradient.
    """
    if not (0.0 <= tau <= 1.0):
        raise ArgumentError(f"tau must be in [0, 1], got {tau}")
    probs = probs.detach()
    class_dim = 0 if probs.dim() == 3 else 1
    sums = probs.sum(dim=class_dim)
    if (sums - 1.0).abs().max().item() > 1e-3:
        raise ContractViolation("probability map is not normalized per pixel")
    conf, hard = probs.max(dim=class_dim)
    return PseudoLabel(hard=hard, valid=conf >= tau)


def masked_ce(logits: torch.Tensor, pl: PseudoLabel) -> torch.Tensor:
    """Mean cross-entropy over valid pixels only; 0 (with zero gradient) when

    no pixel is valid.
    """
    if logits.shape[-2:] != pl.hard.shape[-2:] or logits.dim() - 1 != pl.hard.dim():
        raise ArgumentError(
            f"logits shape {tuple(logits.shape)} does not match pseudo label shape {tuple(pl.hard.shape)}"
        )
    if not pl.valid.any():
        return logits.sum() * 0.0
    target = pl.hard.masked_fill(~pl.valid, CE_IGNORE)
    if logits.dim() == 3:
        logits = logits.unsqueeze(0)
        target = target.unsqueeze(0)
    return F.cross_entropy(logits, target, ignore_index=CE_IGNORE)


def supervised_ce(logits: torch.Tensor, target: torch.Tensor, ignore_index: int = aug.IGNORE_INDEX) -> torch.Tensor:
    """Plain mean CE over non-ignored pixels (the default labeled-batch loss)."""
    if (target != ignore_index).sum() == 0:
        return logits.sum() * 0.0
    return F.cross_entropy(logits, target, ignore_index=ignore_index)


def unimatch_unsup_loss(
    fp_logits: list[torch.Tensor],
    strong_logits: list[torch.Tensor],
    pl: PseudoLabel,
    cfg: VariantConfig,
    strong_targets: list[PseudoLabel] | None = None,
) -> torch.Tensor:
    """lambda * mean over feature streams + mu * mean over image streams of the

    confidence-masked CE. Feature streams are always scored against the
    un-mixed pseudo label; image streams may carry their own (CutMix-mixed)
    targets.
    """
    if not fp_logits and not strong_logits:
        raise ArgumentError("at least one perturbation stream is required")
    if fp_logits and len(fp_logits) != cfg.n_feature_streams:
        raise ArgumentError(f"expected {cfg.n_feature_streams} feature streams, got {len(fp_logits)}")
    if strong_logits and len(strong_logits) != cfg.n_image_streams:
        raise ArgumentError(f"expected {cfg.n_image_streams} image streams, got {len(strong_logits)}")
    if strong_targets is not None and len(strong_targets) != len(strong_logits):
        raise ArgumentError("one target per image stream required")
    total = None
    if fp_logits:
        fp_loss = sum(masked_ce(lg, pl) for lg in fp_logits) / len(fp_logits)
        total = cfg.lambda_fp * fp_loss
    if strong_logits:
        targets = strong_targets if strong_targets is not None else [pl] * len(strong_logits)
        img_loss = sum(masked_ce(lg, t) for lg, t in zip(strong_logits, targets)) / len(strong_logits)
        term = cfg.mu_img * img_loss
        total = term if total is None else total + term
    return total


def _mix_with_records(batch: torch.Tensor, records: list[aug.AugRecord]) -> torch.Tensor:
    """Apply recorded CutMix boxes to a torch batch (pseudo masks / validity)."""
    out = batch.clone()
    for i, rec in enumerate(records):
        if rec.cutmix_box is None or rec.cutmix_partner is None:
            continue
        top, left, bh, bw = rec.cutmix_box
        out[i, ..., top : top + bh, left : left + bw] = batch[rec.cutmix_partner][
            ..., top : top + bh, left : left + bw
        ]
    return out


@dataclass
class PreparedBatch:
    """All augmented views of one step, fixed before any forward pass."""

    images_l: torch.Tensor
    masks_l: torch.Tensor
    images_w: torch.Tensor | None
    strong_views: list[torch.Tensor] = field(default_factory=list)
    strong_records: list[list[aug.AugRecord]] = field(default_factory=list)


@dataclass
class StepResult:
    loss_s: torch.Tensor
    loss_u: torch.Tensor
    loss_total: torch.Tensor
    mask_ratio: float
    intermediates: dict | None = None


def _as_image_list(batch) -> list[np.ndarray]:
    return [np.asarray(x) for x in batch]


def prepare_step(
    labeled: tuple,
    unlabeled,
    cfg: VariantConfig,
    aug_cfg: aug.AugPipelineConfig,
    rngs: RngBundle,
    ignore_index: int = aug.IGNORE_INDEX,
    dtype: torch.dtype = torch.float32,
) -> PreparedBatch:
    """Run all image-level augmentation for one step.

    Weak views are sampled for labeled and unlabeled batches; each configured
    image (or hybrid) stream then draws an independent strong view of the
    unlabeled weak batch. No model forward happens here, so the result can be
    reused to re-evaluate the step loss as a pure function of parameters.
    """
    cfg.validate()
    aug_cfg.validate()
    l_images, l_masks = labeled
    l_images = _as_image_list(l_images)
    if len(l_images) == 0:
        raise ArgumentError("labeled batch must be non-empty")
    u_images = _as_image_list(unlabeled) if unlabeled is not None else []
    needs_unlabeled = cfg.active_image_streams > 0 or cfg.active_feature_streams > 0
    if needs_unlabeled and len(u_images) == 0:
        raise ArgumentError(f"variant {cfg.variant!r} requires an unlabeled batch")

    rng_l = rngs.numpy("aug.labeled")
    out_l, out_m = [], []
    for img, msk in zip(l_images, np.asarray(l_masks)):
        oi, om, _ = aug.weak_augment(img, np.asarray(msk), aug_cfg, rng_l, ignore_index=ignore_index)
        out_l.append(oi)
        out_m.append(om)
    images_l = torch.from_numpy(np.stack(out_l)).to(dtype)
    masks_l = torch.from_numpy(np.stack(out_m)).long()

    images_w = None
    strong_views: list[torch.Tensor] = []
    strong_records: list[list[aug.AugRecord]] = []
    if needs_unlabeled:
        rng_w = rngs.numpy("aug.weak")
        weak_np = np.stack([aug.weak_augment(img, None, aug_cfg, rng_w, ignore_index=ignore_index)[0] for img in u_images])
        images_w = torch.from_numpy(weak_np).to(dtype)
        rng_s = rngs.numpy("aug.strong")
        for _ in range(cfg.active_image_streams):
            view, records = aug.strong_augment_batch(weak_np, aug_cfg, rng_s)
            strong_views.append(torch.from_numpy(view).to(dtype))
            strong_records.append(records)
    return PreparedBatch(images_l, masks_l, images_w, strong_views, strong_records)


def _fp_stream_logits(
    model: mod.TinySegNet,
    feat: torch.Tensor,
    fp_spec: fp.FeaturePerturbSpec,
    gen: torch.Generator,
    out_size: tuple[int, int],
) -> torch.Tensor:
    if fp_spec.location == "decoder_classifier":
        hidden = model.decode_hidden(feat)
        hidden = fp.apply_perturbation(hidden, fp_spec, gen, decoder=lambda h: model.classify(h, out_size))
        return model.classify(hidden, out_size)
    perturbed = fp.apply_perturbation(feat, fp_spec, gen, decoder=lambda f: model.decode(f, out_size))
    return model.decode(perturbed, out_size)


def step_losses(
    model: mod.TinySegNet,
    prepared: PreparedBatch,
    cfg: VariantConfig,
    fp_spec: fp.FeaturePerturbSpec,
    fp_gen: torch.Generator,
    sup_loss_fn=None,
    ignore_index: int = aug.IGNORE_INDEX,
    want_intermediates: bool = False,
) -> StepResult:
    """Forward all configured streams on a prepared batch and compose the loss.

    The pseudo label comes from a no-grad forward of the weak view with the
    same parameter set being trained (the teacher is the student).
    """
    if sup_loss_fn is None:
        sup_loss_fn = lambda lg, tg: supervised_ce(lg, tg, ignore_index)
    inter: dict = {}

    logits_l = model(prepared.images_l)
    loss_s = sup_loss_fn(logits_l, prepared.masks_l)
    _check_finite(loss_s, "supervised")

    n_img = cfg.active_image_streams
    n_feat = cfg.active_feature_streams
    mask_ratio = 0.0
    if n_img == 0 and n_feat == 0:
        loss_u = loss_s.detach() * 0.0
        loss_total = 0.5 * (loss_s + loss_u)
        if want_intermediates:
            inter.update(logits_l=logits_l.detach())
        return StepResult(loss_s, loss_u, loss_total, mask_ratio, inter if want_intermediates else None)

    out_size = prepared.images_w.shape[-2:]
    with torch.no_grad():
        probs_w = mod.predict(model, prepared.images_w)
    pl = pseudo_label(probs_w, cfg.tau)
    mask_ratio = pl.valid.to(torch.float64).mean().item()

    fp_logits: list[torch.Tensor] = []
    if n_feat > 0:
        feat_w = model.encode(prepared.images_w)
        for _ in range(n_feat):
            fp_logits.append(_fp_stream_logits(model, feat_w, fp_spec, fp_gen, out_size))

    strong_logits: list[torch.Tensor] = []
    strong_targets: list[PseudoLabel] = []
    for j in range(n_img):
        x_s = prepared.strong_views[j]
        records = prepared.strong_records[j]
        if cfg.hybrid:
            feat_s = model.encode(x_s)
            logits_s = _fp_stream_logits(model, feat_s, fp_spec, fp_gen, out_size)
        else:
            logits_s = model(x_s)
        strong_logits.append(logits_s)
        strong_targets.append(
            PseudoLabel(hard=_mix_with_records(pl.hard, records), valid=_mix_with_records(pl.valid, records))
        )

    loss_u = unimatch_unsup_loss(fp_logits, strong_logits, pl, cfg, strong_targets=strong_targets or None)
    for name, value in [("feature", fp_logits), ("image", strong_logits)]:
        for k, lg in enumerate(value):
            _check_finite(lg, f"{name} stream {k}")
    _check_finite(loss_u, "unsupervised total")
    loss_total = 0.5 * (loss_s + loss_u)

    if want_intermediates:
        inter.update(
            logits_l=logits_l.detach(),
            probs_w=probs_w,
            pl=pl,
            fp_logits=[t.detach() for t in fp_logits],
            strong_logits=[t.detach() for t in strong_logits],
            strong_targets=strong_targets,
        )
    return StepResult(loss_s, loss_u, loss_total, mask_ratio, inter if want_intermediates else None)


def train_step(
    model: mod.TinySegNet,
    labeled: tuple,
    unlabeled,
    cfg: VariantConfig,
    aug_cfg: aug.AugPipelineConfig,
    fp_spec: fp.FeaturePerturbSpec,
    rngs: RngBundle,
    sup_loss_fn=None,
    ignore_index: int = aug.IGNORE_INDEX,
    want_intermediates: bool = False,
) -> StepResult:
    """One full consistency step: augment, forward all streams, compose losses.

    Gradient propagation and the optimizer update are the caller's business;
    the returned losses still carry their graph.
    """
    prepared = prepare_step(labeled, unlabeled, cfg, aug_cfg, rngs, ignore_index=ignore_index)
    return step_losses(
        model,
        prepared,
        cfg,
        fp_spec,
        rngs.torch_gen("featperturb"),
        sup_loss_fn=sup_loss_fn,
        ignore_index=ignore_index,
        want_intermediates=want_intermediates,
    )


def _check_finite(value: torch.Tensor, where: str) -> None:
    if not torch.isfinite(value).all():
        raise NumericError(f"non-finite value in {where}")
