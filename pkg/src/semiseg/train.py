"""Optimization loop: SGD with poly LR decay, optional OHEM, metrics logging.

The loop is deterministic given the run seed on a single device: every
random draw (init, schedule, augmentation, feature perturbation) comes from
a named substream of the root seed, and the model uses GroupNorm so there is
no running-statistics state outside the checkpointed parameters.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F

from . import consistency as cons
from . import data as dat
from . import model as mod
from .errors import ArgumentError, NumericError
from .rng import RngBundle, substream_seed


@dataclass
class TrainConfig:
    base_lr: float = 0.01
    total_epochs: int = 20
    poly_power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_l: int = 8
    batch_u: int = 8
    train_size: int = 64
    ohem_thresh: float | None = None  # enables OHEM when set
    ohem_min_kept: int | None = None  # default: batch pixels / 16
    seed: int = 0
    checkpoint_every: int = 10  # epochs

    def validate(self):
        if self.base_lr <= 0:
            raise ArgumentError("base_lr must be > 0")
        if self.total_epochs < 1:
            raise ArgumentError("total_epochs must be >= 1")
        if self.poly_power <= 0:
            raise ArgumentError("poly_power must be > 0")
        if self.batch_l < 1 or self.batch_u < 1:
            raise ArgumentError("batch sizes must be >= 1")
        if self.ohem_thresh is not None and not (0 < self.ohem_thresh <= 1):
            raise ArgumentError("ohem_thresh must be in (0, 1]")


def poly_lr(base: float, it: int, total_iters: int, power: float) -> float:
    if total_iters == 0:
        raise ArgumentError("total_iters must be > 0")
    if not (0 <= it <= total_iters):
        raise ArgumentError(f"iter {it} outside [0, {total_iters}]")
    return base * (1.0 - it / total_iters) ** power


def ohem_ce(
    logits: torch.Tensor,
    target: torch.Tensor,
    thresh: float = 0.7,
    min_kept: int = 1,
    ignore_index: int = dat.IGNORE_INDEX,
) -> torch.Tensor:
    """CE over the hard pixels: target-class probability below thresh, topped

    up to the min_kept hardest when too few qualify.
    """
    if min_kept < 1:
        raise ArgumentError("min_kept must be >= 1")
    if logits.dim() == 3:
        logits, target = logits.unsqueeze(0), target.unsqueeze(0)
    valid = target != ignore_index
    n_valid = int(valid.sum())
    if n_valid == 0:
        return logits.sum() * 0.0
    with torch.no_grad():
        probs = F.softmax(logits, dim=1)
        safe_target = target.masked_fill(~valid, 0)
        p_t = probs.gather(1, safe_target.unsqueeze(1)).squeeze(1)
        hard = valid & (p_t < thresh)
        if int(hard.sum()) < min_kept:
            k = min(min_kept, n_valid)
            flat_idx = valid.reshape(-1).nonzero(as_tuple=True)[0]
            vals = p_t.reshape(-1)[flat_idx]
            order = torch.topk(vals, k, largest=False).indices
            hard = torch.zeros_like(valid.reshape(-1))
            hard[flat_idx[order]] = True
            hard = hard.reshape(valid.shape)
    kept_target = target.masked_fill(~hard, ignore_index)
    return F.cross_entropy(logits, kept_target, ignore_index=ignore_index)


def run_training(run_cfg, index: dat.DatasetIndex, labeled_ids: list[int], unlabeled_ids: list[int], out_dir: str):
    """Train on the given split; returns (checkpoint path, metrics path, history).

    run_cfg carries .train (TrainConfig), .variant, .aug, .perturb and .model
    sections. Metrics go to metrics.jsonl, one record per step; checkpoints to
    last.pt every checkpoint interval and at the end. A non-finite loss aborts
    with the last written checkpoint left in place.
    """
    tc: TrainConfig = run_cfg.train
    tc.validate()
    run_cfg.variant.validate()
    run_cfg.aug.validate()
    run_cfg.perturb.validate()
    if not labeled_ids:
        raise ArgumentError("no labeled items")
    needs_u = run_cfg.variant.active_image_streams > 0 or run_cfg.variant.active_feature_streams > 0
    if needs_u and not unlabeled_ids:
        raise ArgumentError(f"variant {run_cfg.variant.variant!r} needs unlabeled items")

    os.makedirs(out_dir, exist_ok=True)
    rngs = RngBundle(tc.seed)
    # copy before filling in derived fields so the caller's config (and its
    # hash) stays what was asked for
    model_cfg = replace(run_cfg.model, num_classes=index.num_classes, init_seed=substream_seed(tc.seed, "init"))
    model = mod.TinySegNet(model_cfg)
    model.train()
    opt = torch.optim.SGD(model.parameters(), lr=tc.base_lr, momentum=tc.momentum, weight_decay=tc.weight_decay)

    if tc.ohem_thresh is not None:
        min_kept = tc.ohem_min_kept or max(1, tc.batch_l * tc.train_size * tc.train_size // 16)
        sup_loss_fn = lambda lg, tg: ohem_ce(lg, tg, tc.ohem_thresh, min_kept, index.ignore_index)
    else:
        sup_loss_fn = None

    # schedule length depends only on the unlabeled pool; pad it for
    # supervised-only runs so every variant sees the same step count
    sched_u = unlabeled_ids if unlabeled_ids else list(labeled_ids)
    steps_per_epoch = math.ceil(len(sched_u) / tc.batch_u)
    total_iters = tc.total_epochs * steps_per_epoch
    sched_rng = rngs.numpy("schedule")

    # decoded images are tiny at desk scale; cache them up front
    image_cache = {i: dat.load_image(index.image_path(i)) for i in set(labeled_ids) | set(sched_u)}
    mask_cache = {i: dat.load_mask(index.mask_path(i)) for i in labeled_ids}

    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    ckpt_path = os.path.join(out_dir, "last.pt")
    # seed checkpoint so an abort at any point leaves a loadable last-good state
    mod.save_checkpoint(model, ckpt_path, extra_meta={"epoch": -1, "step": 0})
    history = []
    step = 0
    with open(metrics_path, "w") as log:
        for epoch in range(tc.total_epochs):
            epoch_seed = int(sched_rng.integers(2**63))
            schedule = dat.epoch_batches(labeled_ids, sched_u, tc.batch_l, tc.batch_u, epoch_seed)
            for lbatch, ubatch in schedule:
                lr = poly_lr(tc.base_lr, step, total_iters, tc.poly_power)
                for group in opt.param_groups:
                    group["lr"] = lr
                l_images = [image_cache[i] for i in lbatch]
                l_masks = np.stack([mask_cache[i] for i in lbatch])
                u_images = [image_cache[i] for i in ubatch] if needs_u else []
                opt.zero_grad()
                try:
                    res = cons.train_step(
                        model,
                        (l_images, l_masks),
                        u_images,
                        run_cfg.variant,
                        run_cfg.aug,
                        run_cfg.perturb,
                        rngs,
                        sup_loss_fn=sup_loss_fn,
                        ignore_index=index.ignore_index,
                    )
                    res.loss_total.backward()
                except NumericError:
                    log.flush()
                    raise
                opt.step()
                rec = {
                    "step": step,
                    "epoch": epoch,
                    "lr": lr,
                    "loss_s": float(res.loss_s.item()),
                    "loss_u": float(res.loss_u.item()),
                    "loss_total": float(res.loss_total.item()),
                    "mask_ratio": float(res.mask_ratio),
                }
                log.write(json.dumps(rec) + "\n")
                history.append(rec)
                step += 1
            if (epoch + 1) % tc.checkpoint_every == 0 or epoch == tc.total_epochs - 1:
                mod.save_checkpoint(model, ckpt_path, extra_meta={"epoch": epoch, "step": step})
    return ckpt_path, metrics_path, history
