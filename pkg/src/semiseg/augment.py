"""Image-level weak and strong perturbation pipelines.

Weak perturbations are label-preserving geometry (random rescale, crop to a
fixed training size, horizontal flip). Strong perturbations are photometric
(color jitter, grayscale, invert, solarize, blur) plus CutMix across a batch.
Every sampled
transform is captured in an AugRecord so the exact output can be replayed
bit-for-bit, and so CutMix boxes can later be applied to pseudo-label masks.

Images are numpy float arrays shaped (C, H, W) with values in [0, 1]; masks
are integer arrays shaped (H, W).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ArgumentError, ConfigurationError

IGNORE_INDEX = 255

_JITTER_OPS = ("brightness", "contrast", "saturation", "hue")


@dataclass
class AugPipelineConfig:
    train_size: int = 64
    scale_range: tuple[float, float] = (0.5, 2.0)
    hflip_prob: float = 0.5
    # magnitudes for brightness / contrast / saturation / hue
    color_jitter_params: tuple[float, float, float, float] = (0.5, 0.5, 0.5, 0.25)
    grayscale_prob: float = 0.2
    # photometric negatives break hue identity between classes, which tiny
    # nets lean on; available for hue-free settings but off by default
    invert_prob: float = 0.0
    solarize_prob: float = 0.0
    blur_prob: float = 0.5
    blur_sigma_range: tuple[float, float] = (0.1, 2.0)
    cutmix_prob: float = 0.5
    cutmix_area_range: tuple[float, float] = (0.1, 0.5)
    # ablation switch: when off, the "strong" view is the weak view unchanged
    strong_enabled: bool = True

    def validate(self) -> None:
        if self.train_size <= 0:
            raise ConfigurationError(f"train_size must be positive, got {self.train_size}")
        lo, hi = self.scale_range
        if not (0.0 < lo <= hi):
            raise ConfigurationError(f"scale_range must be a positive interval, got {self.scale_range}")
        for name in ("hflip_prob", "grayscale_prob", "invert_prob", "solarize_prob", "blur_prob", "cutmix_prob"):
            p = getattr(self, name)
            if not (0.0 <= p <= 1.0):
                raise ConfigurationError(f"{name} must be in [0, 1], got {p}")
        if any(m < 0 for m in self.color_jitter_params):
            raise ConfigurationError("color jitter magnitudes must be non-negative")
        alo, ahi = self.cutmix_area_range
        if not (0.0 <= alo <= ahi <= 1.0):
            raise ConfigurationError(f"cutmix_area_range must be within [0, 1], got {self.cutmix_area_range}")


@dataclass
class AugRecord:
    """Serialized description of the random perturbations applied to one sample."""

    scale: float = 1.0
    crop_box: tuple[int, int, int, int] | None = None  # (top, left, height, width)
    hflip: bool = False
    color_ops: list[tuple[str, float]] = field(default_factory=list)
    cutmix_box: tuple[int, int, int, int] | None = None  # (top, left, height, width)
    cutmix_partner: int | None = None
    cutmix_skipped: bool = False

    def to_json(self) -> str:
        d = {
            "scale": self.scale,
            "crop_box": list(self.crop_box) if self.crop_box is not None else None,
            "hflip": self.hflip,
            "color_ops": [[name, mag] for name, mag in self.color_ops],
            "cutmix_box": list(self.cutmix_box) if self.cutmix_box is not None else None,
            "cutmix_partner": self.cutmix_partner,
            "cutmix_skipped": self.cutmix_skipped,
        }
        return json.dumps(d, separators=(", ", ": "))

    @classmethod
    def from_json(cls, line: str) -> "AugRecord":
        d = json.loads(line)
        return cls(
            scale=float(d["scale"]),
            crop_box=tuple(d["crop_box"]) if d.get("crop_box") is not None else None,
            hflip=bool(d["hflip"]),
            color_ops=[(name, float(mag)) for name, mag in d.get("color_ops", [])],
            cutmix_box=tuple(d["cutmix_box"]) if d.get("cutmix_box") is not None else None,
            cutmix_partner=d.get("cutmix_partner"),
            cutmix_skipped=bool(d.get("cutmix_skipped", False)),
        )


def records_to_lines(records: list[AugRecord]) -> list[str]:
    """One JSON record per line, for debug dumps."""
    return [r.to_json() for r in records]


# ---------------------------------------------------------------------------
# resampling
#
# Half-pixel-center convention on both axes: destination pixel d maps to
# source coordinate (d + 0.5) * in/out - 0.5 (bilinear) or the source cell
# containing (d + 0.5) * in/out (nearest). out == in is an exact identity.
# ---------------------------------------------------------------------------


def _bilinear_axis(in_size: int, out_size: int):
    c = (np.arange(out_size, dtype=np.float64) + 0.5) * (in_size / out_size) - 0.5
    c = np.clip(c, 0.0, in_size - 1.0)
    i0 = np.floor(c).astype(np.int64)
    i1 = np.minimum(i0 + 1, in_size - 1)
    frac = c - i0
    return i0, i1, frac


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize a (C, H, W) image with bilinear interpolation."""
    if image.ndim != 3:
        raise ArgumentError(f"expected (C, H, W) image, got shape {image.shape}")
    _, h, w = image.shape
    y0, y1, fy = _bilinear_axis(h, out_h)
    x0, x1, fx = _bilinear_axis(w, out_w)
    top = image[:, y0][:, :, x0] * (1.0 - fx) + image[:, y0][:, :, x1] * fx
    bot = image[:, y1][:, :, x0] * (1.0 - fx) + image[:, y1][:, :, x1] * fx
    out = top * (1.0 - fy)[:, None] + bot * fy[:, None]
    return out.astype(image.dtype, copy=False)


def resize_nearest(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize a (H, W) index mask with nearest-neighbor sampling."""
    if mask.ndim != 2:
        raise ArgumentError(f"expected (H, W) mask, got shape {mask.shape}")
    h, w = mask.shape
    ys = np.clip(np.floor((np.arange(out_h) + 0.5) * (h / out_h)).astype(np.int64), 0, h - 1)
    xs = np.clip(np.floor((np.arange(out_w) + 0.5) * (w / out_w)).astype(np.int64), 0, w - 1)
    return mask[ys][:, xs]


# ---------------------------------------------------------------------------
# weak perturbation: rescale + crop + flip
# ---------------------------------------------------------------------------


def weak_augment(
    image: np.ndarray,
    mask: np.ndarray | None,
    cfg: AugPipelineConfig,
    rng: np.random.Generator,
    ignore_index: int = IGNORE_INDEX,
):
    """Sample and apply the weak geometric pipeline.

    Returns (image, mask, record) where the output spatial size is
    cfg.train_size square. Crops falling outside the rescaled image are
    padded with zeros (image) and ignore_index (mask).
    """
    cfg.validate()
    if image.ndim != 3 or image.shape[1] < 1 or image.shape[2] < 1:
        raise ArgumentError(f"expected non-empty (C, H, W) image, got shape {image.shape}")
    scale = float(rng.uniform(cfg.scale_range[0], cfg.scale_range[1]))
    _, h, w = image.shape
    rh = max(1, int(round(h * scale)))
    rw = max(1, int(round(w * scale)))
    ts = cfg.train_size
    top = int(rng.integers(0, max(rh - ts, 0) + 1))
    left = int(rng.integers(0, max(rw - ts, 0) + 1))
    hflip = bool(rng.random() < cfg.hflip_prob)
    record = AugRecord(scale=scale, crop_box=(top, left, ts, ts), hflip=hflip)
    out_img, out_mask = apply_weak(image, mask, record, ignore_index=ignore_index)
    return out_img, out_mask, record


def apply_weak(
    image: np.ndarray,
    mask: np.ndarray | None,
    record: AugRecord,
    ignore_index: int = IGNORE_INDEX,
):
    """Replay the geometric part of an AugRecord on (image, mask)."""
    _, h, w = image.shape
    rh = max(1, int(round(h * record.scale)))
    rw = max(1, int(round(w * record.scale)))
    if (rh, rw) == (h, w) and record.scale == 1.0:
        img = image
        msk = mask
    else:
        img = resize_bilinear(image, rh, rw)
        msk = resize_nearest(mask, rh, rw) if mask is not None else None
    top, left, ch, cw = record.crop_box
    out_img = np.zeros((image.shape[0], ch, cw), dtype=image.dtype)
    out_mask = None
    if msk is not None:
        out_mask = np.full((ch, cw), ignore_index, dtype=msk.dtype)
    y1 = min(top + ch, rh)
    x1 = min(left + cw, rw)
    if y1 > top and x1 > left:
        out_img[:, : y1 - top, : x1 - left] = img[:, top:y1, left:x1]
        if out_mask is not None:
            out_mask[: y1 - top, : x1 - left] = msk[top:y1, left:x1]
    if record.hflip:
        out_img = out_img[:, :, ::-1].copy()
        if out_mask is not None:
            out_mask = out_mask[:, ::-1].copy()
    return out_img, out_mask


# ---------------------------------------------------------------------------
# strong perturbation: photometric ops (+ CutMix at batch level)
# ---------------------------------------------------------------------------


def _luma(image: np.ndarray) -> np.ndarray:
    if image.shape[0] == 3:
        return 0.299 * image[0] + 0.587 * image[1] + 0.114 * image[2]
    return image.mean(axis=0)


def _hue_matrix(angle: float) -> np.ndarray:
    # rotation about the achromatic (1,1,1) axis
    c = math.cos(angle)
    s = math.sin(angle)
    a = c + (1.0 - c) / 3.0
    b = (1.0 - c) / 3.0 - s / math.sqrt(3.0)
    d = (1.0 - c) / 3.0 + s / math.sqrt(3.0)
    return np.array([[a, b, d], [d, a, b], [b, d, a]])


def apply_color_op(image: np.ndarray, name: str, magnitude: float) -> np.ndarray:
    """Apply one recorded photometric op. `magnitude` is the realized value

    (multiplicative factor, hue angle in radians, or blur sigma), not the
    config-level jitter bound.
    """
    if name == "brightness":
        out = image * magnitude
    elif name == "contrast":
        m = float(_luma(image).mean())
        out = (image - m) * magnitude + m
    elif name == "saturation":
        gray = _luma(image)[None]
        out = gray + (image - gray) * magnitude
    elif name == "hue":
        if image.shape[0] != 3 or magnitude == 0.0:
            return image.copy()
        mat = _hue_matrix(magnitude)
        out = np.einsum("ij,jhw->ihw", mat, image)
    elif name == "grayscale":
        out = np.broadcast_to(_luma(image)[None], image.shape).copy()
    elif name == "invert":
        out = 1.0 - image
    elif name == "solarize":
        # photometric negative above the threshold only
        out = np.where(image >= magnitude, 1.0 - image, image)
    elif name == "blur":
        sig = (0.0, magnitude, magnitude)
        return gaussian_filter(image, sigma=sig, mode="reflect").astype(image.dtype, copy=False)
    else:
        raise ArgumentError(f"unknown color op {name!r}")
    return np.clip(out, 0.0, 1.0).astype(image.dtype, copy=False)


def apply_color_ops(image: np.ndarray, record: AugRecord) -> np.ndarray:
    out = image
    for name, mag in record.color_ops:
        out = apply_color_op(out, name, mag)
    return out if out is not image else image.copy()


def strong_color(image: np.ndarray, cfg: AugPipelineConfig, rng: np.random.Generator):
    """Sample and apply the photometric strong pipeline.

    The four jitters run in a random order with factors drawn from their
    configured magnitudes; grayscale, invert, solarize and blur trigger with
    their own probabilities. Geometry is untouched. Returns (image, record).
    """
    cfg.validate()
    b, c, s, h = cfg.color_jitter_params
    order = rng.permutation(4)
    ops: list[tuple[str, float]] = []
    for idx in order:
        name = _JITTER_OPS[idx]
        if name == "hue":
            mag = float(rng.uniform(-h, h)) * 2.0 * math.pi
        else:
            bound = {"brightness": b, "contrast": c, "saturation": s}[name]
            mag = float(rng.uniform(max(0.0, 1.0 - bound), 1.0 + bound))
        ops.append((name, mag))
    if rng.random() < cfg.grayscale_prob:
        ops.append(("grayscale", 1.0))
    if rng.random() < cfg.invert_prob:
        ops.append(("invert", 1.0))
    if rng.random() < cfg.solarize_prob:
        ops.append(("solarize", float(rng.uniform(0.5, 1.0))))
    if rng.random() < cfg.blur_prob:
        ops.append(("blur", float(rng.uniform(*cfg.blur_sigma_range))))
    record = AugRecord(color_ops=ops)
    return apply_color_ops(image, record), record


def cutmix_batch(
    images: np.ndarray,
    masks: np.ndarray | None,
    prob: float,
    rng: np.random.Generator,
    records: list[AugRecord] | None = None,
    area_range: tuple[float, float] = (0.1, 0.5),
):
    """Paste a random box from the next sample (roll-by-one pairing) into each

    triggering sample, identically for image and mask. All source pixels come
    from the pre-mix batch. With fewer than 2 samples, mixing is skipped and
    flagged on the records. Returns (images, masks, records).
    """
    n = len(images)
    if records is None:
        records = [AugRecord() for _ in range(n)]
    if n < 2:
        if prob > 0:
            for r in records:
                r.cutmix_skipped = True
        return images.copy(), None if masks is None else masks.copy(), records
    _, _, hh, ww = images.shape
    for i in range(n):
        if rng.random() >= prob:
            continue
        area = float(rng.uniform(*area_range))
        aspect = float(rng.uniform(0.5, 2.0))
        bh = int(round(math.sqrt(area * hh * ww / aspect)))
        bw = int(round(math.sqrt(area * hh * ww * aspect)))
        bh = min(max(bh, 1), hh)
        bw = min(max(bw, 1), ww)
        top = int(rng.integers(0, hh - bh + 1))
        left = int(rng.integers(0, ww - bw + 1))
        records[i].cutmix_box = (top, left, bh, bw)
        records[i].cutmix_partner = (i + 1) % n
    out_images = apply_cutmix_boxes(images, records)
    out_masks = apply_cutmix_boxes(masks, records) if masks is not None else None
    return out_images, out_masks, records


def apply_cutmix_boxes(batch: np.ndarray, records: list[AugRecord]) -> np.ndarray:
    """Replay recorded CutMix boxes on a batch whose last two axes are (H, W).

    Works for image batches (N, C, H, W) and label/validity batches (N, H, W).
    """
    out = batch.copy()
    for i, rec in enumerate(records):
        if rec.cutmix_box is None or rec.cutmix_partner is None:
            continue
        top, left, bh, bw = rec.cutmix_box
        src = batch[rec.cutmix_partner]
        out[i][..., top : top + bh, left : left + bw] = src[..., top : top + bh, left : left + bw]
    return out


def strong_augment_batch(images: np.ndarray, cfg: AugPipelineConfig, rng: np.random.Generator):
    """One full strong view of a weakly augmented batch: per-sample color ops

    followed by batch CutMix. Returns (images, records).
    """
    if not cfg.strong_enabled:
        return images.copy(), [AugRecord(cutmix_skipped=cfg.cutmix_prob > 0) for _ in images]
    colored = np.empty_like(images)
    records = []
    for i in range(len(images)):
        colored[i], rec = strong_color(images[i], cfg, rng)
        records.append(rec)
    mixed, _, records = cutmix_batch(
        colored, None, cfg.cutmix_prob, rng, records=records, area_range=cfg.cutmix_area_range
    )
    return mixed, records


def sample_strong_views(
    weak_image: np.ndarray,
    n_views: int,
    cfg: AugPipelineConfig,
    rng: np.random.Generator,
):
    """Draw n_views independent strong views of one weak view.

    Each view gets its own fresh draws (not copies). CutMix needs a batch, so
    on a single image it is skipped and flagged in the record. Returns a list
    of (image, record) pairs.
    """
    if n_views <= 0:
        raise ArgumentError(f"n_views must be >= 1, got {n_views}")
    views = []
    for _ in range(n_views):
        img, rec = strong_color(weak_image, cfg, rng)
        if cfg.cutmix_prob > 0:
            rec.cutmix_skipped = True
        views.append((img, rec))
    return views
