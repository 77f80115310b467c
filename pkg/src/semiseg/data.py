"""Dataset indexing, split protocols, batch scheduling, synthetic shapes.

The synthetic generator stands in for the real benchmarks at desk scale:
each image carries one colored shape per foreground class (rectangle,
circle, triangle, cycling with the class index) on a textured background,
with illumination jitter and pixel noise so the task is not solvable by a
constant color lookup. Masks are exact rasterizations; the shape parameters
are recorded in meta.json so tests can re-rasterize independently.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .errors import ArgumentError

IGNORE_INDEX = 255

SPLIT_PROTOCOLS = ("original_only", "blended", "prioritized_high_quality", "fraction")

SHAPE_KINDS = ("rectangle", "circle", "triangle")


@dataclass
class DatasetItem:
    image: str  # relative to dataset root
    mask: str | None = None
    hq: bool = False


@dataclass
class DatasetIndex:
    root: str
    items: list[DatasetItem]
    num_classes: int
    ignore_index: int = IGNORE_INDEX

    def __post_init__(self):
        paths = [it.image for it in self.items]
        if len(set(paths)) != len(paths):
            raise ArgumentError("duplicate image paths in index")

    def __len__(self):
        return len(self.items)

    def image_path(self, i: int) -> str:
        return os.path.join(self.root, self.items[i].image)

    def mask_path(self, i: int) -> str | None:
        m = self.items[i].mask
        return None if m is None else os.path.join(self.root, m)

    @classmethod
    def from_dir(cls, root: str, num_classes: int | None = None) -> "DatasetIndex":
        meta_path = os.path.join(root, "meta.json")
        if os.path.exists(meta_path):
            with open(meta_path) as f:
                meta = json.load(f)
            items = [
                DatasetItem(image=it["image"], mask=it.get("mask"), hq=bool(it.get("hq", False)))
                for it in meta["items"]
            ]
            return cls(root, items, meta["num_classes"], meta.get("ignore_index", IGNORE_INDEX))
        img_dir = os.path.join(root, "images")
        if not os.path.isdir(img_dir):
            raise ArgumentError(f"no dataset at {root}: missing meta.json and images/")
        if num_classes is None:
            raise ArgumentError("num_classes required when the dataset has no meta.json")
        items = []
        for name in sorted(os.listdir(img_dir)):
            mask_rel = os.path.join("masks", name)
            has_mask = os.path.exists(os.path.join(root, mask_rel))
            items.append(DatasetItem(image=os.path.join("images", name), mask=mask_rel if has_mask else None))
        return cls(root, items, num_classes)


@dataclass
class SplitSpec:
    protocol: str = "blended"
    n_labeled: float = 8
    seed: int = 0

    def validate(self):
        if self.protocol not in SPLIT_PROTOCOLS:
            raise ArgumentError(f"unknown protocol {self.protocol!r}, expected one of {SPLIT_PROTOCOLS}")
        if self.protocol == "fraction":
            if not (0 < self.n_labeled <= 1):
                raise ArgumentError("fraction protocol needs n_labeled in (0, 1]")
        elif self.n_labeled < 1 or self.n_labeled != int(self.n_labeled):
            raise ArgumentError("n_labeled must be a positive integer")


def make_splits(index: DatasetIndex, spec: SplitSpec) -> tuple[list[int], list[int]]:
    """Pick labeled item ids per protocol; everything else is the unlabeled pool.

    original_only restricts the labeled pool to items flagged high quality;
    prioritized_high_quality fills from flagged items first, then the rest;
    fraction interprets n_labeled as a fraction of the index, rounded half up.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    all_ids = list(range(len(index)))
    hq_ids = [i for i in all_ids if index.items[i].hq]
    other_ids = [i for i in all_ids if not index.items[i].hq]

    if spec.protocol == "fraction":
        n = int(math.floor(spec.n_labeled * len(index) + 0.5))
        pool = all_ids
    elif spec.protocol == "original_only":
        n = int(spec.n_labeled)
        pool = hq_ids
    else:
        n = int(spec.n_labeled)
        pool = all_ids
    if n > len(pool):
        raise ArgumentError(f"n_labeled = {n} exceeds eligible pool of {len(pool)} items")

    if spec.protocol == "prioritized_high_quality":
        take_hq = min(n, len(hq_ids))
        labeled = list(rng.permutation(hq_ids)[:take_hq].astype(int))
        if take_hq < n:
            labeled += list(rng.permutation(other_ids)[: n - take_hq].astype(int))
    else:
        labeled = list(rng.permutation(pool)[:n].astype(int))
    labeled = sorted(int(i) for i in labeled)
    taken = set(labeled)
    unlabeled = [i for i in all_ids if i not in taken]
    return labeled, unlabeled


def write_split_files(index: DatasetIndex, labeled: list[int], unlabeled: list[int], out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "labeled.txt"), "w") as f:
        for i in labeled:
            it = index.items[i]
            if it.mask is None:
                raise ArgumentError(f"labeled item {it.image} has no mask")
            f.write(f"{it.image} {it.mask}\n")
    with open(os.path.join(out_dir, "unlabeled.txt"), "w") as f:
        for i in unlabeled:
            f.write(f"{index.items[i].image}\n")


def read_split_files(split_dir: str) -> tuple[list[tuple[str, str]], list[str]]:
    with open(os.path.join(split_dir, "labeled.txt")) as f:
        labeled = [tuple(line.split()) for line in f.read().splitlines() if line.strip()]
    with open(os.path.join(split_dir, "unlabeled.txt")) as f:
        unlabeled = [line.strip() for line in f.read().splitlines() if line.strip()]
    return labeled, unlabeled


def epoch_batches(
    labeled: list, unlabeled: list, b_l: int, b_u: int, seed: int
) -> list[tuple[list, list]]:
    """Schedule of (labeled ids, unlabeled ids) covering the unlabeled set once.

    Step count is ceil(U / b_u); both streams are padded by reshuffled
    whole-list repetition, so every unlabeled id shows up at least once and
    labeled oversampling stays balanced across repeats.
    """
    if b_l < 1 or b_u < 1:
        raise ArgumentError("batch sizes must be >= 1")
    if not labeled or not unlabeled:
        raise ArgumentError("labeled and unlabeled lists must be non-empty")
    rng = np.random.default_rng(seed)
    steps = math.ceil(len(unlabeled) / b_u)

    def stream(ids, need):
        out = []
        while len(out) < need:
            out.extend(rng.permutation(len(ids)).astype(int))
        return [ids[j] for j in out[:need]]

    ls = stream(labeled, steps * b_l)
    us = stream(unlabeled, steps * b_u)
    return [(ls[k * b_l : (k + 1) * b_l], us[k * b_u : (k + 1) * b_u]) for k in range(steps)]


def load_image(path: str) -> np.ndarray:
    """PNG -> float32 CHW in [0, 1]."""
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def load_mask(path: str) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.int64)


# --- synthetic shapes ---


def rasterize_shape(side: int, shape: dict) -> np.ndarray:
    """Boolean inside-mask for one shape, evaluated at pixel centers."""
    kind = shape["kind"]
    yy, xx = np.mgrid[0:side, 0:side]
    cy, cx = yy + 0.5, xx + 0.5
    if kind == "rectangle":
        top, left, h, w = shape["top"], shape["left"], shape["h"], shape["w"]
        return (yy >= top) & (yy < top + h) & (xx >= left) & (xx < left + w)
    if kind == "circle":
        return (cx - shape["cx"]) ** 2 + (cy - shape["cy"]) ** 2 <= shape["r"] ** 2
    if kind == "triangle":
        (x0, y0), (x1, y1), (x2, y2) = shape["vertices"]
        d0 = (cx - x0) * (y1 - y0) - (cy - y0) * (x1 - x0)
        d1 = (cx - x1) * (y2 - y1) - (cy - y1) * (x2 - x1)
        d2 = (cx - x2) * (y0 - y2) - (cy - y2) * (x0 - x2)
        return ((d0 >= 0) & (d1 >= 0) & (d2 >= 0)) | ((d0 <= 0) & (d1 <= 0) & (d2 <= 0))
    raise ArgumentError(f"unknown shape kind {kind!r}")


def _hsv(hue: float, sat: float, val: float) -> np.ndarray:
    i = int(hue * 6) % 6
    f = hue * 6 - int(hue * 6)
    p, q, t = val * (1 - sat), val * (1 - sat * f), val * (1 - sat * (1 - f))
    rgb = [(val, t, p), (q, val, p), (p, val, t), (p, q, val), (t, p, val), (val, p, q)][i]
    return np.array(rgb, dtype=np.float64)


def _class_color(c: int, k: int, rng: np.random.Generator) -> np.ndarray:
    # tight hue band per class: a handful of labeled images covers class
    # identity, so the appearance spread a small sample misses comes from the
    # global looks applied in synth_item rather than from class color luck
    hue = (c - 1) / max(k - 1, 1)
    jitter = min(0.15, 0.22 / max(k - 1, 1))
    hue = (hue + rng.uniform(-jitter, jitter)) % 1.0
    return _hsv(hue, rng.uniform(0.55, 0.95), rng.uniform(0.5, 0.95))


def _sample_shape(kind: str, side: int, rng: np.random.Generator) -> dict:
    margin = max(2, side // 16)
    lo, hi = max(4, side // 10), max(6, int(side * 0.42))
    if kind == "rectangle":
        h = int(rng.integers(lo, hi + 1))
        w = int(rng.integers(lo, hi + 1))
        top = int(rng.integers(margin, side - margin - h + 1))
        left = int(rng.integers(margin, side - margin - w + 1))
        return {"kind": kind, "top": top, "left": left, "h": h, "w": w}
    if kind == "circle":
        r = float(rng.uniform(lo / 2, hi / 2))
        cx = float(rng.uniform(margin + r, side - margin - r))
        cy = float(rng.uniform(margin + r, side - margin - r))
        return {"kind": kind, "cx": cx, "cy": cy, "r": r}
    # triangle: sample vertices in a box until the area is non-degenerate
    ext = int(rng.integers(lo, hi + 1))
    top = float(rng.uniform(margin, side - margin - ext))
    left = float(rng.uniform(margin, side - margin - ext))
    while True:
        vs = [(left + float(rng.uniform(0, ext)), top + float(rng.uniform(0, ext))) for _ in range(3)]
        area = abs(
            (vs[1][0] - vs[0][0]) * (vs[2][1] - vs[0][1]) - (vs[2][0] - vs[0][0]) * (vs[1][1] - vs[0][1])
        ) / 2
        if area >= 0.25 * ext * ext:
            return {"kind": "triangle", "vertices": [[round(x, 4), round(y, 4)] for x, y in vs]}


def _fill_shape(img: np.ndarray, inside: np.ndarray, c1: np.ndarray, c2: np.ndarray, rng: np.random.Generator):
    """Paint a shape with a linear gradient between two colors."""
    side = img.shape[-1]
    theta = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:side, 0:side]
    proj = np.cos(theta) * xx + np.sin(theta) * yy
    vals = proj[inside]
    lo, hi = vals.min(), vals.max()
    w = (proj - lo) / max(hi - lo, 1e-9)
    for ch in range(3):
        img[ch][inside] = (c1[ch] * (1 - w) + c2[ch] * w)[inside]


def synth_item(side: int, k: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, list[dict]]:
    """One image/mask pair plus the shape records that generated it."""
    mask = np.zeros((side, side), dtype=np.uint8)
    base = rng.uniform(0.12, 0.45)
    sigma = max(2.0, side / 16)
    tex = gaussian_filter(rng.standard_normal((side, side)), sigma=sigma, mode="reflect")
    tex = tex / (np.abs(tex).max() + 1e-9) * 0.1
    img = np.empty((3, side, side), dtype=np.float64)
    tint = rng.uniform(-0.08, 0.08, size=3)
    for ch in range(3):
        # shared texture plus a per-channel field: colored low-contrast blotches
        cht = gaussian_filter(rng.standard_normal((side, side)), sigma=sigma, mode="reflect")
        cht = cht / (np.abs(cht).max() + 1e-9) * 0.06
        img[ch] = base + tint[ch] + tex + cht

    shapes = []
    # low-saturation distractor blobs stay class 0; drawn before the real
    # shapes so foreground pixel counts remain exact
    for _ in range(int(rng.integers(1, 5))):
        shape = _sample_shape(SHAPE_KINDS[int(rng.integers(0, 3))], side, rng)
        shape["cls"] = 0
        inside = rasterize_shape(side, shape)
        color = _hsv(rng.uniform(), rng.uniform(0.04, 0.25), rng.uniform(0.25, 0.9))
        for ch in range(3):
            img[ch][inside] = color[ch]
        shapes.append(shape)
    for c in range(1, k):
        shape = _sample_shape(SHAPE_KINDS[(c - 1) % len(SHAPE_KINDS)], side, rng)
        shape["cls"] = c
        inside = rasterize_shape(side, shape)
        _fill_shape(img, inside, _class_color(c, k, rng), _class_color(c, k, rng), rng)
        mask[inside] = c
        shapes.append(shape)

    gx, gy = rng.uniform(-0.4, 0.4, size=2)
    ramp = 1.0 + gx * (np.linspace(0, 1, side)[None, :] - 0.5) + gy * (np.linspace(0, 1, side)[:, None] - 0.5)
    img *= ramp[None]
    img = np.clip(img, 0.0, 1.0) ** rng.uniform(0.6, 1.6)
    # global appearance domain: mostly plain, with a tail of discrete looks
    # (dimming, washout, channel crush, haze) that a small labeled sample
    # rarely covers while a large unlabeled pool does; every look preserves
    # hue identity so object color stays a usable cue
    domain = int(rng.integers(0, 9))
    if domain == 3:
        img *= rng.uniform(0.25, 0.45)
    elif domain == 4:
        img = 1.0 - (1.0 - img) * rng.uniform(0.35, 0.55)
    elif domain in (5, 6, 7):
        img[domain - 5] *= rng.uniform(0.15, 0.4)
    elif domain == 8:
        alpha = rng.uniform(0.45, 0.7)
        img = (1.0 - alpha) * img + alpha * rng.uniform(0.35, 0.65)
    img += rng.normal(0.0, 0.05, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    return img.astype(np.float32), mask, shapes


def synth_dataset(
    out_dir: str,
    n_items: int,
    side: int,
    k: int,
    seed: int,
    hq_fraction: float = 0.25,
) -> DatasetIndex:
    """Materialize a synthetic dataset (images/, masks/, meta.json) on disk."""
    if k < 2:
        raise ArgumentError(f"need at least 2 classes (background + 1 shape), got {k}")
    if side < 16:
        raise ArgumentError(f"side must be >= 16, got {side}")
    if n_items < 1:
        raise ArgumentError("n_items must be >= 1")
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)
    rng = np.random.default_rng(seed)
    hq_flags = rng.random(n_items) < hq_fraction
    width = len(str(max(n_items - 1, 1)))
    items_meta = []
    for i in range(n_items):
        img, mask, shapes = synth_item(side, k, rng)
        name = f"{i:0{width}d}.png"
        arr = (img.transpose(1, 2, 0) * 255.0).round().astype(np.uint8)
        Image.fromarray(arr).save(os.path.join(out_dir, "images", name))
        Image.fromarray(mask, mode="L").save(os.path.join(out_dir, "masks", name))
        items_meta.append(
            {
                "image": f"images/{name}",
                "mask": f"masks/{name}",
                "hq": bool(hq_flags[i]),
                "shapes": shapes,
            }
        )
    meta = {
        "num_classes": k,
        "ignore_index": IGNORE_INDEX,
        "side": side,
        "n_items": n_items,
        "seed": seed,
        "items": items_meta,
    }
    with open(os.path.join(out_dir, "meta.json"), "w") as f:
        json.dump(meta, f, indent=1, sort_keys=True)
    return DatasetIndex.from_dir(out_dir)
