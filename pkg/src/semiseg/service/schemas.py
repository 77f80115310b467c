"""Request/response models for the HTTP surface."""

from __future__ import annotations

from pydantic import BaseModel, Field


class HealthResponse(BaseModel):
    status: str
    version: str


class SynthRequest(BaseModel):
    out_dir: str
    items: int = 520
    size: int = 64
    classes: int = 3
    seed: int = 0
    hq_fraction: float = Field(default=0.25, ge=0.0, le=1.0)
    overwrite: bool = False


class SynthResponse(BaseModel):
    out_dir: str
    n_items: int
    num_classes: int


class SplitRequest(BaseModel):
    data_dir: str
    protocol: str = "blended"
    n_labeled: float = 8
    seed: int = 0
    out_dir: str | None = None


class SplitResponse(BaseModel):
    split_dir: str
    n_labeled: int
    n_unlabeled: int


class TrainRequest(BaseModel):
    data_dir: str
    split_dir: str
    out_dir: str
    config: dict = Field(default_factory=dict)
    command: str | None = None


class TrainResponse(BaseModel):
    out_dir: str
    checkpoint: str
    metrics: str
    steps: int
    final: dict
    config_hash: str


class EvalRequest(BaseModel):
    data_dir: str
    checkpoint: str
    split_dir: str | None = None
    subset: str = "all"  # all | labeled | unlabeled
    window: int | None = None
    stride: int | None = None
    report: str | None = None


class EvalResponse(BaseModel):
    miou: float
    per_class_iou: list[float | None]
    n_items: int
    report: str | None = None
    extras: dict = Field(default_factory=dict)
