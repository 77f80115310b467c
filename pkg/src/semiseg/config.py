"""Run configuration: YAML section files, canonical hashing, run manifests.

A run config has five sections (train, variant, aug, perturb, model), each
mirroring one dataclass. The config hash is taken over the canonical JSON
form (sorted keys), so semantically identical files hash identically no
matter how their keys are ordered.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import time
from dataclasses import dataclass, field

import yaml

from . import __version__
from .augment import AugPipelineConfig
from .consistency import VariantConfig
from .errors import ConfigurationError
from .featperturb import FeaturePerturbSpec
from .model import TinyNetConfig
from .train import TrainConfig

_SECTIONS = {
    "train": TrainConfig,
    "variant": VariantConfig,
    "aug": AugPipelineConfig,
    "perturb": FeaturePerturbSpec,
    "model": TinyNetConfig,
}


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    variant: VariantConfig = field(default_factory=lambda: VariantConfig.for_variant("unimatch"))
    aug: AugPipelineConfig = field(default_factory=AugPipelineConfig)
    perturb: FeaturePerturbSpec = field(default_factory=FeaturePerturbSpec)
    model: TinyNetConfig = field(default_factory=TinyNetConfig)

    def validate(self):
        self.train.validate()
        self.variant.validate()
        self.aug.validate()
        self.perturb.validate()


def _to_plain(value):
    if isinstance(value, tuple):
        return [_to_plain(v) for v in value]
    if isinstance(value, list):
        return [_to_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _to_plain(v) for k, v in value.items()}
    return value


def config_to_dict(cfg: RunConfig) -> dict:
    return {name: _to_plain(dataclasses.asdict(getattr(cfg, name))) for name in _SECTIONS}


def _build_section(cls, values: dict, section: str):
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(values) - set(known)
    if unknown:
        raise ConfigurationError(f"unknown keys in [{section}]: {sorted(unknown)}")
    coerced = {}
    for key, val in values.items():
        default = known[key].default
        if isinstance(val, list) and (isinstance(default, tuple) or key in ("widths",)):
            val = tuple(val)
        coerced[key] = val
    if cls is VariantConfig:
        # resolve the named preset first so stream counts default per variant
        name = coerced.pop("variant", "unimatch")
        return VariantConfig.for_variant(name, **coerced)
    return cls(**coerced)


def config_from_dict(d: dict) -> RunConfig:
    unknown = set(d) - set(_SECTIONS)
    if unknown:
        raise ConfigurationError(f"unknown config sections: {sorted(unknown)}")
    kwargs = {}
    for name, cls in _SECTIONS.items():
        kwargs[name] = _build_section(cls, d.get(name, {}) or {}, name)
    cfg = RunConfig(**kwargs)
    cfg.validate()
    return cfg


def load_config(path: str) -> RunConfig:
    with open(path) as f:
        raw = yaml.safe_load(f) or {}
    if not isinstance(raw, dict):
        raise ConfigurationError(f"config root must be a mapping, got {type(raw).__name__}")
    return config_from_dict(raw)


def save_config(cfg: RunConfig, path: str) -> None:
    with open(path, "w") as f:
        yaml.safe_dump(config_to_dict(cfg), f, sort_keys=True)


def config_hash(cfg: RunConfig | dict) -> str:
    d = config_to_dict(cfg) if isinstance(cfg, RunConfig) else _to_plain(cfg)
    canon = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def write_manifest(out_dir: str, cfg: RunConfig, command: str) -> dict:
    """Start-of-run manifest; call finish_manifest when the run completes."""
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "config_hash": config_hash(cfg),
        "config": config_to_dict(cfg),
        "seed": cfg.train.seed,
        "version": f"semiseg-{__version__}",
        "command": command,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "finished": None,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1)
    return manifest


def finish_manifest(out_dir: str) -> None:
    path = os.path.join(out_dir, "manifest.json")
    with open(path) as f:
        manifest = json.load(f)
    manifest["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    with open(path, "w") as f:
        json.dump(manifest, f, indent=1)
