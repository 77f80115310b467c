"""Encoder-decoder segmentation model abstraction and a tiny reference net.

The reference network is deliberately small (a few conv blocks, overall
stride 4) so that full training runs finish in minutes on a CPU. The encoder
and decoder are exposed separately because the consistency engine perturbs
the feature map between them; the decoder is further split into a body and a
1x1 classifier so perturbations can alternatively be injected right before
the classifier. Real backbones can be swapped in by implementing the same
encode/decode_hidden/classify surface.

The teacher used for pseudo-labeling is the student itself: there is never a
second parameter copy.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ArgumentError

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class TinyNetConfig:
    in_channels: int = 3
    num_classes: int = 3
    # the feature map needs enough channels that dropping half of them still
    # leaves a usable representation, otherwise the feature-perturbation
    # stream fights the decoder instead of regularizing it
    widths: tuple[int, ...] = (16, 32, 32)
    feature_dim: int = 64
    decoder_width: int = 32
    decoder_kernel: int = 3
    norm_groups: int = 4
    init_seed: int = 0


def _conv_block(cin: int, cout: int, stride: int, kernel: int, groups: int) -> nn.Sequential:
    pad = kernel // 2
    g = min(groups, cout)
    while cout % g != 0:
        g -= 1
    return nn.Sequential(
        nn.Conv2d(cin, cout, kernel, stride=stride, padding=pad),
        nn.GroupNorm(g, cout),
        nn.ReLU(inplace=True),
    )


class TinySegNet(nn.Module):
    """Small conv encoder (stride 4) + two-conv decoder with bilinear upsampling."""

    def __init__(self, cfg: TinyNetConfig | None = None, **kwargs):
        super().__init__()
        if cfg is None:
            cfg = TinyNetConfig(**kwargs)
        self.cfg = cfg
        self.num_classes = cfg.num_classes
        self.feature_dim = cfg.feature_dim
        self.stride = 4

        chans = [cfg.in_channels, *cfg.widths, cfg.feature_dim]
        blocks = []
        for i in range(len(chans) - 1):
            stride = 2 if i in (1, 2) else 1
            blocks.append(_conv_block(chans[i], chans[i + 1], stride, 3, cfg.norm_groups))
        self.encoder = nn.Sequential(*blocks)
        self.decoder_body = _conv_block(cfg.feature_dim, cfg.decoder_width, 1, cfg.decoder_kernel, cfg.norm_groups)
        self.classifier = nn.Conv2d(cfg.decoder_width, cfg.num_classes, 1)
        self.reset_parameters(cfg.init_seed)

    def reset_parameters(self, seed: int) -> None:
        """He-uniform init driven by an explicit generator, so two models built

        with the same seed are parameter-identical regardless of global RNG
        state.
        """
        g = torch.Generator()
        g.manual_seed(seed)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
                bound = (6.0 / fan_in) ** 0.5
                with torch.no_grad():
                    m.weight.uniform_(-bound, bound, generator=g)
                    if m.bias is not None:
                        m.bias.zero_()
            elif isinstance(m, nn.GroupNorm):
                with torch.no_grad():
                    m.weight.fill_(1.0)
                    m.bias.zero_()

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return self.encoder(x)

    def decode_hidden(self, feat: torch.Tensor) -> torch.Tensor:
        return self.decoder_body(feat)

    def classify(self, hidden: torch.Tensor, out_size: tuple[int, int]) -> torch.Tensor:
        logits = self.classifier(hidden)
        if logits.shape[-2:] != tuple(out_size):
            logits = F.interpolate(logits, size=tuple(out_size), mode="bilinear", align_corners=False)
        return logits

    def decode(self, feat: torch.Tensor, out_size: tuple[int, int]) -> torch.Tensor:
        return self.classify(self.decode_hidden(feat), out_size)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(x), x.shape[-2:])


def micro_net(num_classes: int = 3, in_channels: int = 3, init_seed: int = 0) -> TinySegNet:
    """Sub-1k-parameter variant used for finite-difference gradient checks."""
    return TinySegNet(
        TinyNetConfig(
            in_channels=in_channels,
            num_classes=num_classes,
            widths=(4, 6),
            feature_dim=8,
            decoder_width=8,
            decoder_kernel=1,
            norm_groups=2,
            init_seed=init_seed,
        )
    )


def _batched(x: torch.Tensor):
    if x.dim() == 3:
        return x.unsqueeze(0), True
    if x.dim() == 4:
        return x, False
    raise ArgumentError(f"expected rank-3 or rank-4 tensor, got shape {tuple(x.shape)}")


def encode(model: TinySegNet, image: torch.Tensor) -> torch.Tensor:
    """Encoder features; spatial size is input size / model.stride."""
    x, single = _batched(image)
    if x.shape[1] != model.cfg.in_channels:
        raise ArgumentError(f"model expects {model.cfg.in_channels} input channels, got {x.shape[1]}")
    feat = model.encode(x)
    return feat.squeeze(0) if single else feat


def decode(model: TinySegNet, feat: torch.Tensor, out_size: tuple[int, int] | None = None) -> torch.Tensor:
    """Class logits upsampled to out_size (default: feature size * stride)."""
    f, single = _batched(feat)
    if f.shape[1] != model.feature_dim:
        raise ArgumentError(f"model expects {model.feature_dim} feature channels, got {f.shape[1]}")
    if out_size is None:
        out_size = (f.shape[-2] * model.stride, f.shape[-1] * model.stride)
    logits = model.decode(f, out_size)
    return logits.squeeze(0) if single else logits


def predict(model: TinySegNet, image: torch.Tensor) -> torch.Tensor:
    """Per-pixel class probabilities (softmax over the class axis)."""
    x, single = _batched(image)
    logits = decode(model, encode(model, x), x.shape[-2:])
    probs = F.softmax(logits, dim=1)
    return probs.squeeze(0) if single else probs


def cd_forward(model: TinySegNet, image_a: torch.Tensor, image_b: torch.Tensor) -> torch.Tensor:
    """Bi-temporal change logits: decode the signed difference of encoder

    features of the two epochs. The model must be binary (changed/unchanged).
    """
    if image_a.shape != image_b.shape:
        raise ArgumentError(f"bi-temporal shapes differ: {tuple(image_a.shape)} vs {tuple(image_b.shape)}")
    if model.num_classes != 2:
        raise ArgumentError(f"change detection needs a 2-class model, got {model.num_classes}")
    a, single = _batched(image_a)
    b, _ = _batched(image_b)
    diff = model.encode(a) - model.encode(b)
    logits = model.decode(diff, a.shape[-2:])
    return logits.squeeze(0) if single else logits


def save_checkpoint(model: TinySegNet, path, extra_meta: dict | None = None) -> None:
    """Versioned blob: parameter arrays keyed by canonical names + metadata header."""
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "arch": asdict(model.cfg),
        "meta": {
            "num_classes": model.num_classes,
            "feature_dim": model.feature_dim,
            "stride": model.stride,
            **(extra_meta or {}),
        },
        "state": model.state_dict(),
    }
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[TinySegNet, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ArgumentError(f"unsupported checkpoint format version: {version}")
    arch = dict(payload["arch"])
    arch["widths"] = tuple(arch["widths"])
    model = TinySegNet(TinyNetConfig(**arch))
    model.load_state_dict(payload["state"])
    model.eval()
    return model, payload["meta"]
