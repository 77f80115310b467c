"""Feature-level perturbations applied between encoder and decoder.

The default is channel dropout: whole channels are zeroed with probability p
and survivors are rescaled by 1/(1-p), so the expectation of the feature map
is preserved. Uniform multiplicative noise and a virtual-adversarial
perturbation are provided as alternatives.

All functions operate on torch tensors shaped (C, H, W) or (N, C, H, W) and
preserve shape exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch
import torch.nn.functional as F

from .errors import ArgumentError, ConfigurationError, NumericError

PERTURB_KINDS = ("channel_dropout", "uniform_noise", "vat", "none")
PERTURB_LOCATIONS = ("encoder_decoder", "decoder_classifier")


@dataclass
class FeaturePerturbSpec:
    kind: str = "channel_dropout"
    dropout_prob: float = 0.5
    noise_amplitude: float = 0.3
    vat_eps: float = 2.0
    vat_xi: float = 1e-6
    vat_iters: int = 1
    location: str = "encoder_decoder"

    def validate(self) -> None:
        if self.kind not in PERTURB_KINDS:
            raise ConfigurationError(f"unknown perturbation kind {self.kind!r}, expected one of {PERTURB_KINDS}")
        if not (0.0 <= self.dropout_prob < 1.0):
            raise ConfigurationError(f"dropout_prob must be in [0, 1), got {self.dropout_prob}")
        if self.noise_amplitude < 0:
            raise ConfigurationError(f"noise_amplitude must be >= 0, got {self.noise_amplitude}")
        if self.vat_iters < 1:
            raise ConfigurationError(f"vat_iters must be >= 1, got {self.vat_iters}")
        if self.location not in PERTURB_LOCATIONS:
            raise ConfigurationError(f"unknown location {self.location!r}, expected one of {PERTURB_LOCATIONS}")


def channel_dropout(feat: torch.Tensor, p: float, rng: torch.Generator) -> torch.Tensor:
    """Zero each channel independently with probability p; scale survivors by

    1/(1-p). Every spatial position within a channel shares the channel's
    fate. p = 0 is the identity.
    """
    if not (0.0 <= p < 1.0):
        raise ArgumentError(f"dropout probability must be in [0, 1), got {p}")
    if p == 0.0:
        return feat.clone()
    if feat.dim() == 3:
        keep_shape = (feat.shape[0], 1, 1)
    elif feat.dim() == 4:
        keep_shape = (feat.shape[0], feat.shape[1], 1, 1)
    else:
        raise ArgumentError(f"expected rank-3 or rank-4 feature map, got shape {tuple(feat.shape)}")
    keep = (torch.rand(keep_shape, generator=rng, dtype=feat.dtype) >= p).to(feat.dtype)
    return feat * keep / (1.0 - p)


def uniform_noise(feat: torch.Tensor, amplitude: float, rng: torch.Generator) -> torch.Tensor:
    """Multiplicative-residual noise: feat * (1 + U(-amplitude, amplitude)),

    drawn elementwise.
    """
    if amplitude < 0:
        raise ArgumentError(f"amplitude must be >= 0, got {amplitude}")
    if amplitude == 0.0:
        return feat.clone()
    noise = torch.empty(feat.shape, dtype=feat.dtype).uniform_(-amplitude, amplitude, generator=rng)
    return feat * (1.0 + noise)


def vat_perturb(
    feat: torch.Tensor,
    decoder: Callable[[torch.Tensor], torch.Tensor],
    spec: FeaturePerturbSpec,
    rng: torch.Generator | None = None,
) -> torch.Tensor:
    """Adversarial feature offset estimated by power iteration.

    Finds the direction d (unit norm over the whole map) that most increases
    the KL divergence of the decoder output, then returns feat + vat_eps * d.
    """
    if spec.vat_eps <= 0:
        raise ArgumentError(f"vat_eps must be > 0, got {spec.vat_eps}")
    feat = feat.detach()
    with torch.no_grad():
        ref = F.softmax(decoder(feat).double(), dim=-3)
    d = torch.randn(feat.shape, generator=rng, dtype=feat.dtype)
    d = d / d.norm()
    for it in range(spec.vat_iters):
        d.requires_grad_(True)
        logits = decoder(feat + spec.vat_xi * d)
        # the divergence at xi scale is tiny; accumulate it in float64 so the
        # gradient direction is not drowned in rounding noise
        div = F.kl_div(
            F.log_softmax(logits.double(), dim=-3), ref, reduction="batchmean" if logits.dim() == 4 else "sum"
        )
        (grad,) = torch.autograd.grad(div, d)
        if not torch.isfinite(grad).all():
            raise NumericError(f"non-finite gradient in VAT power iteration {it}")
        grad = grad.detach()
        norm = grad.norm()
        # a perfectly flat decoder gives a zero gradient; keep the previous
        # unit direction rather than collapsing the offset to zero
        d = grad / norm if float(norm) > 0 else d.detach()
    return feat + spec.vat_eps * d


def apply_perturbation(
    feat: torch.Tensor,
    spec: FeaturePerturbSpec,
    rng: torch.Generator,
    decoder: Callable[[torch.Tensor], torch.Tensor] | None = None,
) -> torch.Tensor:
    """Dispatch on spec.kind. kind = "none" passes the tensor through unchanged."""
    spec.validate()
    if spec.kind == "none":
        return feat
    if spec.kind == "channel_dropout":
        return channel_dropout(feat, spec.dropout_prob, rng)
    if spec.kind == "uniform_noise":
        return uniform_noise(feat, spec.noise_amplitude, rng)
    if spec.kind == "vat":
        if decoder is None:
            raise ArgumentError("vat perturbation requires a decoder handle")
        return vat_perturb(feat, decoder, spec, rng)
    raise ArgumentError(f"unknown perturbation kind {spec.kind!r}")
