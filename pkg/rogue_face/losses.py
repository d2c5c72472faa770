"""Fitting objectives and the coefficient discriminator.

Guidance terms: landmark (L_K), guiding photometric (L_GP), perceptual (L_P) and
the coefficient prior (L_R, in :mod:`rogue_face.model`). Robustification terms:
occlusion/noise-resistive photometric (L_O, L_N, the photometric loss against
the guiding image) and the adversarial consistency loss (L_C).
"""

import typing as ty

import numpy as np
import torch
from torch import nn

from .errors import DegenerateRenderError, InvalidArgumentError
from .model import COEFF_DIM, DTYPE, CoeffLike, LossWeights, as_coefficient_tensor
from .render import LandmarkSet, RenderedFrame

HIDDEN_UNITS = 124

D_G = (1.0, 0.0)
D_O = (0.0, 1.0)
D_N = (0.0, 1.0)


def _safe_norm(diff: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Euclidean norm whose gradient at the origin is zero instead of NaN."""
    squared = torch.sum(diff * diff, dim=dim)
    positive = squared > 0
    safe = torch.where(positive, squared, torch.ones_like(squared))
    return torch.where(positive, torch.sqrt(safe), torch.zeros_like(squared))


def landmark_loss(predicted: LandmarkSet, target: LandmarkSet) -> torch.Tensor:
    """Mean Euclidean pixel distance between corresponding landmarks."""
    target_points = target.points.to(DTYPE).detach()
    return torch.mean(_safe_norm(predicted.points.to(DTYPE) - target_points))


def _image_tensor(image) -> torch.Tensor:
    if isinstance(image, torch.Tensor):
        return image.to(DTYPE)
    return torch.as_tensor(np.asarray(image, dtype=np.float64))


def photometric_loss(rendered: RenderedFrame, target) -> torch.Tensor:
    """Mean RGB Euclidean distance over the pixels the render covers."""
    target = _image_tensor(target).detach()
    if target.shape != rendered.rgb.shape:
        raise InvalidArgumentError(
            f"target shape {tuple(target.shape)} does not match render {tuple(rendered.rgb.shape)}"
        )
    if not rendered.coverage.any():
        raise DegenerateRenderError("render covers no pixel; photometric loss undefined")
    mask = torch.as_tensor(rendered.coverage)
    return torch.mean(_safe_norm(rendered.rgb[mask] - target[mask]))


def perceptual_loss(theta: torch.Tensor, theta_prime: torch.Tensor) -> torch.Tensor:
    """Cosine distance ``1 - <a, b> / (|a| |b|)``, in [0, 2]."""
    theta = torch.as_tensor(theta, dtype=DTYPE)
    theta_prime = torch.as_tensor(theta_prime, dtype=DTYPE)
    norm = torch.linalg.norm(theta) * torch.linalg.norm(theta_prime)
    if float(norm.detach()) == 0.0:
        raise InvalidArgumentError("perceptual loss is undefined for zero-norm embeddings")
    return 1.0 - torch.dot(theta, theta_prime) / norm


def huber(residual, delta: float = 1.0) -> torch.Tensor:
    """Elementwise Huber: r^2/2 inside [-delta, delta], linear outside."""
    if not delta > 0:
        raise InvalidArgumentError(f"delta must be positive, got {delta}")
    r = torch.as_tensor(residual, dtype=DTYPE)
    a = torch.abs(r)
    return torch.where(a <= delta, 0.5 * r * r, delta * (a - 0.5 * delta))


class Discriminator(nn.Module):
    """Fully-connected classifier over coefficient vectors: 257 -> 124 -> 2 logits."""

    def __init__(self, seed: int = 0, negative_slope: float = 0.2, hidden: int = HIDDEN_UNITS):
        super().__init__()
        self.layer1 = nn.Linear(COEFF_DIM, hidden, dtype=DTYPE)
        self.layer2 = nn.Linear(hidden, 2, dtype=DTYPE)
        self.negative_slope = negative_slope
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int) -> None:
        generator = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for layer in (self.layer1, self.layer2):
                bound = 1.0 / np.sqrt(layer.in_features)
                for parameter in (layer.weight, layer.bias):
                    uniform = torch.rand(parameter.shape, generator=generator, dtype=DTYPE)
                    parameter.copy_((2.0 * uniform - 1.0) * bound)

    def zero_(self) -> "Discriminator":
        with torch.no_grad():
            for parameter in self.parameters():
                parameter.zero_()
        return self

    def forward(self, coeffs: torch.Tensor) -> torch.Tensor:
        hidden = nn.functional.leaky_relu(self.layer1(coeffs), self.negative_slope)
        return self.layer2(hidden)


def discriminator_forward(disc: Discriminator, coeffs: CoeffLike) -> torch.Tensor:
    """Two logits for one coefficient vector, or (B, 2) for a (B, 257) batch."""
    if isinstance(coeffs, torch.Tensor) and coeffs.ndim == 2:
        return disc(coeffs.to(DTYPE))
    return disc(as_coefficient_tensor(coeffs))


def _label_huber(logits: torch.Tensor, label, delta: float) -> torch.Tensor:
    target = torch.as_tensor(label, dtype=DTYPE)
    return torch.sum(huber(logits - target, delta))


def consistency_terms(
    disc: Discriminator,
    c_g: CoeffLike,
    c_o: CoeffLike,
    c_n: CoeffLike,
    labels: ty.Tuple = (D_G, D_O, D_N),
    delta: float = 1.0,
) -> ty.Tuple[torch.Tensor, torch.Tensor]:
    """(L_CO, L_CN): per-logit Huber against one-hot labels, summed per pair."""
    d_g, d_o, d_n = labels
    guide = _label_huber(discriminator_forward(disc, c_g), d_g, delta)
    l_co = guide + _label_huber(discriminator_forward(disc, c_o), d_o, delta)
    l_cn = guide + _label_huber(discriminator_forward(disc, c_n), d_n, delta)
    return l_co, l_cn


def consistency_loss(
    disc: Discriminator,
    c_g: CoeffLike,
    c_o: CoeffLike,
    c_n: CoeffLike,
    labels: ty.Tuple = (D_G, D_O, D_N),
    delta: float = 1.0,
) -> torch.Tensor:
    """Adversarial consistency loss L_C = L_CO + L_CN."""
    l_co, l_cn = consistency_terms(disc, c_g, c_o, c_n, labels, delta)
    return l_co + l_cn


def l2_consistency_loss(c_g: CoeffLike, c_o: CoeffLike, c_n: CoeffLike) -> torch.Tensor:
    """Direct coefficient matching |C_G - C_O|^2 + |C_G - C_N|^2 (ablation mode)."""
    g = as_coefficient_tensor(c_g)
    return torch.sum((g - as_coefficient_tensor(c_o)) ** 2) + torch.sum(
        (g - as_coefficient_tensor(c_n)) ** 2
    )


class GuideTerms(ty.NamedTuple):
    l_k: ty.Any
    l_gp: ty.Any
    l_p: ty.Any
    l_r: ty.Any


def guide_total(terms: ty.Sequence, weights: LossWeights):
    """alpha_K L_K + alpha_GP L_GP + alpha_P L_P + alpha_R L_R"""
    l_k, l_gp, l_p, l_r = terms
    return (
        weights.alpha_k * l_k
        + weights.alpha_gp * l_gp
        + weights.alpha_p * l_p
        + weights.alpha_r * l_r
    )


def robust_total(l_o, l_n, l_c, weights: LossWeights):
    """beta_O L_O + beta_N L_N - beta_C L_C; coefficients ascend on L_C."""
    return weights.beta_o * l_o + weights.beta_n * l_n - weights.beta_c * l_c
