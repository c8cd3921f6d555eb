"""Feature-statistic styles: extraction, AdaIN re-injection and simple augmentations."""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor

EPS_VAR = 1e-5
SIGMA_MIN = 1e-6


class StyleAugKind(str, enum.Enum):
    NONE = "none"
    SWAP = "swap"
    GAUSS = "gauss"
    ADVERSARIAL = "adversarial"


@dataclass
class Style:
    mu: Tensor
    sigma: Tensor
    eps_var: float = EPS_VAR

    def detach(self):
        return Style(self.mu.detach(), self.sigma.detach(), self.eps_var)

    def arrays(self):
        return self.mu.data, self.sigma.data


def compute_style(F, eps_var=EPS_VAR):
    """Per-instance, per-channel mean and std (population variance, ``eps_var`` inside the root)."""
    F = T.as_tensor(F)
    if F.ndim != 4:
        raise ShapeError(f"compute_style expects B x C x H x W, got {F.shape}")
    mu = T.reduce_mean(F, axis=(2, 3))
    var = T.reduce_var(F, axis=(2, 3))
    sigma = T.sqrt(var + eps_var) if eps_var else T.sqrt(var)
    return Style(mu, sigma, eps_var)


def style_arrays(F, eps_var=EPS_VAR):
    """Numpy-only version of :func:`compute_style` for detached use."""
    F = np.asarray(F)
    if F.ndim != 4:
        raise ShapeError(f"style_arrays expects B x C x H x W, got {F.shape}")
    return F.mean(axis=(2, 3)), np.sqrt(F.var(axis=(2, 3)) + eps_var)


def adain(F, mu_tgt, sigma_tgt, eps_var=EPS_VAR):
    """sigma_tgt * (F - mu(F)) / sigma(F) + mu_tgt, with mu(F), sigma(F) recomputed from F."""
    F = T.as_tensor(F)
    mu_tgt, sigma_tgt = T.as_tensor(mu_tgt), T.as_tensor(sigma_tgt)
    if F.ndim != 4:
        raise ShapeError(f"adain expects B x C x H x W, got {F.shape}")
    B, C = F.shape[:2]
    if mu_tgt.shape != (B, C) or sigma_tgt.shape != (B, C):
        raise ShapeError(f"adain targets must be {B} x {C}, got {mu_tgt.shape} and {sigma_tgt.shape}")
    own = compute_style(F, eps_var)
    mu = T.reshape(own.mu, (B, C, 1, 1))
    sigma = T.reshape(own.sigma, (B, C, 1, 1))
    # constant channel with eps_var = 0: numerator is zero, output is mu_tgt
    if not eps_var and np.any(sigma.data == 0):
        sigma = sigma + Tensor((sigma.data == 0).astype(float))
    normalized = (F - mu) / sigma
    return T.reshape(sigma_tgt, (B, C, 1, 1)) * normalized + T.reshape(mu_tgt, (B, C, 1, 1))


def adain_arrays(F, mu_tgt, sigma_tgt, eps_var=EPS_VAR):
    """Numpy-only AdaIN for detached feature chains."""
    mu, sigma = style_arrays(F, eps_var)
    if not eps_var:
        sigma = np.where(sigma == 0, 1.0, sigma)
    return sigma_tgt[:, :, None, None] * (F - mu[:, :, None, None]) / sigma[:, :, None, None] \
        + mu_tgt[:, :, None, None]


def tokens_to_map(tokens):
    """B x P^2 x C tokens (row-major patch order) -> B x C x P x P map."""
    tokens = T.as_tensor(tokens)
    if tokens.ndim != 3:
        raise ShapeError(f"expected B x P^2 x C tokens, got {tokens.shape}")
    B, n, C = tokens.shape
    P = int(round(np.sqrt(n)))
    if P * P != n:
        raise ShapeError(f"token count {n} is not a perfect square")
    return T.reshape(T.transpose(tokens, (0, 2, 1)), (B, C, P, P))


def map_to_tokens(F):
    F = T.as_tensor(F)
    B, C, P, Q = F.shape
    return T.transpose(T.reshape(F, (B, C, P * Q)), (0, 2, 1))


def token_style(tokens, eps_var=EPS_VAR):
    """Style of patch tokens, computed on their spatial re-arrangement."""
    fmap = tokens_to_map(tokens)
    return compute_style(fmap, eps_var), fmap


def style_swap(F_a, F_b, eps_var=EPS_VAR):
    """Restyle ``F_a`` with the statistics of ``F_b``."""
    F_a, F_b = T.as_tensor(F_a), T.as_tensor(F_b)
    if F_a.ndim != 4 or F_b.ndim != 4 or F_a.shape[:2] != F_b.shape[:2]:
        raise ShapeError(f"style_swap needs matching B x C, got {F_a.shape} and {F_b.shape}")
    s = compute_style(F_b, eps_var)
    return adain(F_a, s.mu, s.sigma, eps_var)


def style_gauss(mu, sigma, k, rng, sigma_min=SIGMA_MIN):
    """Add k * N(0, I) to both statistics (fresh draws); sigma is floored at ``sigma_min``."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if k == 0:
        return mu.copy(), sigma.copy()
    mu_new = mu + k * rng.standard_normal(mu.shape)
    sigma_new = np.maximum(sigma + k * rng.standard_normal(sigma.shape), sigma_min)
    return mu_new, sigma_new
