"""Attack operators: pixel FGSM/PGD, Style-FGSM/PGD, progressive per-block synthesis,
and the attack-image / attack-feature variants.

All attacks run against a frozen snapshot of the model, so no parameter ever
receives a gradient here. Returned styles and features are plain arrays
(detached).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .errors import ContractError, NumericsError
from .style import EPS_VAR, SIGMA_MIN, adain, adain_arrays, style_arrays
from .tensor import Tensor

K_RT = 16 / 255
EPS_LIST = (0.8, 0.08, 0.008)


@dataclass(frozen=True)
class AttackConfig:
    eps_list: tuple = EPS_LIST
    k_rt: float = K_RT
    p_skip: float = 0.2
    target: str = "style"
    method: str = "fgsm"
    steps: int = 1
    sigma_min: float = SIGMA_MIN
    pixel_range: tuple = (0.0, 1.0)
    eps_var: float = EPS_VAR

    def __post_init__(self):
        if not self.eps_list or any(e <= 0 for e in self.eps_list):
            raise ContractError("eps_list must be non-empty with positive ratios")
        if not 0.0 <= self.p_skip <= 1.0:
            raise ContractError(f"p_skip {self.p_skip} outside [0, 1]")
        if self.target not in ("style", "image", "feature"):
            raise ContractError(f"unknown attack target {self.target!r}")
        if self.method not in ("fgsm", "pgd"):
            raise ContractError(f"unknown attack method {self.method!r}")
        if self.steps < 1:
            raise ContractError("attack steps must be >= 1")
        if self.k_rt < 0:
            raise ContractError("k_rt must be >= 0")

    def replace(self, **kw):
        return replace(self, **kw)


@dataclass
class AdvStyleSet:
    """Per-block adversarial (mu, sigma) arrays, block 1 first."""
    styles: list
    eps: float = 0.0

    def __len__(self):
        return len(self.styles)


@dataclass
class FeatureAttack:
    features: list
    deltas: list = field(repr=False)
    eps: float = 0.0


def _snapshot(model):
    return model.snapshot() if any(p.requires_grad for p in model.params().values()) else model


def _checked_backward(loss, wrt):
    if not np.isfinite(loss.data).all():
        raise NumericsError("attack loss is non-finite")
    grads = T.backward(loss)
    out = []
    for t in wrt:
        g = grads[t] if t in grads else np.zeros(t.shape)
        if not np.all(np.isfinite(g)):
            raise NumericsError("attack gradient is non-finite")
        out.append(g)
    return out


def draw_skip(rng, p_skip):
    """One uniform draw per episode; True means the adversarial branch is bypassed."""
    return bool(rng.random() < p_skip)


def draw_eps(rng, eps_list):
    return float(eps_list[int(rng.integers(len(eps_list)))])


# ---------------------------------------------------------------------------
# pixel attacks


def input_gradient(model, x, y_global):
    """Gradient of the global classification loss with respect to the images."""
    model = _snapshot(model)
    xt = Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
    (g,) = _checked_backward(model.cls_loss(xt, y_global), [xt])
    return g


def fgsm_image(x, y_global, model, eps, pixel_range=(0.0, 1.0)):
    x = np.asarray(x, dtype=np.float64)
    g = input_gradient(model, x, y_global)
    return np.clip(x + eps * np.sign(g), *pixel_range)


def random_start(x, k_rt, rng):
    """x + k_rt * N(0, I), unclamped; no draw when k_rt is 0."""
    x = np.asarray(x, dtype=np.float64)
    if k_rt == 0:
        return x.copy()
    return x + k_rt * rng.standard_normal(x.shape)


def pgd_image(x, y_global, model, eps, steps, k_rt, rng=None, pixel_range=(0.0, 1.0)):
    if steps < 1:
        raise ContractError("pgd_image needs steps >= 1")
    model = _snapshot(model)
    xt = np.clip(random_start(x, k_rt, rng), *pixel_range)
    for _ in range(steps):
        g = input_gradient(model, xt, y_global)
        xt = np.clip(xt + eps * np.sign(g), *pixel_range)
    return xt


# ---------------------------------------------------------------------------
# style attacks


def style_gradient(F_in, block_index, model, y_global, mu, sigma, eps_var=EPS_VAR):
    """(loss, d loss / d mu, d loss / d sigma) with block output reformed as adain(F_in, mu, sigma)."""
    model = _snapshot(model)
    mu_t = Tensor(mu, requires_grad=True)
    sigma_t = Tensor(sigma, requires_grad=True)
    reformed = adain(Tensor(np.asarray(F_in)), mu_t, sigma_t, eps_var)
    loss = model.cls_loss_from(block_index, reformed, y_global)
    g_mu, g_sigma = _checked_backward(loss, [mu_t, sigma_t])
    return float(loss.data), g_mu, g_sigma


def _random_started_style(F_in, k_rt, rng, eps_var):
    mu, sigma = style_arrays(np.asarray(F_in), eps_var)
    if k_rt:
        mu = mu + k_rt * rng.standard_normal(mu.shape)
        sigma = sigma + k_rt * rng.standard_normal(sigma.shape)
    return mu, sigma


def style_fgsm_block(F_in, block_index, model, y_global, eps, k_rt=K_RT, rng=None,
                     sigma_min=SIGMA_MIN, eps_var=EPS_VAR):
    """One signed-gradient step on the style of block ``block_index``'s output ``F_in``."""
    mu0, sigma0 = _random_started_style(F_in, k_rt, rng, eps_var)
    _, g_mu, g_sigma = style_gradient(F_in, block_index, model, y_global, mu0, sigma0, eps_var)
    mu_adv = mu0 + eps * np.sign(g_mu)
    sigma_adv = np.maximum(sigma0 + eps * np.sign(g_sigma), sigma_min)
    return mu_adv, sigma_adv


def style_pgd_block(F_in, block_index, model, y_global, eps, steps, k_rt=K_RT, rng=None,
                    sigma_min=SIGMA_MIN, eps_var=EPS_VAR):
    """Random start once, then ``steps`` signed steps.

    The gradient is taken at the clean style of ``F_in`` on every step, not
    re-evaluated at the moved style.
    """
    if steps < 1:
        raise ContractError("style_pgd_block needs steps >= 1")
    mu, sigma = style_arrays(np.asarray(F_in), eps_var)
    mu_adv, sigma_adv = _random_started_style(F_in, k_rt, rng, eps_var)
    _, g_mu, g_sigma = style_gradient(F_in, block_index, model, y_global, mu, sigma, eps_var)
    for _ in range(steps):
        mu_adv = mu_adv + eps * np.sign(g_mu)
        sigma_adv = sigma_adv + eps * np.sign(g_sigma)
    return mu_adv, np.maximum(sigma_adv, sigma_min)


def _block_output(model, i, h, first_block):
    if i == 1 and first_block is not None:
        return np.asarray(first_block)
    with T.no_grad():
        return model.block(i, Tensor(h)).data


def synthesize_styles(x, y_global, model, eps, cfg, rng, first_block=None):
    """Progressive per-block style attack at a fixed ratio ``eps``.

    Block i is attacked on E_i(F_{i-1}^adv), where F_{i-1}^adv carries the
    adversarial styles already found for blocks 1..i-1. ``first_block`` may
    supply an already computed E_1(x).
    """
    model = _snapshot(model)
    styles = []
    h = np.asarray(x, dtype=np.float64)
    for i in range(1, model.n_blocks + 1):
        F_i = _block_output(model, i, h, first_block)
        if cfg.method == "pgd":
            mu_adv, sigma_adv = style_pgd_block(F_i, i, model, y_global, eps, cfg.steps, cfg.k_rt, rng,
                                                cfg.sigma_min, cfg.eps_var)
        else:
            mu_adv, sigma_adv = style_fgsm_block(F_i, i, model, y_global, eps, cfg.k_rt, rng,
                                                 cfg.sigma_min, cfg.eps_var)
        styles.append((mu_adv, sigma_adv))
        h = adain_arrays(F_i, mu_adv, sigma_adv, cfg.eps_var)
    return AdvStyleSet(styles, eps)


def progressive_style_attack(episode, model, cfg, rng, first_block=None):
    """Inner loop for one episode; returns None when the skip draw fires."""
    if cfg.target != "style":
        raise ContractError(f"progressive_style_attack needs target 'style', got {cfg.target!r}")
    if draw_skip(rng, cfg.p_skip):
        return None
    eps = draw_eps(rng, cfg.eps_list)
    return synthesize_styles(episode.images, episode.y_global, model, eps, cfg, rng, first_block)


def synthesize_features(x, y_global, model, eps, cfg, rng, first_block=None):
    """Progressive attack on raw block features: F + k_rt N + eps sign(grad_F)."""
    model = _snapshot(model)
    feats, deltas = [], []
    h = np.asarray(x, dtype=np.float64)
    for i in range(1, model.n_blocks + 1):
        F_i = _block_output(model, i, h, first_block)
        Ft = Tensor(F_i, requires_grad=True)
        (g,) = _checked_backward(model.cls_loss_from(i, Ft, y_global), [Ft])
        noise = cfg.k_rt * rng.standard_normal(F_i.shape) if cfg.k_rt else 0.0
        F_adv = F_i + noise + eps * np.sign(g)
        feats.append(F_adv)
        deltas.append(F_adv - F_i)
        h = F_adv
    return FeatureAttack(feats, deltas, eps)


def attack_feature(episode, model, cfg, rng, first_block=None):
    if cfg.target != "feature":
        raise ContractError(f"attack_feature needs target 'feature', got {cfg.target!r}")
    if draw_skip(rng, cfg.p_skip):
        return None
    eps = draw_eps(rng, cfg.eps_list)
    return synthesize_features(episode.images, episode.y_global, model, eps, cfg, rng, first_block)


def attack_image_episode(episode, model, cfg, rng):
    """Pixel-level attack of a whole episode; labels and the support/query split are kept."""
    if cfg.target != "image":
        raise ContractError(f"attack_image_episode needs target 'image', got {cfg.target!r}")
    if draw_skip(rng, cfg.p_skip):
        return episode
    eps = draw_eps(rng, cfg.eps_list)
    steps = cfg.steps if cfg.method == "pgd" else 1
    x_adv = pgd_image(episode.images, episode.y_global, model, eps, steps, cfg.k_rt, rng, cfg.pixel_range)
    return episode.with_images(x_adv)
