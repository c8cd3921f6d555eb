"""Minimax meta-training: inner-loop style synthesis, the four-term outer objective,
episode evaluation and per-episode finetuning."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .adversary import (
    AttackConfig, AdvStyleSet, FeatureAttack, K_RT, attack_image_episode, attack_feature,
    draw_skip, progressive_style_attack,
)
from .episodes import Episode, sample_episode
from .errors import ContractError, NumericsError
from .nn import OptimizerState, cross_entropy, kl_divergence_logits, optimizer_step, proto_logits
from .style import EPS_VAR, StyleAugKind, adain, adain_arrays, style_arrays, style_gauss
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    episodes_per_epoch: int = 100
    n_way: int = 5
    k_shot: int = 1
    m_query: int = 15
    optimizer: str = "adam"
    lr: float = 1e-3
    attack: AttackConfig = field(default_factory=AttackConfig)
    augment: StyleAugKind = StyleAugKind.ADVERSARIAL
    gauss_k: float = K_RT
    weights: tuple = (1.0, 1.0, 1.0, 1.0)  # fsl, fsl_adv, cons, cls
    seed: int = 0
    val_episodes: int = 100

    def __post_init__(self):
        object.__setattr__(self, "augment", StyleAugKind(self.augment))
        for name in ("n_way", "k_shot", "m_query", "episodes_per_epoch"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive")
        if self.epochs < 0:
            raise ContractError("epochs must be >= 0")
        if len(self.weights) != 4:
            raise ContractError("weights needs four entries (fsl, fsl_adv, cons, cls)")

    def replace(self, **kw):
        return replace(self, **kw)


@dataclass
class LossReport:
    fsl: float
    cls: float
    total: float
    fsl_adv: float = None
    cons: float = None
    skipped: bool = False

    def as_dict(self):
        return {"L_fsl": self.fsl, "L_fsl_adv": self.fsl_adv, "L_cons": self.cons,
                "L_cls": self.cls, "total": self.total, "skipped": self.skipped}


def episode_streams(seed, index):
    """(sampling stream, attack stream) for one episode, seeded from (seed, index)."""
    s, a = np.random.SeedSequence([int(seed), int(index)]).spawn(2)
    return np.random.default_rng(s), np.random.default_rng(a)


# ---------------------------------------------------------------------------
# inner loop dispatch


def _style_chain(model, x, per_block, first_block=None):
    """Progressive restyling where ``per_block(i, F_i)`` returns the new (mu, sigma) of block i."""
    styles = []
    h = x
    with T.no_grad():
        for i in range(1, model.n_blocks + 1):
            F_i = first_block if i == 1 and first_block is not None else model.block(i, Tensor(h)).data
            mu, sigma = per_block(i, F_i)
            styles.append((mu, sigma))
            h = adain_arrays(F_i, mu, sigma)
    return styles


def inner_loop(model, episode, cfg, rng, first_block=None):
    """Perturbation for the adversarial branch, or None when it is skipped.

    ``first_block`` optionally carries E_1(images) at the current parameters.
    """
    kind = cfg.augment
    if kind is StyleAugKind.NONE:
        return None
    attack = cfg.attack
    if kind is StyleAugKind.ADVERSARIAL:
        if attack.target == "style":
            return progressive_style_attack(episode, model.snapshot(), attack, rng, first_block)
        if attack.target == "feature":
            return attack_feature(episode, model.snapshot(), attack, rng, first_block)
        adv = attack_image_episode(episode, model.snapshot(), attack, rng)
        return None if adv is episode else adv
    if draw_skip(rng, attack.p_skip):
        return None
    x = episode.images
    if kind is StyleAugKind.GAUSS:
        def gauss(i, F):
            return style_gauss(*style_arrays(F), cfg.gauss_k, rng, attack.sigma_min)
        return AdvStyleSet(_style_chain(model, x, gauss, first_block))
    perm = rng.permutation(len(x))

    def swap(i, F):
        mu, sigma = style_arrays(F)
        return mu[perm], sigma[perm]
    return AdvStyleSet(_style_chain(model, x, swap, first_block))


def adversarial_embedding(model, episode, adv, first_block=None):
    """Trainable forward path carrying the inner-loop perturbation (constants, no gradient into them).

    ``first_block`` may be the taped clean E_1(images); the adversarial path
    then shares that node instead of recomputing it.
    """
    if isinstance(adv, Episode):
        return model.embed(Tensor(adv.images))
    h = Tensor(episode.images)
    for i in range(1, model.n_blocks + 1):
        h = first_block if i == 1 and first_block is not None else model.block(i, h)
        if isinstance(adv, AdvStyleSet):
            mu, sigma = adv.styles[i - 1]
            h = adain(h, Tensor(mu), Tensor(sigma), EPS_VAR)
        elif isinstance(adv, FeatureAttack):
            h = h + Tensor(adv.deltas[i - 1])
        else:
            raise ContractError(f"unsupported perturbation {type(adv).__name__}")
    return T.global_avgpool(h)


def _fsl_logits(model, emb, episode):
    ns = episode.n_support
    s = T.slice_axis(emb, 0, 0, ns)
    q = T.slice_axis(emb, 0, ns, None)
    return proto_logits(s, episode.y_support, q, episode.n_way)


def outer_step(model, episode, cfg, opt_state, rng, adv=False):
    """One minimax step. ``adv`` may carry a precomputed perturbation; by default the
    inner loop runs here."""
    params = model.params()
    w_fsl, w_adv, w_cons, w_cls = cfg.weights
    feats, emb = model.features(Tensor(episode.images))
    if adv is False:
        adv = inner_loop(model, episode, cfg, rng, feats[0].data)
    logits = _fsl_logits(model, emb, episode)
    l_fsl = cross_entropy(logits, episode.y_query)
    l_cls = cross_entropy(model.classifier(emb), episode.y_global)
    report = LossReport(fsl=float(l_fsl.data), cls=float(l_cls.data), total=0.0, skipped=adv is None)
    if adv is None:
        total = T.scale(l_fsl, w_fsl) + T.scale(l_cls, w_cls)
    else:
        emb_adv = adversarial_embedding(model, episode, adv, feats[0])
        logits_adv = _fsl_logits(model, emb_adv, episode)
        l_adv = cross_entropy(logits_adv, episode.y_query)
        l_cons = kl_divergence_logits(logits, logits_adv)
        report.fsl_adv, report.cons = float(l_adv.data), float(l_cons.data)
        total = (T.scale(l_fsl, w_fsl) + T.scale(l_adv, w_adv)
                 + T.scale(l_cons, w_cons) + T.scale(l_cls, w_cls))
    report.total = float(total.data)
    if not math.isfinite(report.total):
        raise NumericsError("non-finite meta-objective")
    grads = T.backward(total)
    optimizer_step(opt_state, params, grads)
    return report


def make_optimizer(cfg):
    return OptimizerState(kind=cfg.optimizer, lr=cfg.lr)


# ---------------------------------------------------------------------------
# evaluation


def evaluate_episode(model, episode):
    pred = model.predict_episode(episode)
    return float(np.mean(pred == episode.y_query))


def proto_accuracy(emb_support, y_support, emb_query, y_query, n_way):
    protos = np.stack([emb_support[y_support == n].mean(axis=0) for n in range(n_way)])
    d = ((emb_query[:, None, :] - protos[None, :, :]) ** 2).sum(axis=2)
    return float(np.mean(np.argmax(-d, axis=1) == y_query))


class EmbeddedDataset:
    """Dataset whose images were embedded once; episodes are scored on cached embeddings.

    Valid because embeddings are computed per image (no batch-coupled layers).
    """

    def __init__(self, model, dataset):
        self.dataset = dataset
        self.emb = model.embed_numpy(dataset.images)

    def episode_accuracy(self, episode):
        return proto_accuracy(self.emb[episode.support_idx], episode.y_support,
                              self.emb[episode.query_idx], episode.y_query, episode.n_way)


def evaluate_domain(model, dataset, n_way, k_shot, m_query, n_episodes, seed):
    """Per-episode accuracies over ``n_episodes`` seeded episodes."""
    if n_episodes < 1:
        raise ContractError("need at least one evaluation episode")
    cache = EmbeddedDataset(model, dataset)
    accs = np.empty(n_episodes)
    for e in range(n_episodes):
        rng, _ = episode_streams(seed, e)
        accs[e] = cache.episode_accuracy(sample_episode(dataset, n_way, k_shot, m_query, rng))
    return accs


# ---------------------------------------------------------------------------
# training driver


@dataclass
class TrainResult:
    model: object
    metrics: list
    best_state: dict = None
    best_val_acc: float = None


def _mean(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


VAL_SEED_OFFSET = 7_919


def meta_train(model, source, cfg, val=None, on_epoch=None):
    """Train ``model`` in place; returns metrics per epoch and the best-validation state."""
    opt = make_optimizer(cfg)
    metrics = []
    best_state, best_acc = None, None
    for epoch in range(cfg.epochs):
        start = time.perf_counter()
        reports = []
        for j in range(cfg.episodes_per_epoch):
            sample_rng, attack_rng = episode_streams(cfg.seed, epoch * cfg.episodes_per_epoch + j)
            episode = sample_episode(source, cfg.n_way, cfg.k_shot, cfg.m_query, sample_rng)
            reports.append(outer_step(model, episode, cfg, opt, attack_rng))
        record = {
            "epoch": epoch + 1,
            "L_fsl": _mean([r.fsl for r in reports]),
            "L_fsl_adv": _mean([r.fsl_adv for r in reports]),
            "L_cons": _mean([r.cons for r in reports]),
            "L_cls": _mean([r.cls for r in reports]),
            "total": _mean([r.total for r in reports]),
            "skip_rate": float(np.mean([r.skipped for r in reports])),
            "val_acc": None,
        }
        if val is not None and cfg.val_episodes:
            accs = evaluate_domain(model, val, cfg.n_way, cfg.k_shot, cfg.m_query, cfg.val_episodes,
                                   cfg.seed + VAL_SEED_OFFSET)
            record["val_acc"] = float(accs.mean())
            if best_acc is None or record["val_acc"] > best_acc:
                best_acc, best_state = record["val_acc"], model.state_dict()
        record["wall_time"] = time.perf_counter() - start
        log.info("epoch %d: %s", epoch + 1, record)
        metrics.append(record)
        if on_epoch is not None:
            on_epoch(record)
    return TrainResult(model, metrics, best_state, best_acc)


# ---------------------------------------------------------------------------
# finetuning


@dataclass(frozen=True)
class FinetuneConfig:
    iterations: int = None     # None -> 10 for 1-shot, 50 otherwise
    lr: float = None           # None -> 0.005 for 1-shot, 0.001 otherwise
    optimizer: str = "adam"
    pseudo_query: int = 3      # augmented copies per support image used as pseudo queries
    style_k: float = K_RT
    flip_p: float = 0.5
    crop_pad: int = 2

    def resolved(self, k_shot):
        iters = self.iterations if self.iterations is not None else (10 if k_shot == 1 else 50)
        lr = self.lr if self.lr is not None else (0.005 if k_shot == 1 else 0.001)
        return iters, lr


def augment_images(x, rng, style_k=K_RT, flip_p=0.5, crop_pad=2):
    """Pixel-statistics style jitter, horizontal flips and small pad-and-crop shifts."""
    x = np.asarray(x, dtype=np.float64)
    n, C, H, W = x.shape
    mu, sigma = style_arrays(x, 0.0)
    mu_new, sigma_new = style_gauss(mu, sigma, style_k, rng)
    out = np.clip(adain_arrays(x, mu_new, sigma_new, 0.0), 0.0, 1.0)
    flips = rng.random(n) < flip_p
    out[flips] = out[flips][..., ::-1]
    if crop_pad:
        padded = np.pad(out, ((0, 0), (0, 0), (crop_pad, crop_pad), (crop_pad, crop_pad)), mode="reflect")
        offs = rng.integers(0, 2 * crop_pad + 1, size=(n, 2))
        out = np.stack([padded[i, :, a:a + H, b:b + W] for i, (a, b) in enumerate(offs)])
    return out


def finetune(model, episode, ft_cfg, rng):
    """Adapt a copy of ``model`` on pseudo episodes built from the support set only."""
    k_shot = episode.n_support // episode.n_way
    iters, lr = ft_cfg.resolved(k_shot)
    adapted = model.copy()
    if iters == 0:
        return adapted
    params = adapted.backbone_params()
    opt = OptimizerState(kind=ft_cfg.optimizer, lr=lr)
    ys = episode.y_support
    yq = np.repeat(ys, ft_cfg.pseudo_query)
    for _ in range(iters):
        s = augment_images(episode.support, rng, ft_cfg.style_k, ft_cfg.flip_p, ft_cfg.crop_pad)
        q = augment_images(np.repeat(episode.support, ft_cfg.pseudo_query, axis=0), rng,
                           ft_cfg.style_k, ft_cfg.flip_p, ft_cfg.crop_pad)
        emb = adapted.embed(Tensor(np.concatenate([s, q])))
        logits = proto_logits(T.slice_axis(emb, 0, 0, len(s)), ys, T.slice_axis(emb, 0, len(s), None),
                              episode.n_way)
        loss = cross_entropy(logits, yq)
        optimizer_step(opt, params, T.backward(loss))
    return adapted
