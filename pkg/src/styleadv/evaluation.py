"""Batched evaluation with confidence intervals, and the loss-comparison study."""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .adversary import AttackConfig, synthesize_styles
from .episodes import sample_episode
from .errors import ContractError
from .nn import cross_entropy
from .style import adain, adain_arrays, style_arrays, style_gauss
from .tensor import Tensor
from .training import EmbeddedDataset, FinetuneConfig, episode_streams, evaluate_episode, finetune


def ci_half_width(accs):
    """1.96 * sample std (n - 1) / sqrt(n); zero for a single episode."""
    accs = np.asarray(accs, dtype=np.float64)
    if accs.size == 0:
        raise ContractError("no episodes to summarize")
    if accs.size == 1:
        return 0.0
    return float(1.96 * accs.std(ddof=1) / math.sqrt(accs.size))


@dataclass
class DomainResult:
    name: str
    mean: float
    half_width: float
    episodes: int

    def as_dict(self):
        return {"domain": self.name, "mean": self.mean, "half_width": self.half_width,
                "episodes": self.episodes}


@dataclass
class EvalSummary:
    domains: list = field(default_factory=list)

    @property
    def average(self):
        return float(np.mean([d.mean for d in self.domains])) if self.domains else float("nan")

    def as_dict(self):
        return {"domains": [d.as_dict() for d in self.domains], "average": self.average}

    def table(self):
        lines = [f"{'domain':<14}{'acc %':>9}{'95% CI':>9}{'episodes':>10}"]
        for d in self.domains:
            lines.append(f"{d.name:<14}{100 * d.mean:>9.2f}{100 * d.half_width:>9.2f}{d.episodes:>10d}")
        lines.append(f"{'average':<14}{100 * self.average:>9.2f}")
        return "\n".join(lines)


def summarize(name, accs):
    accs = np.asarray(accs, dtype=np.float64)
    if accs.size == 0:
        raise ContractError("0 evaluation episodes")
    return DomainResult(name, float(accs.mean()), ci_half_width(accs), int(accs.size))


def eval_threads():
    try:
        return max(1, int(os.environ.get("SADV_THREADS", "1")))
    except ValueError:
        return 1


def evaluate_accuracies(model, dataset, n_way, k_shot, m_query, n_episodes, seed, ft_cfg=None,
                        threads=None):
    """Per-episode accuracies in episode order.

    Without finetuning the dataset is embedded once. With ``ft_cfg`` every
    episode gets its own adapted copy of the model (episodes are independent,
    so they may run on a thread pool).
    """
    if n_episodes < 1:
        raise ContractError("need at least one evaluation episode")
    episodes = [sample_episode(dataset, n_way, k_shot, m_query, episode_streams(seed, e)[0])
                for e in range(n_episodes)]
    if ft_cfg is None:
        cache = EmbeddedDataset(model, dataset)
        return np.array([cache.episode_accuracy(ep) for ep in episodes])
    snapshot = model.snapshot()

    def one(e):
        _, ft_rng = episode_streams(seed, e)
        adapted = finetune(snapshot, episodes[e], ft_cfg, ft_rng)
        return evaluate_episode(adapted, episodes[e])

    workers = threads or eval_threads()
    if workers == 1:
        return np.array([one(e) for e in range(n_episodes)])
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return np.array(list(pool.map(one, range(n_episodes))))


# ---------------------------------------------------------------------------
# loss comparison: clean vs adversarial vs random-style vs swapped-style


def _restyled_loss(model, x, y, styles):
    h = Tensor(x)
    with T.no_grad():
        for i, (mu, sigma) in enumerate(styles, start=1):
            h = adain(model.block(i, h), Tensor(mu), Tensor(sigma))
        return float(cross_entropy(model.classifier(T.global_avgpool(h)), y).data)


def _chain(model, x, per_block):
    styles, h = [], x
    with T.no_grad():
        for i in range(1, model.n_blocks + 1):
            F = model.block(i, Tensor(h)).data
            mu, sigma = per_block(F)
            styles.append((mu, sigma))
            h = adain_arrays(F, mu, sigma)
    return styles


def loss_comparison(model, episode, eps, k_rt, gauss_k, rng, sigma_min=1e-6):
    """L_cls on one episode under clean, adversarial, Gaussian and swapped styles."""
    model = model.snapshot()
    x, y = episode.images, episode.y_global
    with T.no_grad():
        clean = float(model.cls_loss(Tensor(x), y).data)
    cfg = AttackConfig(k_rt=k_rt, sigma_min=sigma_min)
    adv = synthesize_styles(x, y, model, eps, cfg, rng)
    gauss = _chain(model, x, lambda F: style_gauss(*style_arrays(F), gauss_k, rng, sigma_min))
    perm = rng.permutation(len(x))

    def swap(F):
        mu, sigma = style_arrays(F)
        return mu[perm], sigma[perm]

    return {
        "clean": clean,
        "adversarial": _restyled_loss(model, x, y, adv.styles),
        "gauss": _restyled_loss(model, x, y, gauss),
        "swap": _restyled_loss(model, x, y, _chain(model, x, swap)),
    }


def sign_test_p(deltas):
    """One-sided sign test p-value for 'deltas tend to be positive' (zeros dropped)."""
    deltas = np.asarray(deltas)
    pos = int(np.sum(deltas > 0))
    n = int(np.sum(deltas != 0))
    if n == 0:
        return 1.0
    tail = sum(math.comb(n, k) for k in range(pos, n + 1))
    return float(tail / 2 ** n)


def summarize_loss_comparison(records):
    clean = np.array([r["clean"] for r in records])
    out = {"episodes": len(records), "clean_mean": float(clean.mean()),
           "clean_std": float(clean.std(ddof=1)) if len(records) > 1 else 0.0}
    for kind in ("adversarial", "gauss", "swap"):
        d = np.array([r[kind] for r in records]) - clean
        out[kind] = {"mean_delta": float(d.mean()), "frac_increase": float(np.mean(d > 0)),
                     "sign_test_p": sign_test_p(d)}
    return out
