"""Layers, losses and optimizers built on :mod:`styleadv.tensor`."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, DomainError, NumericsError, ShapeError
from .tensor import Tensor

DEFAULT_CHANNELS = (3, 16, 32, 64)


def kaiming_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class ConvBlock:
    """conv3x3 (pad 1) -> relu -> avgpool 2x2."""

    def __init__(self, c_in, c_out, rng):
        self.weight = Tensor(kaiming_uniform(rng, (c_out, c_in, 3, 3), c_in * 9), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def __call__(self, x, weight=None, bias=None):
        w = self.weight if weight is None else weight
        b = self.bias if bias is None else bias
        return T.avgpool2d(T.relu(T.conv2d(x, w, b, padding=1)), 2)


class BackboneCNN:
    """Block-structured embedding network E = E3 . E2 . E1 followed by global pooling.

    ``channels`` gives the channel plan; one block per consecutive pair.
    """

    def __init__(self, rng, channels=DEFAULT_CHANNELS):
        self.channels = tuple(int(c) for c in channels)
        self.blocks = [ConvBlock(a, b, rng) for a, b in zip(self.channels[:-1], self.channels[1:])]

    @property
    def n_blocks(self):
        return len(self.blocks)

    @property
    def embed_dim(self):
        return self.channels[-1]

    def params(self):
        out = {}
        for i, block in enumerate(self.blocks, start=1):
            for name, p in block.params().items():
                out[f"backbone.block{i}.{name}"] = p
        return out

    def block(self, i, x):
        """Apply block ``i`` (1-based)."""
        return self.blocks[i - 1](x)

    def forward(self, x):
        x = T.as_tensor(x)
        if x.ndim != 4 or x.shape[1] != self.channels[0]:
            raise ShapeError(f"backbone expects B x {self.channels[0]} x H x W input, got {x.shape}")
        feats = []
        h = x
        for block in self.blocks:
            h = block(h)
            feats.append(h)
        return feats, T.global_avgpool(h)


def backbone_forward(backbone, x):
    """Return ``(F1, ..., Fn, embedding)`` for an image batch."""
    feats, emb = backbone.forward(x)
    return (*feats, emb)


class GlobalClassifier:
    def __init__(self, in_dim, n_classes, rng):
        self.weight = Tensor(kaiming_uniform(rng, (in_dim, n_classes), in_dim), requires_grad=True)
        self.bias = Tensor(np.zeros(n_classes), requires_grad=True)

    @property
    def n_classes(self):
        return self.weight.shape[1]

    def params(self):
        return {"classifier.weight": self.weight, "classifier.bias": self.bias}

    def __call__(self, emb):
        return T.matmul(emb, self.weight) + self.bias


class PatchEmbedStub:
    """Token-shaped features: affine projection of P x P patches plus a position table.

    Tokens are emitted in row-major patch order; no class token.
    """

    def __init__(self, rng, patch_side=8, in_channels=3, dim=16, n_tokens=16):
        self.patch_side = patch_side
        fan_in = in_channels * patch_side * patch_side
        self.weight = Tensor(kaiming_uniform(rng, (fan_in, dim), fan_in), requires_grad=True)
        self.bias = Tensor(np.zeros(dim), requires_grad=True)
        self.position = Tensor(np.zeros((n_tokens, dim)), requires_grad=True)

    def params(self):
        return {"patch.weight": self.weight, "patch.bias": self.bias, "patch.position": self.position}

    def __call__(self, x):
        return patch_embed(x, self.patch_side, self.weight, self.bias, self.position)


def patch_embed(x, patch_side, weight, bias, position):
    x = T.as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"patch_embed expects B x C x H x W, got {x.shape}")
    B, C, H, W = x.shape
    s = int(patch_side)
    if s <= 0 or H % s or W % s or H != W:
        raise ShapeError(f"{H}x{W} image does not split into square patches of side {s}")
    P = H // s
    if position.shape[0] != P * P:
        raise ShapeError(f"position table has {position.shape[0]} rows, need {P * P}")
    patches = T.reshape(x, (B, C, P, s, P, s))
    patches = T.transpose(patches, (0, 2, 4, 1, 3, 5))
    flat = T.reshape(patches, (B * P * P, C * s * s))
    tokens = T.reshape(T.matmul(flat, weight) + bias, (B, P * P, weight.shape[1]))
    return tokens + position


# ---------------------------------------------------------------------------
# few-shot head and losses


def _one_hot(labels, n):
    out = np.zeros((len(labels), n))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def proto_logits(support_emb, support_labels, query_emb, n_way=None):
    """Negative squared Euclidean distance from each query to each class mean."""
    labels = np.asarray(support_labels, dtype=np.int64)
    n = int(labels.max()) + 1 if n_way is None else int(n_way)
    counts = np.bincount(labels, minlength=n)
    if len(counts) > n or np.any(counts == 0):
        raise ContractError(f"every class in [0, {n}) needs support embeddings, got counts {counts.tolist()}")
    avg = _one_hot(labels, n).T / counts[:, None]
    protos = T.matmul(Tensor(avg), support_emb)
    q = T.as_tensor(query_emb)
    d = q.shape[1]
    diff = T.reshape(q, (q.shape[0], 1, d)) - T.reshape(protos, (1, n, d))
    return -T.reduce_sum(diff * diff, axis=2)


def predict(logits):
    """Argmax per row; ties go to the lowest class index."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return np.argmax(data, axis=1)


def cross_entropy(scores, labels):
    labels = np.asarray(labels, dtype=np.int64)
    scores = T.as_tensor(scores)
    n = scores.shape[1]
    if labels.shape != (scores.shape[0],) or labels.min(initial=0) < 0 or labels.max(initial=0) >= n:
        raise ContractError(f"labels must be {scores.shape[0]} ints in [0, {n})")
    picked = T.reduce_sum(T.log_softmax(scores) * Tensor(_one_hot(labels, n)), axis=1)
    return -T.reduce_mean(picked)


def kl_divergence(p, p_adv):
    """(1 / (B N)) sum_ij p_ij (log p_ij - log p_adv_ij) over probability rows, 0 log 0 := 0."""
    p, p_adv = T.as_tensor(p), T.as_tensor(p_adv)
    if p.shape != p_adv.shape or p.ndim != 2:
        raise ShapeError(f"kl_divergence: shapes {p.shape} and {p_adv.shape}")
    if np.any(p.data < 0) or np.any(p_adv.data < 0):
        raise DomainError("kl_divergence: negative probability")
    for name, t in (("P", p), ("P_adv", p_adv)):
        if np.any(np.abs(t.data.sum(axis=1) - 1.0) > 1e-6):
            raise ContractError(f"kl_divergence: rows of {name} must sum to 1")
    both_zero = (p.data == 0) & (p_adv.data == 0)
    log_p = T.log(p + Tensor((p.data == 0).astype(float)))
    log_q = T.log(p_adv + Tensor(both_zero.astype(float)))
    B, N = p.shape
    return T.scale(T.reduce_sum(p * (log_p - log_q)), 1.0 / (B * N))


def kl_divergence_logits(logits, logits_adv):
    """Same quantity as :func:`kl_divergence` with P = softmax(logits), computed in log space."""
    log_p = T.log_softmax(logits)
    log_q = T.log_softmax(logits_adv)
    B, N = log_p.shape
    return T.scale(T.reduce_sum(T.exp(log_p) * (log_p - log_q)), 1.0 / (B * N))


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class OptimizerState:
    kind: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    buffers: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise ContractError(f"unknown optimizer kind {self.kind!r}")


def optimizer_step(state, params, grads):
    """Update ``params`` (name -> Tensor) from ``grads`` and return them.

    Parameter arrays are replaced, never written in place, so earlier
    snapshots keep their values.
    """
    updates = {}
    for name, p in params.items():
        g = grads.get(p) if hasattr(grads, "get") else None
        if g is None:
            continue
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericsError(f"non-finite gradient for {name}")
        updates[name] = g
    state.step += 1
    t = state.step
    for name, g in updates.items():
        p = params[name]
        if state.kind == "sgd":
            v = state.buffers.get(name)
            v = g if v is None else state.momentum * v + g
            state.buffers[name] = v
            p.data = p.data - state.lr * v
        else:
            m, v = state.buffers.get(name, (np.zeros_like(g), np.zeros_like(g)))
            m = state.beta1 * m + (1 - state.beta1) * g
            v = state.beta2 * v + (1 - state.beta2) * g * g
            state.buffers[name] = (m, v)
            m_hat = m / (1 - state.beta1 ** t)
            v_hat = v / (1 - state.beta2 ** t)
            p.data = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params
