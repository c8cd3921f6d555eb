"""The StyleAdv network: backbone E, global classifier f_cls, prototypical head f_fsl."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .nn import DEFAULT_CHANNELS, BackboneCNN, GlobalClassifier, cross_entropy, predict, proto_logits
from .errors import FormatError
from .tensor import Tensor


class StyleAdvModel:
    def __init__(self, n_classes=64, channels=DEFAULT_CHANNELS, seed=0):
        rng = np.random.default_rng(seed)
        self.backbone = BackboneCNN(rng, channels)
        self.classifier = GlobalClassifier(self.backbone.embed_dim, n_classes, rng)

    @property
    def n_blocks(self):
        return self.backbone.n_blocks

    @property
    def n_classes(self):
        return self.classifier.n_classes

    def params(self):
        out = dict(self.backbone.params())
        out.update(self.classifier.params())
        return out

    def backbone_params(self):
        return self.backbone.params()

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.params().items()}

    def load_state_dict(self, state):
        params = self.params()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise FormatError(f"checkpoint mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise FormatError(f"{name}: checkpoint shape {arr.shape}, model {p.shape}")
            p.data = arr.copy()
        return self

    @classmethod
    def from_state_dict(cls, state):
        blocks = sorted(k for k in state if k.startswith("backbone.") and k.endswith(".weight"))
        if not blocks or "classifier.weight" not in state:
            raise FormatError("checkpoint does not describe a StyleAdv model")
        shapes = [np.shape(state[f"backbone.block{i}.weight"]) for i in range(1, len(blocks) + 1)]
        channels = [shapes[0][1]] + [s[0] for s in shapes]
        model = cls(n_classes=np.shape(state["classifier.weight"])[1], channels=channels)
        return model.load_state_dict(state)

    def snapshot(self):
        """Frozen copy sharing parameter arrays; nothing in it requires gradients."""
        clone = object.__new__(StyleAdvModel)
        clone.backbone = object.__new__(BackboneCNN)
        clone.backbone.channels = self.backbone.channels
        clone.backbone.blocks = []
        for block in self.backbone.blocks:
            b = object.__new__(type(block))
            b.weight = Tensor(block.weight.data)
            b.bias = Tensor(block.bias.data)
            clone.backbone.blocks.append(b)
        clone.classifier = object.__new__(GlobalClassifier)
        clone.classifier.weight = Tensor(self.classifier.weight.data)
        clone.classifier.bias = Tensor(self.classifier.bias.data)
        return clone

    def copy(self):
        """Independent trainable copy."""
        clone = self.snapshot()
        for p in clone.params().values():
            p.data = p.data.copy()
            p.requires_grad = True
        return clone

    # -- forward paths -----------------------------------------------------

    def block(self, i, x):
        return self.backbone.block(i, x)

    def features(self, x):
        return self.backbone.forward(x)

    def embed(self, x):
        return self.backbone.forward(x)[1]

    def embed_from(self, i, F):
        """Run blocks i+1..n on block-i output ``F`` and pool."""
        h = F
        for j in range(i + 1, self.n_blocks + 1):
            h = self.backbone.block(j, h)
        return T.global_avgpool(h)

    def cls_loss(self, x, y_global):
        return cross_entropy(self.classifier(self.embed(x)), y_global)

    def cls_loss_from(self, i, F, y_global):
        """Global classification loss with block-i output replaced by ``F`` (i = 0 means images)."""
        return cross_entropy(self.classifier(self.embed_from(i, F)), y_global)

    def embed_numpy(self, x, batch=256):
        x = np.asarray(x, dtype=np.float64)
        out = []
        with T.no_grad():
            for lo in range(0, len(x), batch):
                out.append(self.embed(Tensor(x[lo:lo + batch])).data)
        return np.concatenate(out) if out else np.zeros((0, self.backbone.embed_dim))

    def fsl_logits(self, support_emb, support_labels, query_emb, n_way=None):
        return proto_logits(support_emb, support_labels, query_emb, n_way)

    def predict_episode(self, episode):
        emb = self.embed_numpy(np.concatenate([episode.support, episode.query]))
        ns = len(episode.support)
        with T.no_grad():
            logits = proto_logits(Tensor(emb[:ns]), episode.y_support, Tensor(emb[ns:]), episode.n_way)
        return predict(logits)
