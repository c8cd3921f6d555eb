"""Synthetic style-shifted domains, the dataset file format, and episode sampling."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError

DATASET_MAGIC = b"SDST"
DATASET_VERSION = 1
_HEADER = struct.Struct("<4sIIIIII")
_RECORD = struct.Struct("<II")

FAMILIES = ("bars", "rings", "checker", "blobs")


@dataclass(frozen=True)
class StyleLaw:
    """Per-image channel gain g ~ LogNormal(gain_mu[c], gain_s), bias b ~ N(bias_mu[c], bias_s),
    then x = clip(g * content ** contrast + b, 0, 1)."""
    gain_mu: tuple = (0.0, 0.0, 0.0)
    gain_s: float = 0.0
    bias_mu: tuple = (0.0, 0.0, 0.0)
    bias_s: float = 0.0
    contrast: float = 1.0


@dataclass(frozen=True)
class SyntheticDomainSpec:
    domain_id: int
    name: str
    classes: tuple
    images_per_class: int = 30
    style: StyleLaw = field(default_factory=StyleLaw)
    seed: int = 0
    content_seed: int = 1234
    size: int = 32
    channels: int = 3
    noise: float = 0.05


@dataclass
class Dataset:
    images: np.ndarray          # n x C x H x W, float32
    labels: np.ndarray          # n, int64 global class ids
    domain_id: int = 0

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ContractError("images and labels differ in length")

    def __len__(self):
        return len(self.labels)

    @property
    def classes(self):
        return np.unique(self.labels)

    @property
    def n_classes(self):
        return len(self.classes)

    @cached_property
    def class_indices(self):
        return {int(c): np.flatnonzero(self.labels == c) for c in self.classes}

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.domain_id == other.domain_id
                and self.images.shape == other.images.shape
                and self.images.tobytes() == other.images.tobytes()
                and np.array_equal(self.labels, other.labels))


# ---------------------------------------------------------------------------
# content generators


def _class_params(class_id, content_seed):
    rng = np.random.default_rng([content_seed, class_id])
    return {
        "family": FAMILIES[class_id % len(FAMILIES)],
        "theta": rng.uniform(0, np.pi),
        "freq": rng.uniform(1.5, 5.0),
        "center": rng.uniform(-0.2, 0.2, size=2),
        "blobs": rng.uniform(-0.35, 0.35, size=(3, 2)),
        "widths": rng.uniform(0.06, 0.16, size=3),
    }


def content_patterns(class_id, n, size=32, content_seed=1234, seed=0, noise=0.05):
    """n grayscale patterns in [0, 1] for one class, shape n x size x size.

    Class parameters depend only on (content_seed, class_id); per-image jitter
    (phase, small rotation/frequency/translation changes, pixel noise) is
    drawn from (seed, class_id).
    """
    p = _class_params(class_id, content_seed)
    rng = np.random.default_rng([seed, content_seed, class_id, 7])
    grid = (np.arange(size) + 0.5) / size - 0.5
    v, u = np.meshgrid(grid, grid, indexing="ij")
    u, v = u[None], v[None]
    theta = p["theta"] + rng.normal(0, 0.12, size=(n, 1, 1))
    freq = p["freq"] * np.exp(rng.normal(0, 0.08, size=(n, 1, 1)))
    phase = rng.uniform(0, 2 * np.pi, size=(n, 1, 1))
    shift = rng.normal(0, 0.04, size=(n, 2, 1, 1))
    uu, vv = u - shift[:, 0], v - shift[:, 1]
    if p["family"] == "bars":
        img = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (uu * np.cos(theta) + vv * np.sin(theta)) + phase)
    elif p["family"] == "rings":
        r = np.hypot(uu - p["center"][0], vv - p["center"][1])
        img = 0.5 + 0.5 * np.sin(2 * np.pi * freq * r + phase)
    elif p["family"] == "checker":
        a = uu * np.cos(theta) + vv * np.sin(theta)
        b = -uu * np.sin(theta) + vv * np.cos(theta)
        img = 0.5 + 0.5 * np.tanh(3 * np.sin(np.pi * freq * a + phase) * np.sin(np.pi * freq * b))
    else:
        img = np.zeros((n, size, size))
        jitter = rng.normal(0, 0.03, size=(n, 3, 2))
        for k in range(3):
            cx = p["blobs"][k, 0] + jitter[:, k, 0, None, None]
            cy = p["blobs"][k, 1] + jitter[:, k, 1, None, None]
            img = img + np.exp(-((uu - cx) ** 2 + (vv - cy) ** 2) / (2 * p["widths"][k] ** 2))
        img = img / img.max(axis=(1, 2), keepdims=True)
    img = img + noise * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0)


def apply_style_law(content, law, rng, channels=3):
    """content: n x H x W in [0, 1] -> n x C x H x W styled images."""
    n = len(content)
    gain_mu = np.broadcast_to(np.asarray(law.gain_mu, dtype=np.float64), (channels,))
    bias_mu = np.broadcast_to(np.asarray(law.bias_mu, dtype=np.float64), (channels,))
    g = np.exp(gain_mu + law.gain_s * rng.standard_normal((n, channels)))
    b = bias_mu + law.bias_s * rng.standard_normal((n, channels))
    base = content[:, None] if law.contrast == 1.0 else content[:, None] ** law.contrast
    return np.clip(g[:, :, None, None] * base + b[:, :, None, None], 0.0, 1.0)


def generate_domain(spec, min_per_class=2):
    """Deterministic dataset for one domain."""
    if len(spec.classes) < 2:
        raise ContractError("a domain needs at least 2 classes")
    if spec.images_per_class < min_per_class:
        raise ContractError(f"{spec.images_per_class} images per class, need >= {min_per_class}")
    style_rng = np.random.default_rng([spec.seed, spec.domain_id, 99])
    images, labels = [], []
    for c in spec.classes:
        content = content_patterns(int(c), spec.images_per_class, spec.size, spec.content_seed,
                                   spec.seed, spec.noise)
        images.append(apply_style_law(content, spec.style, style_rng, spec.channels))
        labels.append(np.full(spec.images_per_class, int(c)))
    return Dataset(np.concatenate(images).astype(np.float32), np.concatenate(labels), spec.domain_id)


SOURCE_LAW = StyleLaw(gain_mu=(0.0, 0.0, 0.0), gain_s=0.1, bias_mu=(0.0, 0.0, 0.0), bias_s=0.05)
TARGET_LAWS = (
    StyleLaw(gain_mu=(-0.2, 0.0, 0.2), gain_s=0.15, bias_mu=(0.1, 0.0, -0.05), bias_s=0.05, contrast=1.2),
    StyleLaw(gain_mu=(-0.5, 0.2, 0.3), gain_s=0.25, bias_mu=(0.15, -0.1, 0.1), bias_s=0.1, contrast=0.7),
    StyleLaw(gain_mu=(0.4, -0.6, -0.3), gain_s=0.35, bias_mu=(-0.1, 0.25, 0.2), bias_s=0.12, contrast=1.6),
    StyleLaw(gain_mu=(-0.9, 0.5, -0.5), gain_s=0.45, bias_mu=(0.3, -0.2, 0.3), bias_s=0.15, contrast=0.5),
)


def default_benchmark(seed=0, images_per_class=30):
    """Source (64 classes), validation (source style, 16 novel classes) and 4 targets
    (20 novel classes, increasingly divergent style laws)."""
    specs = [
        SyntheticDomainSpec(0, "source", tuple(range(64)), images_per_class, SOURCE_LAW, seed),
        SyntheticDomainSpec(1, "validation", tuple(range(64, 80)), images_per_class, SOURCE_LAW, seed + 1),
    ]
    for i, law in enumerate(TARGET_LAWS, start=1):
        specs.append(SyntheticDomainSpec(1 + i, f"target{i}", tuple(range(80, 100)), images_per_class,
                                         law, seed + 1 + i))
    return specs


# ---------------------------------------------------------------------------
# episodes


@dataclass
class Episode:
    support: np.ndarray
    query: np.ndarray
    y_support_global: np.ndarray
    y_query_global: np.ndarray
    y_support: np.ndarray
    y_query: np.ndarray
    n_way: int
    support_idx: np.ndarray = None
    query_idx: np.ndarray = None

    @property
    def images(self):
        return np.concatenate([self.support, self.query])

    @property
    def y_global(self):
        return np.concatenate([self.y_support_global, self.y_query_global])

    @property
    def y_fsl(self):
        return np.concatenate([self.y_support, self.y_query])

    @property
    def n_support(self):
        return len(self.support)

    def with_images(self, images):
        images = np.asarray(images, dtype=np.float64)
        ns = len(self.support)
        return replace(self, support=images[:ns], query=images[ns:])


def relabel_fsl(y_support_global, y_query_global=()):
    """Map global ids to [0, N) by order of first appearance in the support set."""
    order = {}
    for g in np.asarray(y_support_global).tolist():
        order.setdefault(g, len(order))
    ys = np.array([order[g] for g in np.asarray(y_support_global).tolist()], dtype=np.int64)
    yq = []
    for g in np.asarray(y_query_global).tolist():
        if g not in order:
            raise ContractError(f"query label {g} does not occur in the support set")
        yq.append(order[g])
    return ys, np.array(yq, dtype=np.int64)


def sample_episode(dataset, n_way, k_shot, m_query, rng):
    classes = dataset.classes
    if n_way > len(classes):
        raise ContractError(f"{n_way}-way episode from a {len(classes)}-class dataset")
    by_class = dataset.class_indices
    if any(len(by_class[int(c)]) < k_shot + m_query for c in classes):
        raise ContractError(f"every class needs >= {k_shot + m_query} images")
    chosen = rng.choice(classes, size=n_way, replace=False)
    s_idx, q_idx = [], []
    for c in chosen:
        idx = rng.choice(by_class[int(c)], size=k_shot + m_query, replace=False)
        s_idx.append(idx[:k_shot])
        q_idx.append(idx[k_shot:])
    s_idx, q_idx = np.concatenate(s_idx), np.concatenate(q_idx)
    ys_g, yq_g = dataset.labels[s_idx], dataset.labels[q_idx]
    ys, yq = relabel_fsl(ys_g, yq_g)
    return Episode(
        support=dataset.images[s_idx].astype(np.float64),
        query=dataset.images[q_idx].astype(np.float64),
        y_support_global=ys_g, y_query_global=yq_g,
        y_support=ys, y_query=yq, n_way=n_way,
        support_idx=s_idx, query_idx=q_idx,
    )


# ---------------------------------------------------------------------------
# file format


def write_dataset(dataset, path):
    imgs = np.ascontiguousarray(dataset.images, dtype="<f4")
    n, C, H, W = imgs.shape if imgs.ndim == 4 else (0, 0, 0, 0)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, n, dataset.n_classes, H, W, C))
        for i in range(n):
            fh.write(_RECORD.pack(int(dataset.labels[i]), int(dataset.domain_id)))
            fh.write(imgs[i].tobytes())


def read_dataset(path):
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, n, n_classes, H, W, C = _HEADER.unpack_from(raw, 0)
    if magic != DATASET_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != DATASET_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    pix = C * H * W
    rec = _RECORD.size + 4 * pix
    if len(raw) != _HEADER.size + n * rec:
        raise FormatError(f"{path}: header promises {n} records, file holds {(len(raw) - _HEADER.size) / rec:g}")
    labels = np.empty(n, dtype=np.int64)
    images = np.empty((n, C, H, W), dtype=np.float32)
    domain = 0
    off = _HEADER.size
    for i in range(n):
        labels[i], domain = _RECORD.unpack_from(raw, off)
        images[i] = np.frombuffer(raw, dtype="<f4", count=pix, offset=off + _RECORD.size).reshape(C, H, W)
        off += rec
    ds = Dataset(images, labels, domain)
    if n and ds.n_classes != n_classes:
        raise FormatError(f"{path}: header class count {n_classes}, records hold {ds.n_classes}")
    return ds
