"""Datasets: IDX (MNIST format) files, synthetic Gaussian tasks, context labels, batching."""
import json
import struct
from dataclasses import dataclass, replace

import numpy as np

from . import gmm
from .errors import ConfigError, FormatError, ShapeError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
_MAGIC_NAMES = {IDX_IMAGES_MAGIC: "image file", IDX_LABELS_MAGIC: "label file"}


@dataclass(frozen=True)
class LabeledDataset:
    """Features with class labels and one context label per row.

    ``features`` is ``(M, D)`` or ``(M, C, H, W)``.
    """

    features: np.ndarray
    labels: np.ndarray
    contexts: np.ndarray
    t: int
    num_classes: int
    provenance: str = ""

    def __post_init__(self):
        m = self.features.shape[0]
        if self.labels.shape != (m,) or self.contexts.shape != (m,):
            raise ShapeError(f"features ({m} rows), labels {self.labels.shape} and "
                             f"contexts {self.contexts.shape} must have equal length")
        if m and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ShapeError(f"class labels must lie in [0, {self.num_classes})")
        if m and (self.contexts.min() < 0 or self.contexts.max() >= self.t):
            raise ShapeError(f"context labels must lie in [0, {self.t})")

    def __len__(self):
        return self.features.shape[0]

    @property
    def input_shape(self):
        return tuple(self.features.shape[1:])

    def subset(self, idx):
        idx = np.asarray(idx)
        return replace(self, features=self.features[idx], labels=self.labels[idx],
                       contexts=self.contexts[idx])

    def flat_features(self):
        return self.features.reshape(len(self), -1)


# --------------------------------------------------------------------------
# IDX

def _header(data, magic, ndims):
    need = 4 * (ndims + 1)
    if len(data) < 4:
        raise FormatError(f"IDX data truncated: {len(data)} bytes, header needs {need}")
    (found,) = struct.unpack(">I", data[:4])
    if found != magic:
        what = _MAGIC_NAMES.get(found, "unknown IDX type")
        raise FormatError(f"bad IDX magic: expected 0x{magic:08X} ({_MAGIC_NAMES[magic]}), "
                          f"got 0x{found:08X} ({what})")
    if len(data) < need:
        raise FormatError(f"IDX header truncated: {len(data)} bytes, need {need}")
    return struct.unpack(f">{ndims}I", data[4:need]), need


def _payload(data, offset, count):
    have = len(data) - offset
    if have < count:
        raise FormatError(f"IDX payload truncated: expected {count} bytes, got {have}")
    if have > count:
        raise FormatError(f"IDX payload has {have - count} trailing bytes beyond the declared {count}")
    return np.frombuffer(data, dtype=np.uint8, count=count, offset=offset)


def parse_idx_images(data):
    """Image file bytes -> ``(M, 1, H, W)`` float array scaled to [0, 1]."""
    (m, h, w), off = _header(bytes(data), IDX_IMAGES_MAGIC, 3)
    pixels = _payload(bytes(data), off, m * h * w)
    return pixels.reshape(m, 1, h, w).astype(np.float64) / 255.0


def parse_idx_labels(data):
    """Label file bytes -> int64 vector."""
    (m,), off = _header(bytes(data), IDX_LABELS_MAGIC, 1)
    return _payload(bytes(data), off, m).astype(np.int64)


def encode_idx_images(images):
    """Inverse of :func:`parse_idx_images` (values are rounded back to bytes)."""
    images = np.asarray(images)
    if images.ndim == 4:
        if images.shape[1] != 1:
            raise ShapeError("IDX images carry a single channel")
        images = images[:, 0]
    if images.ndim != 3:
        raise ShapeError(f"expected (M, H, W) or (M, 1, H, W), got {images.shape}")
    if images.dtype != np.uint8:
        images = np.clip(np.rint(np.asarray(images, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    m, h, w = images.shape
    return struct.pack(">4I", IDX_IMAGES_MAGIC, m, h, w) + images.tobytes()


def encode_idx_labels(labels):
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
        raise ShapeError("IDX labels must fit in one unsigned byte")
    return struct.pack(">2I", IDX_LABELS_MAGIC, labels.shape[0]) + labels.astype(np.uint8).tobytes()


def load_idx_dataset(images_path, labels_path, limit=None):
    with open(images_path, "rb") as fh:
        images = parse_idx_images(fh.read())
    with open(labels_path, "rb") as fh:
        labels = parse_idx_labels(fh.read())
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{images_path} holds {images.shape[0]} images but {labels_path} "
                          f"holds {labels.shape[0]} labels")
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    return LabeledDataset(images, labels, np.zeros(len(labels), dtype=np.int64), 1,
                          int(labels.max()) + 1 if len(labels) else 1,
                          provenance=str(images_path))


# --------------------------------------------------------------------------
# synthetic tasks

SYNTH_KEYS = ("contexts", "classes_per_context", "dim", "samples_per_class", "mean_scale",
              "noise_scale", "seed")


def _positive(spec, *keys):
    for key in keys:
        if key not in spec:
            raise ConfigError(f"synthetic spec is missing {key!r}")
        if not spec[key] > 0:
            raise ConfigError(f"synthetic spec {key!r} must be positive, got {spec[key]!r}")


def _synth_params(spec, rng):
    t, k, d = int(spec["contexts"]), int(spec["classes_per_context"]), int(spec["dim"])
    ms = float(spec["mean_scale"])
    centres = rng.normal(0.0, ms, size=(t, d))
    spreads = rng.uniform(0.5, 2.0, size=t)
    offsets = rng.normal(0.0, ms, size=(t, k, d))
    return centres, spreads, offsets


def synth_mixture_params(spec):
    """``(centres, spreads, offsets)`` used by :func:`synth_mixture_dataset` for ``spec``."""
    return _synth_params(spec, np.random.default_rng(int(spec.get("seed", 0))))


def synth_mixture_dataset(spec):
    """Gaussian classes grouped into contexts.

    Context ``r`` owns classes ``r*K .. r*K+K-1`` (``K = classes_per_context``),
    like superclasses grouping fine classes.  Each context has a centre and a
    spread, ``centre_r ~ N(0, mean_scale^2 I)`` and ``spread_r`` uniform in
    [0.5, 2]; each class draws ``offset ~ N(0, mean_scale^2 I)`` and its samples
    are ``centre_r + spread_r * (offset + N(0, noise_scale^2 I))``.
    """
    _positive(spec, "contexts", "classes_per_context", "dim", "samples_per_class")
    _positive(spec, "mean_scale", "noise_scale")
    t, k, d, n = (int(spec[key]) for key in SYNTH_KEYS[:4])
    ns = float(spec["noise_scale"])
    rng = np.random.default_rng(int(spec.get("seed", 0)))
    centres, spreads, offsets = _synth_params(spec, rng)
    feats, labels, ctx = [], [], []
    for r in range(t):
        for j in range(k):
            noise = rng.normal(0.0, ns, size=(n, d))
            feats.append(centres[r] + spreads[r] * (offsets[r, j] + noise))
            labels.append(np.full(n, r * k + j))
            ctx.append(np.full(n, r))
    return LabeledDataset(np.concatenate(feats), np.concatenate(labels).astype(np.int64),
                          np.concatenate(ctx).astype(np.int64), t, t * k,
                          provenance=f"synthetic:seed={spec.get('seed', 0)}")


def synth_domain_dataset(classes, dim, samples_per_class, mean_scale=1.0, noise_scale=1.0,
                         shift=3.0, scale=2.5, target_samples_per_class=None, seed=0):
    """Source / target pair sharing class structure.

    Source samples are ``offset_k + noise``; target samples pass the same
    generator through ``scale * x + shift * u`` with a random unit direction
    ``u``.  Returns ``(source, target)`` with context 0 on both; combine them
    with :func:`merge_domains`.
    """
    for name, v in (("classes", classes), ("dim", dim), ("samples_per_class", samples_per_class)):
        if not v > 0:
            raise ConfigError(f"{name} must be positive, got {v!r}")
    rng = np.random.default_rng(seed)
    offsets = rng.normal(0.0, mean_scale, size=(classes, dim))
    direction = rng.normal(size=dim)
    direction /= np.linalg.norm(direction)
    n_t = samples_per_class if target_samples_per_class is None else target_samples_per_class

    def draw(n):
        x = offsets[:, None, :] + rng.normal(0.0, noise_scale, size=(classes, n, dim))
        return x.reshape(-1, dim), np.repeat(np.arange(classes), n)

    xs, ys = draw(samples_per_class)
    xt, yt = draw(n_t)
    xt = scale * xt + shift * direction
    zeros = np.zeros
    src = LabeledDataset(xs, ys, zeros(len(ys), dtype=np.int64), 1, classes, f"source:seed={seed}")
    tgt = LabeledDataset(xt, yt, zeros(len(yt), dtype=np.int64), 1, classes, f"target:seed={seed}")
    return src, tgt


def merge_domains(*datasets):
    """Concatenate datasets, tagging rows of the i-th dataset with context i."""
    if not datasets:
        raise ConfigError("need at least one dataset to merge")
    feats = np.concatenate([ds.features for ds in datasets])
    labels = np.concatenate([ds.labels for ds in datasets])
    ctx = np.concatenate([np.full(len(ds), i, dtype=np.int64) for i, ds in enumerate(datasets)])
    return LabeledDataset(feats, labels, ctx, len(datasets),
                          max(ds.num_classes for ds in datasets),
                          provenance="+".join(ds.provenance for ds in datasets))


def head_per_class(dataset, n):
    """Split into (first ``n`` rows of every class, the rest), preserving order."""
    take = np.zeros(len(dataset), dtype=bool)
    for cls in np.unique(dataset.labels):
        take[np.flatnonzero(dataset.labels == cls)[:n]] = True
    return dataset.subset(np.flatnonzero(take)), dataset.subset(np.flatnonzero(~take))


def load_synth_spec(path):
    with open(path) as fh:
        return json.load(fh)


# --------------------------------------------------------------------------
# contexts

def load_superclass_map(path):
    """Read ``{"t": T, "map": {"<class>": <context>}}``; returns ``(mapping, t)``."""
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: not valid JSON ({exc})") from None
    return validate_superclass_map(doc)


def validate_superclass_map(doc):
    try:
        mapping = {int(k): int(v) for k, v in doc["map"].items()}
        t = int(doc["t"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"superclass map malformed: {exc}") from None
    if set(mapping.values()) != set(range(t)):
        raise ConfigError(f"superclass ids must be exactly 0..{t - 1}, got {sorted(set(mapping.values()))}")
    return mapping, t


def assign_contexts(dataset, strategy, mapping=None, t=None, domain=None, model=None, features=None):
    """Rewrite context labels; features and class labels are left untouched.

    ``superclass_map``: ``mapping`` class -> context (``t`` defaults to the
    number of distinct contexts).  ``domain_tag``: ``domain`` is an int or a
    per-row array.  ``gmm``: each row gets the most responsible component of
    ``model`` evaluated on ``features`` (default: the flattened features).
    """
    m = len(dataset)
    if strategy == "superclass_map":
        if mapping is None:
            raise ConfigError("superclass_map strategy needs a mapping")
        missing = sorted(set(np.unique(dataset.labels).tolist()) - set(mapping))
        if missing:
            raise ConfigError(f"classes {missing} have no superclass")
        lut = np.zeros(max(mapping) + 1, dtype=np.int64)
        for cls, sup in mapping.items():
            lut[cls] = sup
        ctx = lut[dataset.labels]
        t = len(set(mapping.values())) if t is None else t
    elif strategy == "domain_tag":
        if domain is None:
            raise ConfigError("domain_tag strategy needs a domain id")
        ctx = np.broadcast_to(np.asarray(domain, dtype=np.int64), (m,)).copy()
        t = int(ctx.max()) + 1 if t is None else t
    elif strategy == "gmm":
        if model is None:
            raise ConfigError("gmm strategy needs a fitted mixture model")
        feats = dataset.flat_features() if features is None else np.asarray(features)
        if feats.shape[0] != m:
            raise ShapeError(f"{feats.shape[0]} feature rows for {m} samples")
        ctx = np.asarray(gmm.assign_component(feats, model), dtype=np.int64).reshape(m)
        t = model.k
    else:
        raise ConfigError(f"unknown context strategy {strategy!r}")
    return replace(dataset, contexts=ctx, t=int(t))


# --------------------------------------------------------------------------
# batching and preprocessing

def batch_iter(dataset, batch_size, seed=0, shuffle=True):
    """Yield ``(features, labels, contexts)``; the last partial batch is kept."""
    if batch_size < 1:
        raise ConfigError(f"batch size must be >= 1, got {batch_size}")
    m = len(dataset)
    order = np.random.default_rng(seed).permutation(m) if shuffle else np.arange(m)
    for start in range(0, m, batch_size):
        idx = order[start:start + batch_size]
        yield dataset.features[idx], dataset.labels[idx], dataset.contexts[idx]


def split(dataset, val_fraction=0.2, seed=0):
    """Random train / validation split."""
    if not 0 < val_fraction < 1:
        raise ConfigError(f"val_fraction must be in (0, 1), got {val_fraction}")
    order = np.random.default_rng(seed).permutation(len(dataset))
    n_val = int(round(len(dataset) * val_fraction))
    return dataset.subset(np.sort(order[n_val:])), dataset.subset(np.sort(order[:n_val]))


def standardization_stats(dataset):
    """Per-channel (images) or per-feature (flat) mean and standard deviation."""
    x = dataset.features
    axes = (0,) if x.ndim == 2 else (0,) + tuple(range(2, x.ndim))
    mean = x.mean(axis=axes, keepdims=True)
    std = x.std(axis=axes, keepdims=True)
    return mean, np.where(std > 0, std, 1.0)


def standardize(dataset, stats=None):
    mean, std = standardization_stats(dataset) if stats is None else stats
    return replace(dataset, features=(dataset.features - mean) / std)
