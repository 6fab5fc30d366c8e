"""Dual-modality datasets: synthetic generation, image loading, sampling.

The synthetic generator builds a controllable two-modality recognition task.
Each class gets a latent identity vector; modality A observes a fixed linear
mixture of it while modality B observes a saturated mixture through a second,
correlated map, warped by a class-dependent multiplicative distortion whose
strength is the gap severity. The gap is therefore nonlinear and not removable
by a global affine map, but grows smoothly from a near-aligned task at
severity 0. Everything is a pure function of the config seed.

Batching follows a class-balanced scheme: P classes per batch, K samples per
modality per class, so every batch carries in-batch positives and class means
by construction, with exact modality balance.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint as ckpt

MODALITIES = ("A", "B")

# Drift between the two mixing maps. Large enough that the maps differ
# everywhere, small enough that severity 0 leaves raw features matchable.
MIX_DRIFT = 0.25

# The class-dependent distortion is mean-shifted so the multiplicative factor
# (1 + severity * (sin + offset)) loses its unit mean as severity grows; a
# mean-one factor would leave raw cross-modal correlation intact no matter
# how large the severity. -0.35 balances an unmatchable raw gap at severity 2
# against a warp a small trunk can still invert.
DISTORTION_OFFSET = -0.35

# Identities live on a low-dimensional latent manifold; a full-rank warp
# would be unlearnable from a few dozen training classes.
LATENT_DIM = 4


@dataclass
class SynthConfig:
    num_classes: int = 50
    samples_per_class_per_modality: int = 16
    raw_dim: int = 64
    gap_severity: float = 2.0
    noise_scale: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.samples_per_class_per_modality < 2:
            raise ValueError("samples_per_class_per_modality must be >= 2")
        if self.raw_dim < 2:
            raise ValueError("raw_dim must be >= 2")
        if self.gap_severity < 0 or self.noise_scale < 0:
            raise ValueError("gap_severity and noise_scale must be >= 0")


@dataclass
class Sample:
    features: np.ndarray
    class_id: int
    modality: str


@dataclass
class Dataset:
    features: np.ndarray     # N x raw_dim (vector) or N x H x W (image)
    class_ids: np.ndarray
    modalities: np.ndarray
    kind: str = "vector"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.class_ids = np.asarray(self.class_ids, dtype=np.int64)
        self.modalities = np.asarray(self.modalities)
        if not (len(self.features) == len(self.class_ids) == len(self.modalities)):
            raise ValueError("features, class_ids and modalities must have equal length")

    def __len__(self):
        return len(self.features)

    def classes(self):
        return np.unique(self.class_ids)

    def subset(self, mask) -> "Dataset":
        return Dataset(self.features[mask], self.class_ids[mask], self.modalities[mask],
                       kind=self.kind, meta=dict(self.meta))

    def summary(self):
        return {
            "samples": len(self),
            "classes": len(self.classes()),
            "per_modality": {m: int((self.modalities == m).sum()) for m in MODALITIES},
            "kind": self.kind,
        }


def generate_synth(cfg: SynthConfig) -> Dataset:
    """Deterministic dual-modality dataset from a seeded config.

    Per class c with latent z_c (LATENT_DIM-dimensional):
      modality A sample = M_A z_c + eps
      modality B sample = tanh(M_B z_c) * (1 + severity * (sin(M_g z_c) + offset)) + eps
    with M_B = M_A + MIX_DRIFT * R and eps ~ N(0, noise_scale^2) per sample.
    """
    rng = np.random.default_rng(cfg.seed)
    dim = cfg.raw_dim
    latent = min(LATENT_DIM, dim)
    z = rng.standard_normal((cfg.num_classes, latent))
    m_a = rng.standard_normal((latent, dim)) / np.sqrt(latent)
    drift = rng.standard_normal((latent, dim)) / np.sqrt(latent)
    m_g = rng.standard_normal((latent, dim)) / np.sqrt(latent)
    m_b = m_a + MIX_DRIFT * drift

    k = cfg.samples_per_class_per_modality
    feats, ids, mods = [], [], []
    for c in range(cfg.num_classes):
        base_a = z[c] @ m_a
        base_b = np.tanh(z[c] @ m_b) * (
            1.0 + cfg.gap_severity * (np.sin(z[c] @ m_g) + DISTORTION_OFFSET))
        eps_a = rng.standard_normal((k, dim)) * cfg.noise_scale
        eps_b = rng.standard_normal((k, dim)) * cfg.noise_scale
        feats.append(base_a[None, :] + eps_a)
        feats.append(base_b[None, :] + eps_b)
        ids.extend([c] * (2 * k))
        mods.extend(["A"] * k + ["B"] * k)
    features = np.concatenate(feats, axis=0).astype(np.float32)
    meta = {"generator": "synth", "seed": cfg.seed,
            "gap_severity": cfg.gap_severity, "noise_scale": cfg.noise_scale}
    return Dataset(features, np.array(ids), np.array(mods), kind="vector", meta=meta)


def split_by_class(ds: Dataset, n_train_classes: int):
    """Class-disjoint split: the first n sorted classes train, the rest are held out."""
    classes = ds.classes()
    if not 0 < n_train_classes < len(classes):
        raise ValueError(f"n_train_classes must be in (0, {len(classes)}), got {n_train_classes}")
    train_classes = set(classes[:n_train_classes].tolist())
    mask = np.isin(ds.class_ids, list(train_classes))
    return ds.subset(mask), ds.subset(~mask)


def raw_nn_rank1(ds: Dataset, gallery_modality="A") -> float:
    """Cross-modal nearest-neighbor identification rate on raw features.

    Brute force; used as the no-learning baseline that shows the modality gap.
    """
    flat = ds.features.reshape(len(ds), -1).astype(np.float64)
    gal = ds.modalities == gallery_modality
    probe = ~gal
    if gal.sum() == 0 or probe.sum() == 0:
        raise ValueError("raw_nn_rank1: need samples in both modalities")
    g_feats, g_ids = flat[gal], ds.class_ids[gal]
    p_feats, p_ids = flat[probe], ds.class_ids[probe]
    hits = 0
    for i in range(len(p_feats)):
        d2 = ((g_feats - p_feats[i]) ** 2).sum(axis=1)
        hits += g_ids[int(d2.argmin())] == p_ids[i]
    return hits / len(p_feats)


# ---------------------------------------------------------------------------
# persistence: tensor container + JSON sidecar


def sidecar_path(path):
    return f"{path}.json"


def save_dataset(ds: Dataset, path):
    """Write features to the binary container and labels to a JSON sidecar."""
    ckpt.save_tensors(path, {"features": ds.features},
                      meta={"kind": ds.kind, "dataset": True})
    sidecar = {
        "class_ids": ds.class_ids.tolist(),
        "modalities": ds.modalities.tolist(),
        "kind": ds.kind,
        "meta": ds.meta,
    }
    with open(sidecar_path(path), "w", encoding="utf-8") as f:
        json.dump(sidecar, f, sort_keys=True, indent=1)
        f.write("\n")


def load_dataset(path) -> Dataset:
    tensors, _ = ckpt.load_tensors(path)
    with open(sidecar_path(path), "r", encoding="utf-8") as f:
        side = json.load(f)
    return Dataset(tensors["features"], np.array(side["class_ids"]),
                   np.array(side["modalities"]), kind=side["kind"], meta=side.get("meta", {}))


# ---------------------------------------------------------------------------
# image directory loading


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray


def fit_normalizer(features: np.ndarray) -> NormStats:
    """Feature-wise mean/std over a training set (computed in float64)."""
    flat = features.reshape(len(features), -1).astype(np.float64)
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    std = np.maximum(std, 1e-12)
    return NormStats(mean=mean.reshape(features.shape[1:]),
                     std=std.reshape(features.shape[1:]))


def apply_normalizer(features: np.ndarray, stats: NormStats) -> np.ndarray:
    return ((features - stats.mean) / stats.std).astype(np.float64)


def _decode_grayscale(path):
    from PIL import Image
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"), dtype=np.float64) / 255.0
    return arr


def center_crop_square(img: np.ndarray) -> np.ndarray:
    """Crop the longer axis, centered, down to the shorter edge."""
    h, w = img.shape
    s = min(h, w)
    top, left = (h - s) // 2, (w - s) // 2
    return img[top:top + s, left:left + s]


def resize_square(img: np.ndarray, side: int) -> np.ndarray:
    from PIL import Image
    pil = Image.fromarray(img.astype(np.float32), mode="F")
    out = pil.resize((side, side), Image.BILINEAR)
    return np.asarray(out, dtype=np.float64)


def load_image_dir(root, side=32, stats: NormStats | None = None,
                   modality_map: dict | None = None):
    """Load root/<class>/<modality>/<file> into an image dataset.

    Images are decoded grayscale, center-cropped square on the shorter edge,
    resized to ``side``, then feature-wise centered and scaled. When ``stats``
    is None (training) the statistics come from the loaded data and are
    returned for reuse; evaluation splits must pass the training stats back in
    so no test information leaks into normalization.

    Returns (Dataset, NormStats).
    """
    from pathlib import Path
    root = Path(root)
    if not root.is_dir():
        raise ValueError(f"{root} is not a directory")
    mapping = {m.lower(): m for m in MODALITIES}
    for alias, target in (modality_map or {}).items():
        if target not in MODALITIES:
            raise ValueError(f"modality_map targets must be in {MODALITIES}")
        mapping[alias.lower()] = target

    feats, ids, mods, class_names = [], [], [], []
    for class_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        cid = len(class_names)
        class_names.append(class_dir.name)
        seen = set()
        for mod_dir in sorted(p for p in class_dir.iterdir() if p.is_dir()):
            modality = mapping.get(mod_dir.name.lower())
            if modality is None:
                raise ValueError(f"{mod_dir}: unknown modality directory "
                                 f"(expected one of {sorted(mapping)})")
            for file in sorted(p for p in mod_dir.iterdir() if p.is_file()):
                try:
                    img = _decode_grayscale(file)
                except Exception as exc:
                    warnings.warn(f"skipping unreadable image {file}: {exc}")
                    continue
                feats.append(resize_square(center_crop_square(img), side))
                ids.append(cid)
                mods.append(modality)
                seen.add(modality)
        if len(seen) < 2:
            raise ValueError(f"class {class_dir.name!r} has samples in only one modality")
    if not feats:
        raise ValueError(f"no usable images under {root}")
    features = np.stack(feats)
    if stats is None:
        stats = fit_normalizer(features)
    features = apply_normalizer(features, stats).astype(np.float32)
    ds = Dataset(features, np.array(ids), np.array(mods), kind="image",
                 meta={"class_names": class_names, "side": side})
    return ds, stats


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentConfig:
    rotation_deg: float = 0.0
    shift_frac: float = 0.0
    shear_deg: float = 0.0
    brightness: float = 0.0
    hflip: bool = False
    jitter: float = 0.0       # vector-mode additive noise only

    def is_identity(self):
        return (self.rotation_deg == 0 and self.shift_frac == 0 and self.shear_deg == 0
                and self.brightness == 0 and not self.hflip and self.jitter == 0)


def hflip(img: np.ndarray) -> np.ndarray:
    return img[:, ::-1].copy()


def _affine_sample(img, matrix, shift):
    """Inverse-map bilinear resampling; out-of-range pixels read as 0."""
    h, w = img.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    coords = np.stack([ys - cy - shift[0], xs - cx - shift[1]])
    inv = np.linalg.inv(matrix)
    src = np.tensordot(inv, coords, axes=1)
    sy, sx = src[0] + cy, src[1] + cx
    y0 = np.floor(sy).astype(int)
    x0 = np.floor(sx).astype(int)
    fy, fx = sy - y0, sx - x0

    def at(yy, xx):
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        out = np.zeros_like(sy)
        out[valid] = img[yy[valid], xx[valid]]
        return out

    return ((1 - fy) * (1 - fx) * at(y0, x0) + (1 - fy) * fx * at(y0, x0 + 1)
            + fy * (1 - fx) * at(y0 + 1, x0) + fy * fx * at(y0 + 1, x0 + 1))


def augment(sample: Sample, cfg: AugmentConfig, rng) -> Sample:
    """Randomized transform of one sample; labels never change.

    Image mode draws rotation, shear, shift, brightness and an optional flip
    within the configured ranges. Vector mode only supports additive jitter.
    All randomness comes from ``rng``, so a seeded generator reproduces the
    augmented stream exactly. Zero ranges give the identity transform.
    """
    feats = sample.features
    if feats.ndim == 1:
        if cfg.jitter > 0:
            feats = feats + rng.normal(0.0, cfg.jitter, size=feats.shape)
        return Sample(feats, sample.class_id, sample.modality)

    img = feats.astype(np.float64)
    if cfg.hflip and rng.random() < 0.5:
        img = hflip(img)
    if cfg.rotation_deg or cfg.shear_deg or cfg.shift_frac:
        theta = np.deg2rad(rng.uniform(-cfg.rotation_deg, cfg.rotation_deg)) if cfg.rotation_deg else 0.0
        shear = np.deg2rad(rng.uniform(-cfg.shear_deg, cfg.shear_deg)) if cfg.shear_deg else 0.0
        rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
        shr = np.array([[1.0, np.tan(shear)], [0.0, 1.0]])
        side = img.shape[0]
        shift = (rng.uniform(-cfg.shift_frac, cfg.shift_frac, size=2) * side
                 if cfg.shift_frac else np.zeros(2))
        img = _affine_sample(img, rot @ shr, shift)
    if cfg.brightness:
        img = img + rng.uniform(-cfg.brightness, cfg.brightness)
    return Sample(img.astype(sample.features.dtype), sample.class_id, sample.modality)


# ---------------------------------------------------------------------------
# class-balanced batch sampling


@dataclass
class SamplerConfig:
    batch_size: int = 64          # must equal 2 * classes_per_batch * samples_per_class
    classes_per_batch: int = 8
    samples_per_class: int = 4    # per modality
    seed: int = 0

    def __post_init__(self):
        if self.samples_per_class < 2:
            raise ValueError("samples_per_class must be >= 2 so positives and means exist")
        if self.batch_size % 2:
            raise ValueError("batch_size must be even (half per modality)")
        expect = 2 * self.classes_per_batch * self.samples_per_class
        if self.batch_size != expect:
            raise ValueError(f"batch_size {self.batch_size} != 2 * P * K = {expect}")


@dataclass
class DataBatch:
    features: np.ndarray
    class_ids: np.ndarray
    modalities: np.ndarray
    indices: np.ndarray


def epoch_batches(ds: Dataset, cfg: SamplerConfig, epoch: int):
    """Deterministic batch list for one epoch.

    Classes are shuffled per (seed, epoch) and partitioned into groups of P;
    each group yields one batch of K fresh samples per modality per class, so
    a sample appears at most once per epoch. Batches are modality-balanced by
    construction and internally shuffled.
    """
    pools = {}
    for cid in ds.classes():
        for m in MODALITIES:
            pools[(cid, m)] = np.nonzero((ds.class_ids == cid) & (ds.modalities == m))[0]
    eligible = [cid for cid in ds.classes()
                if all(len(pools[(cid, m)]) >= cfg.samples_per_class for m in MODALITIES)]
    if len(eligible) < cfg.classes_per_batch:
        raise ValueError(
            f"sampler needs {cfg.classes_per_batch} classes with >= {cfg.samples_per_class} "
            f"samples per modality, dataset has only {len(eligible)}")

    rng = np.random.default_rng([cfg.seed, epoch])
    order = rng.permutation(np.array(eligible))
    shuffled_pools = {key: rng.permutation(idx) for key, idx in sorted(
        pools.items(), key=lambda kv: (int(kv[0][0]), kv[0][1]))}

    batches = []
    n_groups = len(order) // cfg.classes_per_batch
    for g in range(n_groups):
        group = order[g * cfg.classes_per_batch:(g + 1) * cfg.classes_per_batch]
        take = []
        for cid in group:
            for m in MODALITIES:
                pool = shuffled_pools[(cid, m)]
                take.extend(pool[:cfg.samples_per_class])
                shuffled_pools[(cid, m)] = pool[cfg.samples_per_class:]
        idx = np.array(take)
        idx = idx[rng.permutation(len(idx))]
        batches.append(DataBatch(ds.features[idx], ds.class_ids[idx], ds.modalities[idx], idx))
    return batches
