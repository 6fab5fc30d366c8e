"""Biometric evaluation: identification, verification, and score fusion.

Identification (1:N) enrolls gallery embeddings from one modality and asks,
for each probe from the other modality, whether the top-scoring gallery entry
shares its identity (rank-1). Verification (1:1) scores every cross-modal
probe/gallery pair, sweeps a threshold over the score set, and reads TPR at
fixed FAR operating points off the resulting ROC.

Three scoring modes are reported: cosine similarity of the embeddings (Embd),
the symmetrized pair-discriminator probability (CMD), and their average on a
shared [0, 1] scale (Fusion). TPR@FAR uses conservative step interpolation
and is reported as undefined when the imposter count cannot resolve the
target rate.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint as ckpt
from .data import Dataset
from .discriminator import symmetrized_scores

MODES = ("Embd", "CMD", "Fusion")


@dataclass
class ProtocolConfig:
    gallery_per_class: int = 1
    gallery_modality: str = "A"
    far_targets: tuple = (0.01, 0.001)

    def __post_init__(self):
        self.far_targets = tuple(float(t) for t in self.far_targets)
        if self.gallery_per_class < 1:
            raise ValueError("gallery_per_class must be >= 1")
        if self.gallery_modality not in ("A", "B"):
            raise ValueError("gallery_modality must be 'A' or 'B'")


@dataclass
class Roc:
    far: np.ndarray          # non-decreasing, starts at the all-reject point
    tpr: np.ndarray
    thresholds: np.ndarray   # aligned with far/tpr; leading +inf = reject all
    n_genuine: int
    n_imposter: int

    def points(self):
        return [[float(f), float(t)] for f, t in zip(self.far, self.tpr)]


def rank1(scores: np.ndarray, probe_classes, gallery_classes) -> float:
    """Fraction of probes whose best-scoring gallery entry shares their class.

    Ties break toward the lowest gallery index, so any strictly increasing
    transform of the scores gives the same answer.
    """
    scores = np.asarray(scores)
    probe_classes = np.asarray(probe_classes)
    gallery_classes = np.asarray(gallery_classes)
    if scores.ndim != 2 or scores.shape != (len(probe_classes), len(gallery_classes)):
        raise ValueError(f"rank1: score matrix {scores.shape} does not match "
                         f"{len(probe_classes)} probes x {len(gallery_classes)} gallery entries")
    if scores.size == 0:
        raise ValueError("rank1: empty protocol")
    best = scores.argmax(axis=1)
    return float((gallery_classes[best] == probe_classes).mean())


def roc(scores, labels) -> Roc:
    """Threshold sweep over the unique score set with decision rule score >= t.

    Emits one (FAR, TPR) point per threshold, descending, preceded by the
    all-reject point at threshold +inf. TPR is non-decreasing along FAR.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise ValueError("roc: scores and labels must align")
    n_gen = int(labels.sum())
    n_imp = int((~labels).sum())
    if n_gen == 0 or n_imp == 0:
        raise ValueError("roc: need at least one genuine and one imposter pair")
    order = np.argsort(-scores, kind="stable")
    sorted_labels = labels[order]
    sorted_scores = scores[order]
    tp = np.cumsum(sorted_labels)
    fp = np.cumsum(~sorted_labels)
    # last index of each run of equal scores = counts with threshold at that score
    is_run_end = np.empty(len(scores), dtype=bool)
    is_run_end[:-1] = sorted_scores[:-1] != sorted_scores[1:]
    is_run_end[-1] = True
    ends = np.nonzero(is_run_end)[0]
    far = np.concatenate([[0.0], fp[ends] / n_imp])
    tpr = np.concatenate([[0.0], tp[ends] / n_gen])
    thresholds = np.concatenate([[np.inf], sorted_scores[ends]])
    return Roc(far=far, tpr=tpr, thresholds=thresholds, n_genuine=n_gen, n_imposter=n_imp)


def tpr_at_far(r: Roc, far_target: float):
    """TPR at the largest achievable FAR <= target (conservative step reading).

    Returns None when the imposter count cannot resolve the target
    (n_imposter * target < 1), rather than reporting a misleading 0.
    """
    if far_target <= 0:
        raise ValueError("far_target must be positive")
    if r.n_imposter * far_target < 1.0:
        return None
    ok = r.far <= far_target + 1e-15
    return float(r.tpr[ok].max())


def cosine_to_unit(cos_sim):
    """Map cosine similarity from [-1, 1] onto [0, 1]."""
    return (1.0 + np.asarray(cos_sim, dtype=np.float64)) / 2.0


def fuse(embd_score, cmd_score):
    """Mean of the unit-interval embedding score and the pair probability."""
    return (np.asarray(embd_score, dtype=np.float64) + np.asarray(cmd_score, dtype=np.float64)) / 2.0


@dataclass
class ModeMetrics:
    rank1: float
    tpr_at_far: dict          # str(target) -> float | None
    roc_points: list
    n_genuine: int
    n_imposter: int


@dataclass
class EvalReport:
    modes: dict
    n_pairs: int
    n_subjects: int
    meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "modes": {name: vars(m) for name, m in self.modes.items()},
            "n_pairs": self.n_pairs,
            "n_subjects": self.n_subjects,
            "meta": self.meta,
        }
        return json.dumps(payload, sort_keys=True, indent=1)

    def write_json(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_json())
            f.write("\n")

    def csv_rows(self):
        rows = []
        for name in MODES:
            if name not in self.modes:
                continue
            m = self.modes[name]
            t1 = m.tpr_at_far.get("0.01")
            t01 = m.tpr_at_far.get("0.001")
            rows.append({
                "mode": name,
                "rank1": m.rank1,
                "tpr_far_1pct": "undefined" if t1 is None else t1,
                "tpr_far_0p1pct": "undefined" if t01 is None else t01,
                "n_pairs": self.n_pairs,
                "n_subjects": self.n_subjects,
            })
        return rows

    def write_csv(self, path):
        rows = self.csv_rows()
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
            writer.writeheader()
            writer.writerows(rows)


def build_protocol(ds: Dataset, cfg: ProtocolConfig):
    """Split a held-out dataset into gallery and probe index lists.

    Gallery: the first ``gallery_per_class`` samples (by dataset order) of the
    gallery modality per class; probes: every sample of the other modality.
    Every probe class must be enrolled, so classes missing a modality are
    rejected.
    """
    probe_modality = "B" if cfg.gallery_modality == "A" else "A"
    gallery_idx, probe_idx = [], []
    for cid in ds.classes():
        gal = np.nonzero((ds.class_ids == cid) & (ds.modalities == cfg.gallery_modality))[0]
        prb = np.nonzero((ds.class_ids == cid) & (ds.modalities == probe_modality))[0]
        if len(gal) == 0 or len(prb) == 0:
            raise ValueError(f"class {cid} is missing a modality in the evaluation split")
        gallery_idx.extend(gal[:cfg.gallery_per_class].tolist())
        probe_idx.extend(prb.tolist())
    return np.array(gallery_idx), np.array(probe_idx)


def _mode_metrics(scores, probe_classes, gallery_classes, far_targets):
    labels = probe_classes[:, None] == gallery_classes[None, :]
    r = roc(scores.ravel(), labels.ravel())
    return ModeMetrics(
        rank1=rank1(scores, probe_classes, gallery_classes),
        tpr_at_far={str(t): tpr_at_far(r, t) for t in far_targets},
        roc_points=r.points(),
        n_genuine=r.n_genuine,
        n_imposter=r.n_imposter,
    )


def evaluate(net, ds: Dataset, cfg: ProtocolConfig | None = None) -> EvalReport:
    """Score a held-out split in every available mode.

    Embd uses cosine similarity between unit embeddings; CMD uses the
    symmetrized discriminator probability; Fusion averages the two on the
    unit interval. Networks trained without a discriminator only report Embd.
    """
    cfg = cfg or ProtocolConfig()
    if net.stage != ckpt.STAGE_HFR:
        raise ValueError(f"evaluate() needs an hfr-stage network, got {net.stage!r}")
    gallery_idx, probe_idx = build_protocol(ds, cfg)
    emb = net.embed(ds.features).data
    e_gal, e_prb = emb[gallery_idx], emb[probe_idx]
    c_gal, c_prb = ds.class_ids[gallery_idx], ds.class_ids[probe_idx]

    cos = e_prb @ e_gal.T
    modes = {"Embd": _mode_metrics(cos, c_prb, c_gal, cfg.far_targets)}
    if net.disc is not None:
        cmd = symmetrized_scores(e_prb, e_gal, net.disc)
        modes["CMD"] = _mode_metrics(cmd, c_prb, c_gal, cfg.far_targets)
        fused = fuse(cosine_to_unit(cos), cmd)
        modes["Fusion"] = _mode_metrics(fused, c_prb, c_gal, cfg.far_targets)

    return EvalReport(
        modes=modes,
        n_pairs=int(cos.size),
        n_subjects=int(len(np.unique(c_gal))),
        meta={"gallery_per_class": cfg.gallery_per_class,
              "gallery_modality": cfg.gallery_modality,
              "n_gallery": int(len(gallery_idx)),
              "n_probes": int(len(probe_idx))},
    )
