"""Per-class detection noise models and the object probability map built from them."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .geometry import box_yaw, iou_box3, rot2
from .worldmodel import COV_EPS, ObjectGaussian, ObjectMap, ObjectProbabilityMap

log = logging.getLogger(__name__)

BIN_SIZE = 0.05
DEFAULT_DELTA = 1.0
DEFAULT_MIN_SAMPLES = 10


class InsufficientSamples(ValueError):
    pass


@dataclass(frozen=True)
class MatchedSample:
    gt_id: int
    class_label: str
    offset: tuple[float, float]


@dataclass(frozen=True, eq=False)
class ClassNoiseModel:
    class_label: str
    mean: np.ndarray
    cov: np.ndarray
    sample_count: int

    def __post_init__(self):
        mu = np.array(self.mean, dtype=float).reshape(2)
        S = np.array(self.cov, dtype=float).reshape(2, 2)
        S = 0.5 * (S + S.T)
        if np.min(np.linalg.eigvalsh(S)) <= 0:
            raise ValueError(f"noise covariance for '{self.class_label}' is not positive definite")
        mu.setflags(write=False)
        S.setflags(write=False)
        object.__setattr__(self, "mean", mu)
        object.__setattr__(self, "cov", S)

    @property
    def peak_density(self) -> float:
        return 1.0 / (2.0 * math.pi * math.sqrt(np.linalg.det(self.cov)))

    def to_dict(self) -> dict:
        return {
            "class": self.class_label,
            "mean": [float(v) for v in self.mean],
            "cov": [float(v) for v in self.cov.ravel()],
            "n": int(self.sample_count),
        }

    @classmethod
    def from_dict(cls, d) -> "ClassNoiseModel":
        return cls(str(d["class"]), d["mean"], np.asarray(d["cov"], float).reshape(2, 2),
                   int(d.get("n", 0)))


def save_models(models: Mapping[str, ClassNoiseModel], path) -> None:
    data = [models[k].to_dict() for k in sorted(models)]
    Path(path).write_text(json.dumps(data, indent=1) + "\n")


def load_models(path) -> dict[str, ClassNoiseModel]:
    data = json.loads(Path(path).read_text())
    return {d["class"]: ClassNoiseModel.from_dict(d) for d in data}


def match_to_gt(pred, gt: Sequence, delta: float = DEFAULT_DELTA) -> Optional[int]:
    """Assign a world-frame prediction to a ground-truth object id, or None.

    Candidates are same-class objects whose ground-plane center lies within
    ``delta``.  The candidate with the highest 3D IoU wins; if none overlaps,
    the nearest center wins.
    """
    c = pred.box.center[:2]
    cands = []
    for g in gt:
        if g.class_label != pred.class_label:
            continue
        d = float(np.hypot(*(g.box.center[:2] - c)))
        if d < delta:
            cands.append((g, d))
    if not cands:
        return None
    ious = [iou_box3(pred.box, g.box) for g, _ in cands]
    if max(ious) > 0:
        k = int(np.argmax(ious))
    else:
        k = int(np.argmin([d for _, d in cands]))
    return cands[k][0].id


def object_frame_offset(pred_center, gt_box) -> np.ndarray:
    """Prediction center minus GT center, in the GT object's ground frame."""
    d = np.asarray(pred_center, dtype=float)[:2] - gt_box.center[:2]
    return rot2(box_yaw(gt_box.rotation)).T @ d


def collect_samples(preds: Iterable, gt: Sequence, delta: float = DEFAULT_DELTA) -> list[MatchedSample]:
    by_id = {g.id: g for g in gt}
    out = []
    for p in preds:
        gid = match_to_gt(p, gt, delta)
        if gid is None:
            continue
        off = object_frame_offset(p.box.center, by_id[gid].box)
        out.append(MatchedSample(gid, p.class_label, (float(off[0]), float(off[1]))))
    return out


def fit_class_model(samples: Sequence[MatchedSample], class_label: str,
                    min_samples: int = DEFAULT_MIN_SAMPLES,
                    bin_size: float = BIN_SIZE) -> ClassNoiseModel:
    """Fit a 2D Gaussian to the histogram of object-frame center offsets.

    Offsets are binned into ``bin_size`` cells (bins centered on the object
    origin); the Gaussian's moments are the count-weighted mean and unbiased
    covariance of the occupied bin centers, plus ``COV_EPS * I``.
    """
    offs = np.array([s.offset for s in samples if s.class_label == class_label], dtype=float)
    n = offs.shape[0]
    if n < min_samples:
        raise InsufficientSamples(f"class '{class_label}': {n} samples < {min_samples}")
    idx = np.round(offs.reshape(-1, 2) / bin_size).astype(np.int64)
    cells, counts = np.unique(idx, axis=0, return_counts=True)
    centers = cells * bin_size
    w = counts.astype(float)
    mu = (w[:, None] * centers).sum(axis=0) / n
    d = centers - mu
    cov = (w[:, None, None] * d[:, :, None] * d[:, None, :]).sum(axis=0) / max(n - 1, 1)
    return ClassNoiseModel(class_label, mu, cov + COV_EPS * np.eye(2), n)


def fit_models(samples: Sequence[MatchedSample], min_samples: int = DEFAULT_MIN_SAMPLES,
               bin_size: float = BIN_SIZE) -> tuple[dict[str, ClassNoiseModel], list[str]]:
    """Fit every class present in ``samples``; returns (models, skipped classes)."""
    models, skipped = {}, []
    for cls in sorted({s.class_label for s in samples}):
        try:
            models[cls] = fit_class_model(samples, cls, min_samples, bin_size)
        except InsufficientSamples as exc:
            log.warning("skipping noise model: %s", exc)
            skipped.append(cls)
    return models, skipped


def instantiate(model: ClassNoiseModel, obj) -> ObjectGaussian:
    """Place a class model at a map object: rotate into its yaw frame and shift."""
    if obj.class_label != model.class_label:
        raise ValueError(f"class mismatch: {obj.class_label} vs {model.class_label}")
    R2 = rot2(box_yaw(obj.box.rotation))
    mu = R2 @ model.mean + obj.box.center[:2]
    return ObjectGaussian(obj.id, obj.class_label, mu, R2 @ model.cov @ R2.T)


def density(g: ObjectGaussian, c) -> tuple[float, float]:
    """Bivariate normal pdf at ``c`` and its value relative to the mode."""
    normalized = math.exp(-0.5 * g.mahalanobis_sq(c))
    return g.peak_density * normalized, normalized


def build_probability_map(models: Mapping[str, ClassNoiseModel],
                          omap: ObjectMap) -> ObjectProbabilityMap:
    """One Gaussian per map object whose class has a model.

    Objects of unmodeled classes are skipped; their ids end up in the
    returned map's ``skipped`` list.
    """
    gs, skipped = [], []
    for o in sorted(omap, key=lambda o: o.id):
        m = models.get(o.class_label)
        if m is None:
            skipped.append(o.id)
            continue
        gs.append(instantiate(m, o))
    if skipped:
        log.warning("no noise model for %d object(s): ids %s", len(skipped), skipped)
    mp = ObjectProbabilityMap(gs)
    mp.skipped = skipped
    return mp
