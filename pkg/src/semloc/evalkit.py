"""Map-quality and localization metrics with table/JSON/CSV output."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .geometry import Pose2, iou_box3, wrap_angle
from .worldmodel import ObjectMap

CONV_RADIUS = 0.3
CONV_ANGLE = math.pi / 4
DIVERGENCE_BUDGET_S = 1.5
DEADLINE_FRACTION = 0.95
ALIGN_TOL_S = 0.05


class EmptyOverlap(ValueError):
    """No estimate could be paired with a ground-truth sample."""


# --- map quality --------------------------------------------------------------------


@dataclass
class ClassQuality:
    class_label: str
    iou: float
    precision: float
    recall: float
    n_built: int
    n_gt: int
    n_matched: int


@dataclass
class MapQualityReport:
    per_class: list
    avg_iou: float
    avg_precision: float
    avg_recall: float
    matches: list  # (built id, gt id, iou)

    def to_dict(self) -> dict:
        return {
            "averaging": "unweighted mean over classes",
            "per_class": [asdict(c) for c in self.per_class],
            "avg": {"iou": self.avg_iou, "precision": self.avg_precision,
                    "recall": self.avg_recall},
            "matches": [[int(a), int(b), float(i)] for a, b, i in self.matches],
        }

    def table(self, title: str = "map") -> str:
        rows = [(c.class_label, c.iou, c.precision, c.recall) for c in self.per_class]
        rows.append(("AVG", self.avg_iou, self.avg_precision, self.avg_recall))
        w = max([len(r[0]) for r in rows] + [len(title), 5])
        out = ["# averages are unweighted class means",
               f"{title:<{w}}  {'IoU':>6}  {'Pr':>6}  {'Rc':>6}"]
        for name, i, p, r in rows:
            out.append(f"{name:<{w}}  {i:6.2f}  {p:6.2f}  {r:6.2f}")
        return "\n".join(out) + "\n"

    def csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["class", "iou", "precision", "recall", "n_built", "n_gt", "n_matched"])
        for c in self.per_class:
            wr.writerow([c.class_label, f"{c.iou:.6f}", f"{c.precision:.6f}",
                         f"{c.recall:.6f}", c.n_built, c.n_gt, c.n_matched])
        wr.writerow(["AVG", f"{self.avg_iou:.6f}", f"{self.avg_precision:.6f}",
                     f"{self.avg_recall:.6f}", "", "", ""])
        return buf.getvalue()


def map_quality(built: ObjectMap, gt: ObjectMap, match_iou_min: float = 0.0,
                delta: float = 1.0) -> MapQualityReport:
    """Greedy same-class matching by descending 3D IoU within center distance ``delta``."""
    classes = sorted(set(built.classes) | set(gt.classes))
    per_class, matches = [], []
    for cls in classes:
        b = sorted(built.by_class(cls), key=lambda o: o.id)
        g = sorted(gt.by_class(cls), key=lambda o: o.id)
        cand = []
        for i, ob in enumerate(b):
            for j, og in enumerate(g):
                if np.linalg.norm(ob.box.center[:2] - og.box.center[:2]) > delta:
                    continue
                iou = iou_box3(ob.box, og.box)
                if iou >= match_iou_min:
                    cand.append((-iou, i, j))
        cand.sort()
        ub, ug, ious = set(), set(), []
        for neg, i, j in cand:
            if i in ub or j in ug:
                continue
            ub.add(i)
            ug.add(j)
            ious.append(-neg)
            matches.append((b[i].id, g[j].id, -neg))
        m = len(ious)
        per_class.append(ClassQuality(
            cls,
            float(np.mean(ious)) if ious else 0.0,
            m / len(b) if b else (1.0 if not g else 0.0),
            m / len(g) if g else (1.0 if not b else 0.0),
            len(b), len(g), m,
        ))
    if not per_class:
        return MapQualityReport([], 1.0, 1.0, 1.0, [])
    return MapQualityReport(
        per_class,
        float(np.mean([c.iou for c in per_class])),
        float(np.mean([c.precision for c in per_class])),
        float(np.mean([c.recall for c in per_class])),
        matches,
    )


# --- localization ------------------------------------------------------------------


@dataclass
class LocalizationReport:
    converged: bool
    convergence_time_s: Optional[float]
    ate_trans_m: Optional[float]
    ate_rot_rad: Optional[float]
    success: bool
    duration_s: float = 0.0
    n_aligned: int = 0
    label: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def _as_arrays(seq) -> tuple[np.ndarray, np.ndarray]:
    ts, ps = [], []
    for t, p in seq:
        ts.append(float(t))
        ps.append(p.as_array() if isinstance(p, Pose2) else np.asarray(p, dtype=float))
    return np.asarray(ts), np.asarray(ps).reshape(-1, 3)


def align(estimates, gt, tol: float = ALIGN_TOL_S):
    """Pair each estimate with the nearest ground-truth sample within ``tol``."""
    te, pe = _as_arrays(estimates)
    tg, pg = _as_arrays(gt)
    if not len(te) or not len(tg):
        raise EmptyOverlap("empty trajectory")
    order = np.argsort(tg, kind="stable")
    tg, pg = tg[order], pg[order]
    idx = np.clip(np.searchsorted(tg, te), 1, len(tg) - 1) if len(tg) > 1 else np.zeros(len(te), int)
    if len(tg) > 1:
        left = idx - 1
        idx = np.where(np.abs(tg[left] - te) <= np.abs(tg[idx] - te), left, idx)
    keep = np.abs(tg[idx] - te) <= tol + 1e-12
    if not keep.any():
        raise EmptyOverlap("no estimate within tolerance of a ground-truth timestamp")
    order = np.argsort(te[keep], kind="stable")
    return te[keep][order], pe[keep][order], pg[idx[keep]][order]


def convergence(estimates, gt, radius: float = CONV_RADIUS, angle: float = CONV_ANGLE,
                budget_s: float = DIVERGENCE_BUDGET_S, deadline: float = DEADLINE_FRACTION,
                tol: float = ALIGN_TOL_S) -> LocalizationReport:
    """Convergence time, success and post-convergence ATE.

    ``estimates`` and ``gt`` are sequences of ``(timestamp, Pose2 or [x, y, theta])``.
    Divergence time is accumulated over the aligned samples after convergence,
    each sample accounting for the interval up to the next one.
    """
    t, pe, pg = align(estimates, gt, tol)
    tg_all, _ = _as_arrays(gt)
    t0, t1 = float(tg_all.min()), float(tg_all.max())
    duration = t1 - t0
    dt = np.diff(t, append=t[-1])
    err_t = np.hypot(pe[:, 0] - pg[:, 0], pe[:, 1] - pg[:, 1])
    err_r = np.abs(wrap_angle(pe[:, 2] - pg[:, 2]))
    ok = (err_t <= radius) & (err_r <= angle)
    # cumulative divergence from index k to the end
    bad_after = np.cumsum((dt * ~ok)[::-1])[::-1]
    k_conv = None
    for k in np.flatnonzero(ok):
        if bad_after[k] <= budget_s + 1e-9:
            k_conv = int(k)
            break
    if k_conv is None:
        return LocalizationReport(False, None, None, None, False, duration, len(t))
    tc = float(t[k_conv] - t0)
    ate_t = float(np.sqrt(np.mean(err_t[k_conv:] ** 2)))
    ate_r = float(np.sqrt(np.mean(err_r[k_conv:] ** 2)))
    success = tc <= deadline * duration + 1e-9
    return LocalizationReport(True, tc, ate_t, ate_r, bool(success), duration, len(t))


def success_rate(reports: Sequence[LocalizationReport]) -> float:
    if not reports:
        raise ValueError("success_rate needs at least one report")
    return sum(bool(r.success) for r in reports) / len(reports)


@dataclass
class MethodSummary:
    method: str
    reports: list = field(default_factory=list)

    @property
    def success(self) -> float:
        return success_rate(self.reports)

    def _mean(self, key) -> Optional[float]:
        v = [getattr(r, key) for r in self.reports if r.success and getattr(r, key) is not None]
        return float(np.mean(v)) if v else None

    def to_dict(self) -> dict:
        return {"method": self.method, "success_rate": self.success,
                "ate_rot_rad": self._mean("ate_rot_rad"), "ate_trans_m": self._mean("ate_trans_m"),
                "convergence_time_s": self._mean("convergence_time_s"),
                "runs": [r.to_dict() for r in self.reports]}


def _fmt(v, spec=".3f") -> str:
    return "-" if v is None else format(v, spec)


def localization_table(summaries: Sequence[MethodSummary]) -> str:
    """Success, ATE [rad/m] and convergence time per method."""
    w = max([len(s.method) for s in summaries] + [6])
    out = [f"{'method':<{w}}  {'success':>7}  {'ATE [rad/m]':>15}  {'t_conv [s]':>10}"]
    for s in summaries:
        ate = f"{_fmt(s._mean('ate_rot_rad'))}/{_fmt(s._mean('ate_trans_m'))}"
        out.append(f"{s.method:<{w}}  {100 * s.success:6.0f}%  {ate:>15}  "
                   f"{_fmt(s._mean('convergence_time_s'), '.1f'):>10}")
    return "\n".join(out) + "\n"


def localization_csv(summaries: Sequence[MethodSummary]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["method", "run", "converged", "success", "convergence_time_s",
                 "ate_trans_m", "ate_rot_rad"])
    for s in summaries:
        for k, r in enumerate(s.reports):
            wr.writerow([s.method, r.label or k, int(r.converged), int(r.success),
                         _fmt(r.convergence_time_s, ".6f"), _fmt(r.ate_trans_m, ".6f"),
                         _fmt(r.ate_rot_rad, ".6f")])
    return buf.getvalue()
