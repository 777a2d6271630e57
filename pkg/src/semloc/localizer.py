"""Monte Carlo localization with object-level sensor models."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Optional

import numpy as np
from scipy import ndimage

from . import kernels
from .geometry import Pose2, Pose3, footprint, wrap_angle
from .mapper import Detection3D
from .noisemodel import ClassNoiseModel
from .worldmodel import FloorPlan, ObjectMap, ObjectProbabilityMap

log = logging.getLogger(__name__)

SENSOR_MODELS = ("object", "edt", "d", "o")


class AllZeroWeights(RuntimeError):
    pass


@dataclass
class Particle:
    pose: Pose2
    weight: float


@dataclass
class MclConfig:
    n_particles: int = 5000
    sigma_odom: tuple = (0.15, 0.15, 0.15)
    eta: float = 0.3
    resample_threshold: float = 0.5
    sensor_model: str = "object"
    min_confidence: float = 0.0
    motion_floor: float = 0.1
    d_floor: float = 1e-6
    converged_radius: float = 0.3
    converged_angle: float = math.pi / 4

    def __post_init__(self):
        self.sigma_odom = tuple(float(s) for s in self.sigma_odom)
        if self.n_particles < 1:
            raise ValueError("n_particles must be >= 1")
        if len(self.sigma_odom) != 3 or min(self.sigma_odom) < 0:
            raise ValueError("sigma_odom needs three non-negative entries")
        if not 0 <= self.eta <= 1:
            raise ValueError("eta must lie in [0, 1]")
        if self.sensor_model not in SENSOR_MODELS:
            raise ValueError(f"sensor_model must be one of {SENSOR_MODELS}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sigma_odom"] = list(self.sigma_odom)
        return d


@dataclass
class Observation:
    detections: list
    cam_pose_in_robot: Pose3 = field(default_factory=Pose3)

    def robot_footprints(self, min_confidence: float = 0.0) -> list[tuple[str, np.ndarray]]:
        """(class, packed footprint) of each detection in the robot frame."""
        to_robot = self.cam_pose_in_robot.inverse()
        return [
            (d.class_label, footprint(d.box.transformed(to_robot)).as_array())
            for d in self.detections
            if d.confidence >= min_confidence
        ]


# --- motion model -------------------------------------------------------------


def odometry_noise_std(delta, sigma, floor: float = 0.1) -> np.ndarray:
    """Per-axis noise std for one odometry step.

    Translational std scales with meters moved, angular std with radians
    turned, each floored at ``floor * sigma``.  A zero step gets no noise.
    """
    d = np.asarray(delta, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    trans = math.hypot(d[0], d[1])
    rot = abs(d[2])
    if trans == 0.0 and rot == 0.0:
        return np.zeros(3)
    return sigma * np.array([max(trans, floor), max(trans, floor), max(rot, floor)])


def perturb_delta(delta, sigma, rng: np.random.Generator, size: Optional[int] = None,
                  floor: float = 0.1) -> np.ndarray:
    std = odometry_noise_std(delta, sigma, floor)
    d = np.asarray(delta, dtype=float)
    shape = (3,) if size is None else (size, 3)
    if not np.any(std):
        return np.broadcast_to(d, shape).copy()
    return d + rng.standard_normal(shape) * std


def compose_batch(poses: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    c, s = np.cos(poses[:, 2]), np.sin(poses[:, 2])
    out = np.empty_like(poses)
    out[:, 0] = poses[:, 0] + c * deltas[..., 0] - s * deltas[..., 1]
    out[:, 1] = poses[:, 1] + s * deltas[..., 0] + c * deltas[..., 1]
    out[:, 2] = wrap_angle(poses[:, 2] + deltas[..., 2])
    return out


def predict(poses: np.ndarray, odom_delta, sigma, rng: np.random.Generator,
            floor: float = 0.1) -> np.ndarray:
    """Move every particle by a noisy copy of the odometry step."""
    d = odom_delta.as_array() if isinstance(odom_delta, Pose2) else np.asarray(odom_delta, float)
    noisy = perturb_delta(d, sigma, rng, size=poses.shape[0], floor=floor)
    return compose_batch(poses, noisy)


# --- sensor models ------------------------------------------------------------


class ObjectSensorModel:
    """Gaussian-likelihood times shape-similarity, mixed with a false-association floor."""

    name = "object"

    def __init__(self, m_p: ObjectProbabilityMap, m_s: ObjectMap, eta: float = 0.3):
        self.m_p, self.m_s, self.eta = m_p, m_s, float(eta)

    def weigh(self, poses: np.ndarray, cls: str, det_fp: np.ndarray) -> np.ndarray:
        arr = self.m_p.packed(cls, self.m_s)
        return kernels.object_weights(poses, det_fp, arr.means, arr.icovs, arr.footprints,
                                      self.eta)


class DensitySensorModel:
    """Object-probability-map likelihood only (D-MCL)."""

    name = "d"

    def __init__(self, m_p: ObjectProbabilityMap, floor: float = 1e-6):
        self.m_p, self.floor = m_p, float(floor)

    def weigh(self, poses, cls, det_fp):
        arr = self.m_p.packed(cls)
        p_o, _ = kernels.max_density(poses, det_fp, arr.means, arr.icovs)
        return np.maximum(p_o, self.floor)


class OverlapSensorModel:
    """Best same-class footprint overlap only (O-MCL)."""

    name = "o"

    def __init__(self, m_s: ObjectMap):
        self.m_s = m_s
        self._fps: dict[str, np.ndarray] = {}

    def weigh(self, poses, cls, det_fp):
        if cls not in self._fps:
            fps = [footprint(o.box).as_array() for o in sorted(self.m_s.by_class(cls),
                                                               key=lambda o: o.id)]
            self._fps[cls] = np.array(fps, dtype=float).reshape(-1, 5)
        iou = kernels.max_overlap(poses, det_fp, self._fps[cls])
        return np.exp(-(1.0 - iou))


@dataclass
class ClassEdt:
    """Per-class distance (meters) to the nearest cell covered by that class."""

    plan: FloorPlan
    distances: dict

    def lookup(self, cls: str, xy) -> np.ndarray:
        grid = self.distances[cls]
        idx = self.plan.cell_index(xy)
        inside = self.plan.in_bounds(xy)
        r = np.clip(idx[..., 0], 0, grid.shape[0] - 1)
        c = np.clip(idx[..., 1], 0, grid.shape[1] - 1)
        return np.where(inside, grid[r, c], np.inf)


def build_class_edt(m_s: ObjectMap, plan: FloorPlan) -> ClassEdt:
    centers = plan.grid_to_world(
        np.stack(np.meshgrid(np.arange(plan.shape[0]) + 0.5, np.arange(plan.shape[1]) + 0.5,
                             indexing="ij"), axis=-1)
    )
    flat = centers.reshape(-1, 2)
    out = {}
    for cls in m_s.classes:
        mask = np.zeros(plan.shape, dtype=bool)
        for o in m_s.by_class(cls):
            fp = footprint(o.box)
            mask |= fp.contains(flat).reshape(plan.shape)
            r, c = plan.cell_index(fp.center)
            if 0 <= r < plan.shape[0] and 0 <= c < plan.shape[1]:
                mask[r, c] = True
        out[cls] = ndimage.distance_transform_edt(~mask) * plan.resolution
    return ClassEdt(plan, out)


class EdtSensorModel:
    """Beam-end-point style model on per-class distance transforms (EDT-MCL)."""

    name = "edt"

    def __init__(self, edt: ClassEdt, models: Mapping[str, ClassNoiseModel], eta: float = 0.3):
        self.edt, self.eta = edt, float(eta)
        self.sigma = {c: math.sqrt(float(np.max(np.linalg.eigvalsh(m.cov))))
                      for c, m in models.items()}

    def weigh(self, poses, cls, det_fp):
        if cls not in self.edt.distances or cls not in self.sigma:
            return np.full(poses.shape[0], self.eta)
        c, s = np.cos(poses[:, 2]), np.sin(poses[:, 2])
        xy = np.stack([poses[:, 0] + c * det_fp[0] - s * det_fp[1],
                       poses[:, 1] + s * det_fp[0] + c * det_fp[1]], axis=1)
        d = self.edt.lookup(cls, xy)
        return np.exp(-d * d / (2.0 * self.sigma[cls] ** 2))


def make_sensor_model(kind: str, m_s: ObjectMap, m_p: ObjectProbabilityMap,
                      models: Mapping[str, ClassNoiseModel], plan: Optional[FloorPlan],
                      cfg: MclConfig):
    if kind == "object":
        return ObjectSensorModel(m_p, m_s, cfg.eta)
    if kind == "d":
        return DensitySensorModel(m_p, cfg.d_floor)
    if kind == "o":
        return OverlapSensorModel(m_s)
    if kind == "edt":
        if plan is None:
            raise ValueError("EDT sensor model needs a floor plan")
        return EdtSensorModel(build_class_edt(m_s, plan), models, cfg.eta)
    raise ValueError(f"unknown sensor model '{kind}'")


def _single(pose: Pose2) -> np.ndarray:
    return np.array([[pose.x, pose.y, pose.theta]])


def weigh_object(det: Detection3D, pose: Pose2, m_p: ObjectProbabilityMap, m_s: ObjectMap,
                 eta: float = 0.3, cam_pose_in_robot: Optional[Pose3] = None) -> float:
    """Object sensor-model weight of one detection for one robot pose."""
    obs = Observation([det], cam_pose_in_robot or Pose3())
    cls, fp = obs.robot_footprints()[0]
    return float(ObjectSensorModel(m_p, m_s, eta).weigh(_single(pose), cls, fp)[0])


def weigh_frame(obs: Observation, poses: np.ndarray, sensor,
                min_confidence: float = 0.0) -> np.ndarray:
    """Geometric mean of per-detection weights; ones when nothing was detected."""
    dets = obs.robot_footprints(min_confidence)
    if not dets:
        return np.ones(poses.shape[0])
    with np.errstate(divide="ignore"):
        acc = np.zeros(poses.shape[0])
        for cls, fp in dets:
            acc += np.log(sensor.weigh(poses, cls, fp))
    return np.exp(acc / len(dets))


# --- resampling and estimation ------------------------------------------------


def effective_sample_size(weights) -> float:
    w = np.asarray(weights, dtype=float)
    return 1.0 / float(np.sum(w * w))


def low_variance_indices(weights, rng: np.random.Generator) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    n = w.size
    cdf = np.cumsum(w)
    cdf[-1] = 1.0
    u = (rng.uniform(0.0, 1.0 / n) + np.arange(n) / n)
    return np.minimum(np.searchsorted(cdf, u, side="right"), n - 1)


def resample(poses: np.ndarray, weights: np.ndarray, threshold: float,
             rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, bool]:
    """Systematic resampling when N_eff drops below ``threshold * N``."""
    n = weights.size
    total = float(np.sum(weights))
    if not np.isfinite(total) or total <= 0:
        raise AllZeroWeights("all particle weights are zero")
    w = weights / total
    if effective_sample_size(w) >= threshold * n:
        return poses, w, False
    idx = low_variance_indices(w, rng)
    return poses[idx].copy(), np.full(n, 1.0 / n), True


def estimate(poses: np.ndarray, weights: Optional[np.ndarray] = None) -> Pose2:
    poses = np.atleast_2d(np.asarray(poses, dtype=float))
    w = np.ones(poses.shape[0]) if weights is None else np.asarray(weights, float)
    w = w / w.sum()
    x = float(np.dot(w, poses[:, 0]))
    y = float(np.dot(w, poses[:, 1]))
    th = math.atan2(float(np.dot(w, np.sin(poses[:, 2]))), float(np.dot(w, np.cos(poses[:, 2]))))
    return Pose2(x, y, th)


# --- filter -------------------------------------------------------------------


class MonteCarloLocalizer:
    """Global localization over a floor plan; owns its particles and RNG."""

    def __init__(self, sensor, plan: Optional[FloorPlan], cfg: MclConfig, seed: int = 0,
                 init_poses: Optional[np.ndarray] = None):
        self.sensor, self.plan, self.cfg = sensor, plan, cfg
        self.rng = np.random.default_rng(seed)
        n = cfg.n_particles
        if init_poses is not None:
            self.poses = np.asarray(init_poses, dtype=float).copy()
        else:
            self.poses = self._uniform_free(n)
        self.weights = np.full(self.poses.shape[0], 1.0 / self.poses.shape[0])
        self.n_resets = 0

    def _uniform_free(self, n: int) -> np.ndarray:
        if self.plan is None:
            raise ValueError("global initialization needs a floor plan")
        rows, cols = np.nonzero(self.plan.free)
        if rows.size == 0:
            raise ValueError("floor plan has no free cells")
        k = self.rng.integers(0, rows.size, n)
        rc = np.stack([rows[k] + self.rng.uniform(0, 1, n), cols[k] + self.rng.uniform(0, 1, n)], 1)
        xy = self.plan.grid_to_world(rc)
        th = self.rng.uniform(-math.pi, math.pi, n)
        return np.column_stack([xy, th])

    def predict(self, delta) -> None:
        self.poses = predict(self.poses, delta, self.cfg.sigma_odom, self.rng,
                             self.cfg.motion_floor)

    def update(self, obs: Observation) -> bool:
        """Weight by one observation; returns True when it resampled."""
        fw = weigh_frame(obs, self.poses, self.sensor, self.cfg.min_confidence)
        if not obs.robot_footprints(self.cfg.min_confidence):
            return False
        w = self.weights * fw
        if self.plan is not None:
            w = w * self.plan.is_free(self.poses[:, :2])
        try:
            self.poses, self.weights, did = resample(self.poses, w, self.cfg.resample_threshold,
                                                     self.rng)
        except AllZeroWeights:
            self.n_resets += 1
            # first occurrence at warning level, the rest would flood the log
            lvl = logging.WARNING if self.n_resets == 1 else logging.DEBUG
            log.log(lvl, "all particle weights vanished; resetting to uniform weights")
            self.weights = np.full(self.poses.shape[0], 1.0 / self.poses.shape[0])
            did = False
        return did

    @property
    def n_eff(self) -> float:
        return effective_sample_size(self.weights / self.weights.sum())

    def estimate(self) -> Pose2:
        return estimate(self.poses, self.weights)

    def is_converged(self) -> bool:
        """Filter-side convergence: the cloud fits the success radius and heading spread."""
        est = self.estimate()
        w = self.weights / self.weights.sum()
        r = np.hypot(self.poses[:, 0] - est.x, self.poses[:, 1] - est.y)
        dth = np.abs(wrap_angle(self.poses[:, 2] - est.theta))
        inside = (r < self.cfg.converged_radius) & (dth < self.cfg.converged_angle)
        return bool(np.dot(w, inside) > 0.9)

    def particles(self) -> list[Particle]:
        return [Particle(Pose2(*p), float(w)) for p, w in zip(self.poses, self.weights)]


def run_events(loc: MonteCarloLocalizer, events: Iterable[dict], dump_every: int = 0
               ) -> tuple[list[dict], list[dict]]:
    """Feed an event stream; returns (estimate records, particle dumps).

    One estimate record is emitted per distinct timestamp, after all events
    carrying that timestamp were processed.
    """
    records, dumps = [], []
    last_t = None
    step = 0

    def emit(t):
        nonlocal step
        est = loc.estimate()
        records.append({"timestamp_s": t, "estimate": est.to_list(), "n_eff": loc.n_eff,
                        "converged": loc.is_converged()})
        if dump_every and step % dump_every == 0:
            dumps.append({"timestamp_s": t, "poses": loc.poses.tolist(),
                          "weights": loc.weights.tolist()})
        step += 1

    for ev in events:
        t = float(ev["timestamp_s"])
        if last_t is not None and t != last_t:
            emit(last_t)
        last_t = t
        if ev["type"] == "odom":
            loc.predict(Pose2.from_list(ev["delta"]))
        elif ev["type"] == "obs":
            dets = [Detection3D.from_dict(d) for d in ev.get("detections", [])]
            loc.update(Observation(dets, Pose3.from_dict(ev["cam_pose_in_robot"])))
        else:
            raise ValueError(f"unknown event type {ev['type']!r}")
    if last_t is not None:
        emit(last_t)
    return records, dumps
