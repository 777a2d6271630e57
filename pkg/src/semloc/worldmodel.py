"""Floor plan grid, room segmentation, object maps and the object probability map."""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional

import numpy as np
from scipy import ndimage

from . import kernels
from .geometry import OrientedBox3, Pose2, footprint, rot2

FREE, OCCUPIED, UNKNOWN = 0, 1, 2

DEFAULT_OCC_THRESH = 0.35
DEFAULT_FREE_THRESH = 0.65
COV_EPS = 1e-6


class MapFormatError(ValueError):
    pass


class MalformedImage(MapFormatError):
    pass


class MissingMetadata(MapFormatError):
    pass


class OutOfBounds(ValueError):
    pass


# --- floor plan --------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FloorPlan:
    """Occupancy grid; ``grid[row, col]`` with row 0 at the bottom (min y)."""

    grid: np.ndarray
    resolution: float
    origin: Pose2 = field(default_factory=Pose2)

    def __post_init__(self):
        g = np.array(self.grid, dtype=np.uint8)
        if g.ndim != 2 or g.size == 0:
            raise MalformedImage("floor plan grid must be a non-empty 2D array")
        if not self.resolution > 0:
            raise ValueError("resolution must be positive")
        g.setflags(write=False)
        object.__setattr__(self, "grid", g)
        object.__setattr__(self, "resolution", float(self.resolution))
        occ = (g == OCCUPIED).astype(np.uint8)
        occ.setflags(write=False)
        object.__setattr__(self, "_occ", occ)

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape

    @property
    def occupied(self) -> np.ndarray:
        return self._occ

    @property
    def free(self) -> np.ndarray:
        return self.grid == FREE

    @property
    def size_m(self) -> tuple[float, float]:
        return (self.shape[1] * self.resolution, self.shape[0] * self.resolution)

    def world_to_grid(self, xy) -> np.ndarray:
        """Continuous (row, col) coordinates; cell (i, j) spans [i, i+1) x [j, j+1)."""
        xy = np.asarray(xy, dtype=float)
        d = xy - np.array([self.origin.x, self.origin.y])
        local = d @ rot2(self.origin.theta)
        return local[..., ::-1] / self.resolution

    def grid_to_world(self, rc) -> np.ndarray:
        rc = np.asarray(rc, dtype=float)
        local = rc[..., ::-1] * self.resolution
        return local @ rot2(self.origin.theta).T + np.array([self.origin.x, self.origin.y])

    def cell_center(self, row: int, col: int) -> np.ndarray:
        return self.grid_to_world(np.array([row + 0.5, col + 0.5]))

    def cell_index(self, xy) -> np.ndarray:
        return np.floor(self.world_to_grid(xy)).astype(np.int64)

    def in_bounds(self, xy) -> np.ndarray:
        rc = self.world_to_grid(xy)
        return (
            (rc[..., 0] >= 0) & (rc[..., 0] < self.shape[0])
            & (rc[..., 1] >= 0) & (rc[..., 1] < self.shape[1])
        )

    def state_at(self, xy) -> np.ndarray:
        """Cell state for each point; points outside the grid read as UNKNOWN."""
        xy = np.asarray(xy, dtype=float)
        idx = self.cell_index(xy)
        inside = self.in_bounds(xy)
        r = np.clip(idx[..., 0], 0, self.shape[0] - 1)
        c = np.clip(idx[..., 1], 0, self.shape[1] - 1)
        return np.where(inside, self.grid[r, c], UNKNOWN)

    def is_free(self, xy) -> np.ndarray:
        return self.state_at(xy) == FREE

    def free_cell_centers(self) -> np.ndarray:
        rows, cols = np.nonzero(self.free)
        return self.grid_to_world(np.stack([rows + 0.5, cols + 0.5], axis=1))


def load_floorplan(image, meta) -> FloorPlan:
    """Build a floor plan from an 8-bit grayscale raster and its metadata.

    ``image`` is a path (PGM/PNG) or a 2D array; float arrays are taken as
    already normalized to [0, 1].  ``meta`` is a path to a YAML file or a
    mapping with ``resolution``, ``origin`` and optional thresholds.  Image
    row 0 is the top of the map, as in ROS map_server files.
    """
    if isinstance(meta, (str, Path)):
        import yaml

        meta_path = Path(meta)
        try:
            meta = yaml.safe_load(meta_path.read_text())
        except (OSError, yaml.YAMLError) as exc:
            raise MissingMetadata(f"{meta_path}: {exc}") from exc
        if image is None and isinstance(meta, dict) and "image" in meta:
            image = meta_path.parent / meta["image"]
    if not isinstance(meta, dict):
        raise MissingMetadata("metadata must be a mapping")
    for key in ("resolution", "origin"):
        if key not in meta:
            raise MissingMetadata(f"metadata lacks '{key}'")
    occ_t = float(meta.get("occ_thresh", DEFAULT_OCC_THRESH))
    free_t = float(meta.get("free_thresh", DEFAULT_FREE_THRESH))
    origin = list(meta["origin"]) + [0.0] * (3 - len(meta["origin"]))

    if isinstance(image, (str, Path)):
        from PIL import Image

        try:
            with Image.open(image) as im:
                arr = np.asarray(im.convert("L"), dtype=float) / 255.0
        except OSError as exc:
            raise MalformedImage(f"{image}: {exc}") from exc
    else:
        arr = np.asarray(image)
        if arr.dtype == np.uint8:
            arr = arr.astype(float) / 255.0
        else:
            arr = arr.astype(float)
    if arr.ndim != 2 or arr.size == 0:
        raise MalformedImage(f"expected a non-empty 2D raster, got shape {arr.shape}")

    arr = arr[::-1]
    grid = np.full(arr.shape, UNKNOWN, dtype=np.uint8)
    grid[arr >= free_t] = FREE
    grid[arr <= occ_t] = OCCUPIED
    return FloorPlan(grid, float(meta["resolution"]), Pose2.from_list(origin[:3]))


def save_floorplan(plan: FloorPlan, image_path, meta_path=None) -> None:
    """Write ``plan`` as an 8-bit PGM/PNG plus a YAML metadata file."""
    import yaml
    from PIL import Image

    image_path = Path(image_path)
    meta_path = Path(meta_path) if meta_path else image_path.with_suffix(".yaml")
    pix = np.full(plan.shape, 128, dtype=np.uint8)
    pix[plan.grid == FREE] = 254
    pix[plan.grid == OCCUPIED] = 0
    Image.fromarray(pix[::-1]).save(image_path)
    meta = {
        "image": image_path.name,
        "resolution": plan.resolution,
        "origin": plan.origin.to_list(),
        "occ_thresh": DEFAULT_OCC_THRESH,
        "free_thresh": DEFAULT_FREE_THRESH,
    }
    meta_path.write_text(yaml.safe_dump(meta, sort_keys=True))


# --- rooms -------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RoomMap:
    labels: np.ndarray
    room_count: int
    resolution: float
    origin: Pose2

    def room_at(self, xy) -> np.ndarray | int:
        xy = np.asarray(xy, dtype=float)
        d = xy - np.array([self.origin.x, self.origin.y])
        rc = np.floor((d @ rot2(self.origin.theta))[..., ::-1] / self.resolution).astype(np.int64)
        inside = (
            (rc[..., 0] >= 0) & (rc[..., 0] < self.labels.shape[0])
            & (rc[..., 1] >= 0) & (rc[..., 1] < self.labels.shape[1])
        )
        r = np.clip(rc[..., 0], 0, self.labels.shape[0] - 1)
        c = np.clip(rc[..., 1], 0, self.labels.shape[1] - 1)
        out = np.where(inside, self.labels[r, c], 0)
        return int(out) if out.ndim == 0 else out

    def nearest_room(self, xy, max_dist: float = 1.0) -> int:
        """Room at ``xy``, or of the nearest labeled cell within ``max_dist``.

        Useful for wall-mounted objects whose estimated center lands in a
        wall cell.
        """
        rid = self.room_at(xy)
        if rid or self.room_count == 0:
            return int(rid)
        if getattr(self, "_near", None) is None:
            dist, (ri, ci) = ndimage.distance_transform_edt(self.labels == 0, return_indices=True)
            object.__setattr__(self, "_near", (dist * self.resolution, self.labels[ri, ci]))
        dist, lab = self._near
        d = np.asarray(xy, dtype=float) - np.array([self.origin.x, self.origin.y])
        r, c = np.floor((d @ rot2(self.origin.theta))[::-1] / self.resolution).astype(np.int64)
        if not (0 <= r < self.labels.shape[0] and 0 <= c < self.labels.shape[1]):
            return 0
        return int(lab[r, c]) if dist[r, c] <= max_dist else 0


def _disk(radius_cells: float) -> np.ndarray:
    r = int(math.floor(radius_cells))
    y, x = np.mgrid[-r : r + 1, -r : r + 1]
    return (x * x + y * y) <= radius_cells * radius_cells


def segment_rooms(plan: FloorPlan, erosion_radius: float = 0.4,
                  min_room_area: float = 1.0) -> RoomMap:
    """Split free space into rooms by eroding away doorways.

    Free space is eroded with a disk of ``erosion_radius``; the 4-connected
    components of what remains seed the rooms, and every original free cell
    takes the label of its nearest seed.  Rooms below ``min_room_area`` are
    dropped to label 0.  Labels are numbered in row-major first-seen order.
    """
    if erosion_radius < plan.resolution:
        raise ValueError("erosion_radius must be at least one cell")
    free = plan.free
    eroded = ndimage.binary_erosion(free, structure=_disk(erosion_radius / plan.resolution),
                                    border_value=0)
    seeds, n = ndimage.label(eroded, structure=ndimage.generate_binary_structure(2, 1))
    labels = np.zeros(plan.shape, dtype=np.int32)
    if n == 0:
        return RoomMap(labels, 0, plan.resolution, plan.origin)
    _, (ri, ci) = ndimage.distance_transform_edt(seeds == 0, return_indices=True)
    grown = np.where(free, seeds[ri, ci], 0)

    cell_area = plan.resolution ** 2
    areas = np.bincount(grown.ravel(), minlength=n + 1) * cell_area
    keep = areas >= min_room_area
    keep[0] = False
    grown = np.where(keep[grown], grown, 0)

    flat = grown.ravel()
    ids, first = np.unique(flat, return_index=True)
    order = [int(i) for _, i in sorted(zip(first, ids)) if i != 0]
    remap = np.zeros(n + 1, dtype=np.int32)
    for new, old in enumerate(order, start=1):
        remap[old] = new
    labels = remap[grown]
    return RoomMap(labels, len(order), plan.resolution, plan.origin)


# --- raycasting --------------------------------------------------------------


def raycast(plan: FloorPlan, start, end) -> Optional[np.ndarray]:
    """Walk the grid from ``start`` to ``end``.

    Returns ``None`` when no occupied cell is crossed, otherwise the world
    coordinates of the first occupied cell's center.
    """
    rc = plan.world_to_grid(np.array([start, end], dtype=float))
    h, w = plan.shape
    if np.any(rc < 0) or np.any(rc[:, 0] > h) or np.any(rc[:, 1] > w):
        raise OutOfBounds(f"raycast endpoints {start} -> {end} leave the grid")
    hit, r, c = kernels.raycast(plan.occupied, rc[0, 0], rc[0, 1], rc[1, 0], rc[1, 1])
    if not hit:
        return None
    return plan.cell_center(r, c)


def line_of_sight(plan: FloorPlan, start, end) -> bool:
    """True when the segment is clear; segments leaving the grid are blocked."""
    try:
        return raycast(plan, start, end) is None
    except OutOfBounds:
        return False


# --- object maps -------------------------------------------------------------


@dataclass
class MapObject:
    id: int
    class_label: str
    box: OrientedBox3
    active: bool = False
    n_skip: int = 0
    n_match: int = 1
    room_id: int = 0

    def to_dict(self) -> dict:
        return {
            "id": int(self.id),
            "class": self.class_label,
            "center": [float(v) for v in self.box.center],
            "dims": [float(v) for v in self.box.dims],
            "rotation": [float(v) for v in self.box.rotation.ravel()],
            "n_match": int(self.n_match),
            "n_skip": int(self.n_skip),
            "room_id": int(self.room_id),
        }

    @classmethod
    def from_dict(cls, d) -> "MapObject":
        try:
            box = OrientedBox3(d["center"], d["dims"],
                               np.asarray(d.get("rotation", np.eye(3).ravel()), float).reshape(3, 3))
            return cls(int(d["id"]), str(d["class"]), box, False,
                       int(d.get("n_skip", 0)), int(d.get("n_match", 1)), int(d.get("room_id", 0)))
        except KeyError as exc:
            raise MapFormatError(f"object record lacks {exc}") from exc


class ObjectMap:
    """Collection of map objects keyed by unique integer id."""

    def __init__(self, objects: Iterable[MapObject] = ()):
        self._objects: dict[int, MapObject] = {}
        self._next_id = 0
        for o in objects:
            self.insert(o)

    def __len__(self) -> int:
        return len(self._objects)

    def __iter__(self) -> Iterator[MapObject]:
        return iter(list(self._objects.values()))

    def __contains__(self, obj_id) -> bool:
        return obj_id in self._objects

    def __getitem__(self, obj_id: int) -> MapObject:
        return self._objects[obj_id]

    @property
    def objects(self) -> list[MapObject]:
        return list(self._objects.values())

    @property
    def classes(self) -> list[str]:
        return sorted({o.class_label for o in self._objects.values()})

    def insert(self, obj: MapObject) -> MapObject:
        if obj.id in self._objects:
            raise ValueError(f"duplicate object id {obj.id}")
        self._objects[obj.id] = obj
        self._next_id = max(self._next_id, obj.id + 1)
        return obj

    def add(self, class_label: str, box: OrientedBox3, **kw) -> MapObject:
        return self.insert(MapObject(self._next_id, class_label, box, **kw))

    def remove(self, obj_id: int) -> MapObject:
        return self._objects.pop(obj_id)

    def by_class(self, class_label: str) -> list[MapObject]:
        return [o for o in self._objects.values() if o.class_label == class_label]

    def copy(self) -> "ObjectMap":
        m = ObjectMap()
        m._objects = {k: copy.copy(v) for k, v in self._objects.items()}
        m._next_id = self._next_id
        return m

    def clear(self) -> None:
        self._objects.clear()

    def to_json(self) -> list:
        return [o.to_dict() for o in sorted(self._objects.values(), key=lambda o: o.id)]

    @classmethod
    def from_json(cls, data) -> "ObjectMap":
        if isinstance(data, dict) and "objects" in data:
            data = data["objects"]
        if not isinstance(data, list):
            raise MapFormatError("object map JSON must be an array of objects")
        return cls(MapObject.from_dict(d) for d in data)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "ObjectMap":
        return cls.from_json(json.loads(Path(path).read_text()))


def assign_rooms(omap: ObjectMap, rooms: RoomMap) -> ObjectMap:
    """Tag each object with the room label under its footprint center."""
    for o in omap:
        o.room_id = int(rooms.room_at(o.box.center[:2]))
    return omap


# --- object probability map --------------------------------------------------


@dataclass(frozen=True, eq=False)
class ObjectGaussian:
    object_id: int
    class_label: str
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mu = np.array(self.mean, dtype=float).reshape(2)
        S = np.array(self.cov, dtype=float).reshape(2, 2)
        S = 0.5 * (S + S.T)
        if np.min(np.linalg.eigvalsh(S)) <= 1e-8:
            raise ValueError(f"covariance of object {self.object_id} is not positive definite")
        mu.setflags(write=False)
        S.setflags(write=False)
        object.__setattr__(self, "mean", mu)
        object.__setattr__(self, "cov", S)
        inv = np.linalg.inv(S)
        inv = 0.5 * (inv + inv.T)
        inv.setflags(write=False)
        object.__setattr__(self, "inv_cov", inv)

    @property
    def peak_density(self) -> float:
        return 1.0 / (2.0 * math.pi * math.sqrt(np.linalg.det(self.cov)))

    def mahalanobis_sq(self, c) -> np.ndarray | float:
        d = np.asarray(c, dtype=float) - self.mean
        m2 = np.einsum("...i,ij,...j->...", d, self.inv_cov, d)
        return float(m2) if np.ndim(m2) == 0 else m2

    def to_dict(self) -> dict:
        return {
            "object_id": int(self.object_id),
            "class": self.class_label,
            "mean": [float(v) for v in self.mean],
            "cov": [float(v) for v in self.cov.ravel()],
        }

    @classmethod
    def from_dict(cls, d) -> "ObjectGaussian":
        return cls(int(d["object_id"]), str(d["class"]), d["mean"], np.asarray(d["cov"]).reshape(2, 2))


@dataclass(frozen=True)
class ClassArrays:
    """Packed per-class arrays consumed by the sensor-model kernels."""

    ids: np.ndarray
    means: np.ndarray
    icovs: np.ndarray  # rows [a, b, c] of the symmetric inverse [[a, b], [b, c]]
    footprints: np.ndarray  # rows [cx, cy, half_w, half_l, yaw]


class ObjectProbabilityMap:
    def __init__(self, gaussians: Iterable[ObjectGaussian] = ()):
        self.gaussians: list[ObjectGaussian] = list(gaussians)
        self._packed: dict[tuple, ClassArrays] = {}

    def __len__(self) -> int:
        return len(self.gaussians)

    def __iter__(self):
        return iter(self.gaussians)

    def by_class(self, class_label: str) -> list[ObjectGaussian]:
        return [g for g in self.gaussians if g.class_label == class_label]

    @property
    def classes(self) -> list[str]:
        return sorted({g.class_label for g in self.gaussians})

    def packed(self, class_label: str, omap: Optional[ObjectMap] = None) -> ClassArrays:
        """Arrays for one class; footprints come from ``omap`` when given."""
        key = (class_label, omap is not None)
        if key in self._packed:
            return self._packed[key]
        gs = self.by_class(class_label)
        ids = np.array([g.object_id for g in gs], dtype=np.int64)
        means = np.array([g.mean for g in gs], dtype=float).reshape(-1, 2)
        icovs = np.array([[g.inv_cov[0, 0], g.inv_cov[0, 1], g.inv_cov[1, 1]] for g in gs],
                         dtype=float).reshape(-1, 3)
        fps = np.zeros((len(gs), 5))
        if omap is not None:
            for k, g in enumerate(gs):
                fps[k] = footprint(omap[g.object_id].box).as_array()
        arr = ClassArrays(ids, means, icovs, fps)
        self._packed[key] = arr
        return arr

    def to_json(self) -> list:
        return [g.to_dict() for g in sorted(self.gaussians, key=lambda g: g.object_id)]

    @classmethod
    def from_json(cls, data) -> "ObjectProbabilityMap":
        if not isinstance(data, list):
            raise MapFormatError("probability map JSON must be an array")
        return cls(ObjectGaussian.from_dict(d) for d in data)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "ObjectProbabilityMap":
        return cls.from_json(json.loads(Path(path).read_text()))
