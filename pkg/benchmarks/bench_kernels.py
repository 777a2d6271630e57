"""Compiled vs numpy kernels on the sensor-model hot path.

Run with ``python benchmarks/bench_kernels.py [--particles N] [--repeat R]``.
Prints the best-of-R wall time per kernel for each available backend and
the full frame weighting (N particles x 3 detections) through the public
sensor model.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from semloc import _pykernels, kernels, simulator
from semloc.geometry import OrientedBox3, footprint, yaw_matrix
from semloc.localizer import MclConfig, MonteCarloLocalizer, Observation, make_sensor_model, weigh_frame
from semloc.mapper import Detection3D
from semloc.noisemodel import build_probability_map

try:
    from semloc import _ckernels
except ImportError:  # pragma: no cover
    _ckernels = None


def scene(seed: int = 0, n_particles: int = 5000):
    spec = simulator.WorldSpec(n_objects=12)
    noise = simulator.default_noise(spec.classes)
    world = simulator.generate_world(seed, spec, noise)
    gm = world.gt_map()
    mp = build_probability_map(noise, gm)
    cfg = MclConfig(n_particles=n_particles)
    loc = MonteCarloLocalizer(None, world.plan, cfg, seed)
    # three detections of mapped classes, expressed in the camera frame of a forward camera
    ext = simulator.default_rig(1)[0]
    rng = np.random.default_rng(seed)
    dets = []
    for g in sorted(gm, key=lambda o: o.id)[:3]:
        box = OrientedBox3([rng.uniform(1, 3), rng.uniform(-1, 1), g.box.center[2]], g.box.dims,
                           yaw_matrix(rng.uniform(-np.pi, np.pi)))
        dets.append(Detection3D(g.class_label, 0.9, box.transformed(ext)))
    return world, gm, mp, noise, loc.poses, Observation(dets, ext)


def best_of(fn, repeat: int) -> float:
    fn()
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def kernel_cases(mp, gm, poses, obs):
    cls, det = obs.robot_footprints()[0]
    arr = mp.packed(cls, gm)
    fps = arr.footprints
    a, b = det, footprint(next(iter(gm)).box).as_array()
    return {
        "object_weights": lambda k: k.object_weights(poses, det, arr.means, arr.icovs, fps, 0.3),
        "max_density": lambda k: k.max_density(poses, det, arr.means, arr.icovs),
        "max_overlap": lambda k: k.max_overlap(poses, det, fps),
        "footprint_iou x1000": lambda k: [k.footprint_iou(a, b) for _ in range(1000)],
    }


def frame_time(backend, gm, mp, noise, plan, poses, obs, repeat: int) -> float:
    saved = kernels.object_weights
    kernels.object_weights = backend.object_weights
    try:
        sensor = make_sensor_model("object", gm, mp, noise, plan, MclConfig())
        return best_of(lambda: weigh_frame(obs, poses, sensor), repeat)
    finally:
        kernels.object_weights = saved


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--particles", type=int, default=5000)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    world, gm, mp, noise, poses, obs = scene(0, args.particles)
    backends = [("python", _pykernels)] + ([("cython", _ckernels)] if _ckernels else [])
    print(f"default backend: {kernels.BACKEND}; particles: {len(poses)}")
    print(f"{'kernel':<26}" + "".join(f"{n:>12}" for n, _ in backends) + f"{'speedup':>10}")
    cases = kernel_cases(mp, gm, poses, obs)
    for name, fn in cases.items():
        ts = [best_of(lambda: fn(k), args.repeat) for _, k in backends]
        sp = f"{ts[0] / ts[-1]:9.1f}x" if len(ts) > 1 else ""
        print(f"{name:<26}" + "".join(f"{1e3 * t:10.2f}ms" for t in ts) + sp)
    ts = [frame_time(k, gm, mp, noise, world.plan, poses, obs, args.repeat) for _, k in backends]
    sp = f"{ts[0] / ts[-1]:9.1f}x" if len(ts) > 1 else ""
    label = f"frame {len(poses)}x{len(obs.detections)}"
    print(f"{label:<26}" + "".join(f"{1e3 * t:10.2f}ms" for t in ts) + sp)


if __name__ == "__main__":
    main()
