"""Deterministic synthetic multi-camera driving world.

One scene is a flat ground plane, a single lane (straight or constant
curvature) through the ego origin, and a handful of non-overlapping parked
vehicles rendered as flat-shaded boxes. Depth is inferable from vertical image
position and apparent scale, which is exactly the cue the lift step has to
learn. Scenes, renders, rasters and expert trajectories are pure functions of
(seed, config, rig).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cameras import CameraRig, read_calibration, write_calibration
from .shoot import Trajectory
from .splat import BevGridSpec

VEHICLE_PALETTE = np.array([
    [0.90, 0.12, 0.10],
    [0.15, 0.30, 0.95],
    [0.95, 0.85, 0.10],
    [0.10, 0.85, 0.90],
    [0.90, 0.15, 0.85],
    [0.95, 0.55, 0.10],
], dtype=np.float32)
COLOR_ASPHALT = np.array([0.28, 0.28, 0.30], dtype=np.float32)
COLOR_OFFROAD = np.array([0.13, 0.33, 0.14], dtype=np.float32)
COLOR_MARKING = np.array([0.92, 0.92, 0.90], dtype=np.float32)
COLOR_SKY = np.array([0.45, 0.65, 0.95], dtype=np.float32)
FACE_SHADE = np.array([0.80, 0.65, 1.00], dtype=np.float32)  # by box-frame axis that ended the slab test

EGO_LENGTH = 4.2
EGO_WIDTH = 1.9


class PlacementError(RuntimeError):
    """Vehicle rejection sampling ran out of attempts."""


class DatasetError(RuntimeError):
    """A persisted sample is missing or corrupt."""


@dataclass(frozen=True)
class Box:
    x: float
    y: float
    yaw: float
    length: float
    width: float
    height: float
    color_id: int

    def corners(self) -> np.ndarray:
        """Footprint corners, (4, 2)."""
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        half = np.array([[self.length / 2, self.width / 2], [self.length / 2, -self.width / 2],
                         [-self.length / 2, -self.width / 2], [-self.length / 2, self.width / 2]])
        rot = np.array([[c, -s], [s, c]])
        return half @ rot.T + np.array([self.x, self.y])


def boxes_overlap(a: Box, b: Box) -> bool:
    """Separating-axis test on the two footprints."""
    ca, cb = a.corners(), b.corners()
    for corners, yaw in ((ca, a.yaw), (cb, b.yaw)):
        for axis in (np.array([np.cos(yaw), np.sin(yaw)]), np.array([-np.sin(yaw), np.cos(yaw)])):
            pa = ca @ axis
            pb = cb @ axis
            if pa.max() < pb.min() or pb.max() < pa.min():
                return True  # found a separating axis -> disjoint
    return False


def _disjoint(a: Box, b: Box) -> bool:
    return boxes_overlap(a, b)


@dataclass(frozen=True)
class Lane:
    """Centerline through the origin headed +x: straight or constant-curvature arc."""

    curvature: float
    width: float

    def point_at(self, s):
        s = np.asarray(s, dtype=np.float64)
        k = self.curvature
        if k == 0.0:
            return np.stack([s, np.zeros_like(s)], axis=-1)
        theta = s * k
        return np.stack([np.sin(theta) / k, (1.0 - np.cos(theta)) / k], axis=-1)

    def heading_at(self, s):
        return np.asarray(s, dtype=np.float64) * self.curvature

    def lateral_offset(self, xy) -> np.ndarray:
        """Signed distance from the centerline, positive to the left."""
        xy = np.asarray(xy, dtype=np.float64)
        k = self.curvature
        if k == 0.0:
            return xy[..., 1]
        center = np.array([0.0, 1.0 / k])
        r = np.linalg.norm(xy - center, axis=-1)
        return np.sign(k) * (1.0 / abs(k) - r)

    def arc_position(self, xy) -> np.ndarray:
        """Arc length of the projection of xy onto the centerline."""
        xy = np.asarray(xy, dtype=np.float64)
        k = self.curvature
        if k == 0.0:
            return xy[..., 0]
        v = xy - np.array([0.0, 1.0 / k])
        u = v * k
        return np.arctan2(u[..., 0], -u[..., 1]) / k


@dataclass(frozen=True)
class SceneConfig:
    extent: float = 16.0
    vehicle_count: tuple[int, int] = (2, 6)
    curvature_range: tuple[float, float] = (-0.05, 0.05)
    straight_prob: float = 0.34
    lane_width: float = 3.6
    marking_width: float = 0.35
    max_attempts: int = 1000

    def __post_init__(self):
        lo, hi = self.vehicle_count
        if lo < 0 or hi < lo:
            raise ValueError(f"bad vehicle count range {self.vehicle_count}")
        klo, khi = self.curvature_range
        if klo < -0.05 - 1e-12 or khi > 0.05 + 1e-12 or khi < klo:
            raise ValueError(f"curvature range {self.curvature_range} outside [-0.05, 0.05]")


@dataclass(frozen=True)
class SynthScene:
    lane: Lane
    vehicles: tuple[Box, ...]
    config: SceneConfig = field(repr=False, default=None)


def sample_scene(rng_seed, cfg: SceneConfig) -> SynthScene:
    rng = np.random.default_rng(rng_seed)
    if rng.random() < cfg.straight_prob:
        curvature = 0.0
    else:
        curvature = float(rng.uniform(*cfg.curvature_range))
    lane = Lane(curvature=curvature, width=cfg.lane_width)
    count = int(rng.integers(cfg.vehicle_count[0], cfg.vehicle_count[1] + 1))
    ego = Box(0.0, 0.0, 0.0, EGO_LENGTH, EGO_WIDTH, 1.5, 0)
    vehicles: list[Box] = []
    attempts = 0
    while len(vehicles) < count:
        attempts += 1
        if attempts > cfg.max_attempts:
            raise PlacementError(f"could not place {count} vehicles in {cfg.max_attempts} attempts")
        length = float(rng.uniform(3.6, 5.0))
        width = float(rng.uniform(1.7, 2.1))
        margin = np.hypot(length, width) / 2
        box = Box(
            x=float(rng.uniform(-cfg.extent + margin, cfg.extent - margin)),
            y=float(rng.uniform(-cfg.extent + margin, cfg.extent - margin)),
            yaw=float(rng.uniform(-np.pi, np.pi)),
            length=length, width=width,
            height=float(rng.uniform(1.4, 1.8)),
            color_id=int(rng.integers(len(VEHICLE_PALETTE))),
        )
        if not boxes_overlap(box, ego) and all(not boxes_overlap(box, v) for v in vehicles):
            vehicles.append(box)
    return SynthScene(lane=lane, vehicles=tuple(vehicles), config=cfg)


# ---------------------------------------------------------------------------
# rendering


def _ground_colors(lane: Lane, xy: np.ndarray, marking_width: float) -> np.ndarray:
    lat = np.abs(lane.lateral_offset(xy))
    colors = np.where((lat <= lane.width / 2)[..., None], COLOR_ASPHALT, COLOR_OFFROAD)
    marking = np.abs(lat - lane.width / 2) <= marking_width / 2
    return np.where(marking[..., None], COLOR_MARKING, colors).astype(np.float32)


def _ray_box_depth(origin: np.ndarray, dirs: np.ndarray, box: Box):
    """Slab test; rays are parameterized so t equals camera z-depth.

    Returns (t_near, axis) where axis is the box-frame axis whose slab closed
    the interval (used for flat face shading); t is +inf for misses.
    """
    c, s = np.cos(box.yaw), np.sin(box.yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    center = np.array([box.x, box.y, box.height / 2])
    o = rot.T @ (origin - center)
    d = dirs @ rot  # row-vector form of rot.T @ dir
    half = np.array([box.length / 2, box.width / 2, box.height / 2])
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (-half - o) * inv
        t2 = (half - o) * inv
    lo = np.minimum(t1, t2)
    hi = np.maximum(t1, t2)
    parallel = np.abs(d) < 1e-12
    inside = np.abs(o) <= half
    lo = np.where(parallel, np.where(inside, -np.inf, np.inf), lo)
    hi = np.where(parallel, np.where(inside, np.inf, -np.inf), hi)
    t_near = lo.max(axis=-1)
    t_far = hi.min(axis=-1)
    axis = lo.argmax(axis=-1)
    hit = (t_near <= t_far) & (t_near > 1e-9)
    return np.where(hit, t_near, np.inf), axis


def render(scene: SynthScene, rig: CameraRig, return_ids: bool = False):
    """Per-pixel raycast: images (n, 3, H, W) in [0, 1] and z-depth maps (n, H, W).

    Sky pixels carry +inf depth. With return_ids, also emits an (n, H, W)
    int buffer: vehicle index, -1 for ground, -2 for sky.
    """
    h, w = rig.image_hw
    n = rig.n
    images = np.empty((n, 3, h, w), dtype=np.float32)
    depths = np.empty((n, h, w), dtype=np.float32)
    ids = np.full((n, h, w), -2, dtype=np.int64)
    marking_width = scene.config.marking_width if scene.config is not None else 0.35
    for k, cam in enumerate(rig.cameras):
        intr, extr = cam.intrinsics, cam.extrinsics
        ws = (np.arange(w) + 0.5 - intr.cx) / intr.fx
        hs = (np.arange(h) + 0.5 - intr.cy) / intr.fy
        dirs_cam = np.stack([np.broadcast_to(ws[None, :], (h, w)),
                             np.broadcast_to(hs[:, None], (h, w)),
                             np.ones((h, w))], axis=-1)
        dirs = dirs_cam @ extr.rotation.T  # t along a ray equals camera z-depth
        origin = extr.translation
        dz = dirs[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            t_ground = np.where(dz < -1e-12, -origin[2] / dz, np.inf)
        best_t = t_ground.copy()
        best_id = np.where(np.isfinite(t_ground), -1, -2)
        shade = np.ones((h, w), dtype=np.float32)
        for vi, box in enumerate(scene.vehicles):
            t_box, axis = _ray_box_depth(origin, dirs, box)
            closer = t_box < best_t
            best_t = np.where(closer, t_box, best_t)
            best_id = np.where(closer, vi, best_id)
            shade = np.where(closer, FACE_SHADE[axis], shade)
        img = np.broadcast_to(COLOR_SKY, (h, w, 3)).copy()
        ground_mask = best_id == -1
        if ground_mask.any():
            hit_xy = origin[:2] + t_ground[ground_mask, None] * dirs[ground_mask][:, :2]
            img[ground_mask] = _ground_colors(scene.lane, hit_xy, marking_width)
        for vi, box in enumerate(scene.vehicles):
            m = best_id == vi
            if m.any():
                img[m] = VEHICLE_PALETTE[box.color_id] * shade[m][:, None]
        images[k] = img.transpose(2, 0, 1)
        depths[k] = np.where(best_id >= -1, best_t, np.inf).astype(np.float32)
        ids[k] = best_id
    if return_ids:
        return images, depths, ids
    return images, depths


# ---------------------------------------------------------------------------
# ground-truth rasters


def _cell_centers(spec: BevGridSpec) -> np.ndarray:
    xs = spec.x_min + (np.arange(spec.nx) + 0.5) * spec.cell
    ys = spec.y_min + (np.arange(spec.ny) + 0.5) * spec.cell
    return np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1)  # (X, Y, 2)


def rasterize_bev(scene: SynthScene, spec: BevGridSpec):
    """(vehicle, drivable, lane) binary rasters over cell centers, each (X, Y)."""
    centers = _cell_centers(spec)
    vehicle = np.zeros((spec.nx, spec.ny), dtype=bool)
    for box in scene.vehicles:
        c, s = np.cos(box.yaw), np.sin(box.yaw)
        rel = centers - np.array([box.x, box.y])
        local_x = rel[..., 0] * c + rel[..., 1] * s
        local_y = -rel[..., 0] * s + rel[..., 1] * c
        vehicle |= (np.abs(local_x) <= box.length / 2) & (np.abs(local_y) <= box.width / 2)
    lat = np.abs(scene.lane.lateral_offset(centers))
    marking_width = scene.config.marking_width if scene.config is not None else 0.35
    drivable = lat <= scene.lane.width / 2
    lane = np.abs(lat - scene.lane.width / 2) <= marking_width / 2
    return vehicle.astype(np.float32), drivable.astype(np.float32), lane.astype(np.float32)


# ---------------------------------------------------------------------------
# expert trajectories


def blocking_distance(scene: SynthScene) -> float:
    """Arc distance to the nearest on-lane vehicle ahead, +inf if the lane is clear."""
    best = np.inf
    for box in scene.vehicles:
        center = np.array([box.x, box.y])
        if abs(scene.lane.lateral_offset(center)) <= scene.lane.width / 2:
            s = float(scene.lane.arc_position(center))
            if s > 0:
                best = min(best, s)
    return best


def expert_trajectory(scene: SynthScene, horizon: int, dt: float, rng_seed,
                      speed_range=(3.0, 12.0), lateral_noise: float = 0.05,
                      stop_distance: float = 15.0, stop_time: float = 1.0) -> Trajectory:
    """Constant-speed centerline following with a ramp to zero behind blockers."""
    rng = np.random.default_rng(rng_seed)
    v0 = float(rng.uniform(*speed_range))
    noise = rng.standard_normal(horizon) * lateral_noise
    s_block = blocking_distance(scene)
    pts = np.empty((horizon, 3))
    s, v = 0.0, v0
    for j in range(horizon):
        base = scene.lane.point_at(s)
        heading = scene.lane.heading_at(s)
        normal = np.array([-np.sin(heading), np.cos(heading)])
        pts[j, :2] = base + noise[j] * normal
        pts[j, 2] = j * dt
        if s_block - s < stop_distance:
            v = max(0.0, v - v0 * dt / stop_time)
        s += v * dt
    return Trajectory(pts)


# ---------------------------------------------------------------------------
# sample assembly and persistence


@dataclass
class SynthSample:
    images: np.ndarray       # (n, 3, H, W) float32
    depth_maps: np.ndarray   # (n, H, W) float32, +inf sky
    bev_vehicle: np.ndarray  # (X, Y) float32 0/1
    bev_drivable: np.ndarray
    bev_lane: np.ndarray
    expert: Trajectory
    rig: CameraRig


def generate_sample(seed, rig: CameraRig, scene_cfg: SceneConfig, bev_spec: BevGridSpec,
                    horizon: int = 20, dt: float = 0.25) -> SynthSample:
    scene_ss, expert_ss = np.random.SeedSequence(seed).spawn(2)
    scene = sample_scene(scene_ss, scene_cfg)
    images, depths = render(scene, rig)
    vehicle, drivable, lane = rasterize_bev(scene, bev_spec)
    expert = expert_trajectory(scene, horizon, dt, expert_ss)
    return SynthSample(images=images, depth_maps=depths, bev_vehicle=vehicle,
                       bev_drivable=drivable, bev_lane=lane, expert=expert, rig=rig)


def save_f32(path, arr: np.ndarray):
    arr = np.asarray(arr, dtype=np.float32)
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", arr.ndim))
        for d in arr.shape:
            f.write(struct.pack("<Q", d))
        f.write(arr.astype("<f4").tobytes())


def load_f32(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 8:
        raise ValueError("truncated header")
    (rank,) = struct.unpack_from("<Q", raw, 0)
    if len(raw) < 8 + 8 * rank:
        raise ValueError("truncated dims")
    dims = struct.unpack_from(f"<{rank}Q", raw, 8)
    size = int(np.prod(dims)) if rank else 1
    start = 8 + 8 * rank
    if len(raw) != start + 4 * size:
        raise ValueError(f"payload is {len(raw) - start} bytes, expected {4 * size}")
    return np.frombuffer(raw, dtype="<f4", offset=start).reshape(dims).astype(np.float32)


def _write_trajectory(path, traj: Trajectory):
    with open(path, "w") as f:
        f.write(f"{traj.horizon}\n")
        for x, y, t in traj.points:
            f.write(f"{float(x)!r} {float(y)!r} {float(t)!r}\n")


def _read_trajectory(path) -> Trajectory:
    with open(path) as f:
        horizon = int(f.readline())
        rows = np.loadtxt(f, dtype=np.float64, ndmin=2)
    if rows.shape != (horizon, 3):
        raise ValueError(f"expected {horizon} rows of x y t, got {rows.shape}")
    return Trajectory(rows)


def sample_dir(root, idx: int) -> Path:
    return Path(root) / f"sample_{idx}"


def write_sample(root, idx: int, sample: SynthSample):
    d = sample_dir(root, idx)
    d.mkdir(parents=True, exist_ok=True)
    write_calibration(d / "calib.txt", sample.rig)
    for k in range(sample.images.shape[0]):
        save_f32(d / f"image_{k}.f32", sample.images[k])
        save_f32(d / f"depth_{k}.f32", sample.depth_maps[k])
    save_f32(d / "bev_vehicle.f32", sample.bev_vehicle)
    save_f32(d / "bev_drivable.f32", sample.bev_drivable)
    save_f32(d / "bev_lane.f32", sample.bev_lane)
    _write_trajectory(d / "expert.txt", sample.expert)


def read_sample(root, idx: int) -> SynthSample:
    d = sample_dir(root, idx)

    def field_(name, loader):
        path = d / name
        try:
            return loader(path)
        except FileNotFoundError:
            raise DatasetError(f"sample_{idx}: {name}: missing") from None
        except ValueError as e:
            raise DatasetError(f"sample_{idx}: {name}: {e}") from None

    rig = field_("calib.txt", read_calibration)
    images = np.stack([field_(f"image_{k}.f32", load_f32) for k in range(rig.n)])
    depths = np.stack([field_(f"depth_{k}.f32", load_f32) for k in range(rig.n)])
    vehicle = field_("bev_vehicle.f32", load_f32)
    drivable = field_("bev_drivable.f32", load_f32)
    lane = field_("bev_lane.f32", load_f32)
    expert = field_("expert.txt", _read_trajectory)
    return SynthSample(images=images, depth_maps=depths, bev_vehicle=vehicle,
                       bev_drivable=drivable, bev_lane=lane, expert=expert, rig=rig)


def write_dataset(root, count: int, rig: CameraRig, scene_cfg: SceneConfig, bev_spec: BevGridSpec,
                  base_seed: int, horizon: int = 20, dt: float = 0.25):
    """Samples i = 0..count-1, each seeded by (base_seed, i)."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for i in range(count):
        sample = generate_sample([int(base_seed), i], rig, scene_cfg, bev_spec, horizon=horizon, dt=dt)
        write_sample(root, i, sample)


def dataset_size(root) -> int:
    root = Path(root)
    count = 0
    while sample_dir(root, count).is_dir():
        count += 1
    if count == 0:
        raise DatasetError(f"no samples under {root}")
    return count


class Dataset:
    """Lazy reader over a sample directory tree."""

    def __init__(self, root):
        self.root = Path(root)
        self.count = dataset_size(root)
        self.rig = read_sample(self.root, 0).rig

    def __len__(self):
        return self.count

    def __getitem__(self, idx: int) -> SynthSample:
        if not 0 <= idx < self.count:
            raise IndexError(idx)
        return read_sample(self.root, idx)
