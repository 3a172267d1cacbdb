"""Pinhole camera rigs, frustum point generation, and calibration noise.

Conventions: camera frame is x-right / y-down / z-forward; the ego frame is
x-forward / y-left / z-up with the ego at the origin. A pixel index (h, w)
names the sample point (h + 0.5, w + 0.5) in continuous image coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ORTHO_TOL = 1e-6


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")


@dataclass(frozen=True)
class Extrinsics:
    """Camera-to-ego rigid transform."""

    rotation: np.ndarray  # (3, 3)
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if rot.shape != (3, 3) or t.shape != (3,):
            raise ValueError(f"extrinsics shapes {rot.shape}, {t.shape}")
        if np.abs(rot.T @ rot - np.eye(3)).max() > ORTHO_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(rot) - 1.0) > ORTHO_TOL:
            raise ValueError(f"rotation determinant {np.linalg.det(rot)} != +1")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", t)


@dataclass(frozen=True)
class Camera:
    intrinsics: Intrinsics
    extrinsics: Extrinsics
    height: int
    width: int


@dataclass(frozen=True)
class CameraRig:
    cameras: tuple[Camera, ...]

    def __post_init__(self):
        cams = tuple(self.cameras)
        if len(cams) < 1:
            raise ValueError("a rig needs at least one camera")
        h, w = cams[0].height, cams[0].width
        for c in cams:
            if (c.height, c.width) != (h, w):
                raise ValueError(f"all cameras must share image dimensions, got {(c.height, c.width)} vs {(h, w)}")
        object.__setattr__(self, "cameras", cams)

    @property
    def n(self) -> int:
        return len(self.cameras)

    @property
    def image_hw(self) -> tuple[int, int]:
        return self.cameras[0].height, self.cameras[0].width

    def subset(self, indices) -> "CameraRig":
        return CameraRig(tuple(self.cameras[i] for i in indices))


@dataclass(frozen=True)
class DepthBinSpec:
    d0: float
    delta: float
    count: int

    def __post_init__(self):
        if self.d0 <= 0 or self.delta <= 0 or self.count < 1:
            raise ValueError(f"bad depth bins d0={self.d0} delta={self.delta} count={self.count}")

    def depths(self) -> np.ndarray:
        """Bin i sits at d0 + i*delta."""
        return self.d0 + self.delta * np.arange(self.count, dtype=np.float64)

    def nearest_bin(self, depth: np.ndarray) -> np.ndarray:
        """Index of the closest bin, clamped to [0, count)."""
        idx = np.round((np.asarray(depth, dtype=np.float64) - self.d0) / self.delta)
        return np.clip(np.nan_to_num(idx, nan=0.0, posinf=self.count - 1, neginf=0.0), 0, self.count - 1).astype(np.int64)


@dataclass(frozen=True)
class FrustumGrid:
    """Per-camera ego-frame coordinates of every (depth bin, feature pixel)."""

    ego_coords: np.ndarray  # (n, |D|, H_f, W_f, 3)
    downsample: int
    bins: DepthBinSpec = field(repr=False, default=None)


def unproject_pixel(intr: Intrinsics, extr: Extrinsics, h: float, w: float, d: float) -> np.ndarray:
    """Ego-frame point of continuous pixel (h, w) at camera depth d."""
    if d <= 0:
        raise ValueError(f"depth must be positive, got {d}")
    cam = np.array([(w - intr.cx) * d / intr.fx, (h - intr.cy) * d / intr.fy, d], dtype=np.float64)
    return extr.rotation @ cam + extr.translation


def project_point(intr: Intrinsics, extr: Extrinsics, point_ego) -> tuple[float, float, float]:
    """Inverse of unproject_pixel: (h, w, depth) for an ego-frame point."""
    cam = extr.rotation.T @ (np.asarray(point_ego, dtype=np.float64) - extr.translation)
    d = cam[2]
    if d <= 0:
        raise ValueError(f"point is behind the camera (depth {d})")
    return (cam[1] * intr.fy / d + intr.cy, cam[0] * intr.fx / d + intr.cx, d)


def build_frustum(rig: CameraRig, bins: DepthBinSpec, downsample: int) -> FrustumGrid:
    """Ego-frame coordinates at feature-cell centers for every depth bin."""
    h, w = rig.image_hw
    if h % downsample or w % downsample:
        raise ValueError(f"image {h}x{w} not divisible by downsample {downsample}")
    hf, wf = h // downsample, w // downsample
    # Feature cell (i, j) covers a downsample x downsample pixel block; its
    # center in continuous image coordinates:
    hs = (np.arange(hf, dtype=np.float64) + 0.5) * downsample
    ws = (np.arange(wf, dtype=np.float64) + 0.5) * downsample
    ds = bins.depths()
    d_grid = ds[:, None, None]
    x_cam_unit = np.broadcast_to(ws[None, None, :], (bins.count, hf, wf))
    y_cam_unit = np.broadcast_to(hs[None, :, None], (bins.count, hf, wf))
    coords = np.empty((rig.n, bins.count, hf, wf, 3), dtype=np.float64)
    for k, cam in enumerate(rig.cameras):
        intr, extr = cam.intrinsics, cam.extrinsics
        pts = np.stack([
            (x_cam_unit - intr.cx) * d_grid / intr.fx,
            (y_cam_unit - intr.cy) * d_grid / intr.fy,
            np.broadcast_to(d_grid, (bins.count, hf, wf)),
        ], axis=-1)
        coords[k] = pts @ extr.rotation.T + extr.translation
    return FrustumGrid(ego_coords=coords, downsample=downsample, bins=bins)


def _axis_angle_rotation(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = axis / np.linalg.norm(axis)
    x, y, z = axis
    k = np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]], dtype=np.float64)
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def perturb_extrinsics(extr: Extrinsics, rot_noise_deg: float, trans_noise_m: float, rng_seed) -> Extrinsics:
    """Compose a random axis-angle rotation and Gaussian translation offset."""
    if rot_noise_deg < 0 or trans_noise_m < 0:
        raise ValueError("noise magnitudes must be non-negative")
    rng = np.random.default_rng(rng_seed)
    rot = extr.rotation
    if rot_noise_deg > 0:
        axis = rng.standard_normal(3)
        while np.linalg.norm(axis) < 1e-12:
            axis = rng.standard_normal(3)
        angle = np.deg2rad(rng.standard_normal() * rot_noise_deg)
        rot = _axis_angle_rotation(axis, angle) @ rot
        # Guard against drift from repeated composition.
        u, _, vt = np.linalg.svd(rot)
        rot = u @ vt
    trans = extr.translation
    if trans_noise_m > 0:
        trans = trans + rng.standard_normal(3) * trans_noise_m
    return Extrinsics(rotation=rot, translation=trans)


def rotate_rig(rig: CameraRig, rotation: np.ndarray) -> CameraRig:
    """Apply a rigid ego-frame rotation to every camera of the rig."""
    rotation = np.asarray(rotation, dtype=np.float64)
    cams = tuple(
        Camera(c.intrinsics,
               Extrinsics(rotation @ c.extrinsics.rotation, rotation @ c.extrinsics.translation),
               c.height, c.width)
        for c in rig.cameras)
    return CameraRig(cams)


def perturb_rig(rig: CameraRig, rot_noise_deg: float, trans_noise_m: float, rng_seed) -> CameraRig:
    """Independently perturb every camera; seed k derives from (rng_seed, k)."""
    cams = []
    for k, cam in enumerate(rig.cameras):
        extr = perturb_extrinsics(cam.extrinsics, rot_noise_deg, trans_noise_m,
                                  np.random.SeedSequence([int(rng_seed) & 0x7FFFFFFF, k]))
        cams.append(Camera(cam.intrinsics, extr, cam.height, cam.width))
    return CameraRig(tuple(cams))


# ---------------------------------------------------------------------------
# calibration text format


def write_calibration(path, rig: CameraRig):
    """One block per camera: index, intrinsics, row-major rotation, translation, image size."""
    lines = []
    for i, cam in enumerate(rig.cameras):
        intr, extr = cam.intrinsics, cam.extrinsics
        lines.append(f"camera {i}")
        lines.append("intrinsics " + " ".join(repr(float(v)) for v in (intr.fx, intr.fy, intr.cx, intr.cy)))
        lines.append("rotation " + " ".join(repr(float(v)) for v in extr.rotation.reshape(-1)))
        lines.append("translation " + " ".join(repr(float(v)) for v in extr.translation))
        lines.append(f"image {cam.height} {cam.width}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def read_calibration(path) -> CameraRig:
    with open(path) as f:
        tokens = [line.split() for line in f if line.strip()]
    cams = []
    i = 0
    try:
        while i < len(tokens):
            if tokens[i][0] != "camera":
                raise ValueError(f"expected 'camera', got {tokens[i][0]!r}")
            intr_row, rot_row, t_row, img_row = tokens[i + 1], tokens[i + 2], tokens[i + 3], tokens[i + 4]
            if [intr_row[0], rot_row[0], t_row[0], img_row[0]] != ["intrinsics", "rotation", "translation", "image"]:
                raise ValueError(f"malformed camera block at line {i}")
            intr = Intrinsics(*[float(v) for v in intr_row[1:5]])
            rot = np.array([float(v) for v in rot_row[1:10]], dtype=np.float64).reshape(3, 3)
            trans = np.array([float(v) for v in t_row[1:4]], dtype=np.float64)
            cams.append(Camera(intr, Extrinsics(rot, trans), int(img_row[1]), int(img_row[2])))
            i += 5
    except (IndexError, ValueError) as e:
        raise ValueError(f"calibration file {path}: {e}") from None
    return CameraRig(tuple(cams))
