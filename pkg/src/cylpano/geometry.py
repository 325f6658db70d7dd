"""Coordinate conversions, pinhole projection, bounding rectangles, and rigid transforms.

Conventions:
  * Cartesian points are arrays of shape (..., 3) holding (x, y, z) in meters.
  * Polar triples are (rho, theta, z) with rho >= 0 and theta in [0, 2*pi).
  * Pixel coordinates (u, v) are continuous; u grows right, v grows down.
  * The camera extrinsic maps the LiDAR frame into the camera frame
    (x right, y down, z forward); depth is the camera-frame z.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BehindCameraError, EmptySetError

TWO_PI = 2.0 * np.pi


def cart_to_polar(xyz: np.ndarray) -> np.ndarray:
    """Convert (..., 3) Cartesian points to (rho, theta, z) with theta in [0, 2*pi)."""
    xyz = np.asarray(xyz, dtype=np.float64)
    rho = np.hypot(xyz[..., 0], xyz[..., 1])
    theta = np.arctan2(xyz[..., 1], xyz[..., 0]) % TWO_PI
    # A remainder of a tiny negative angle can round up to exactly 2*pi.
    theta = np.where(theta >= TWO_PI, 0.0, theta)
    return np.stack([rho, theta, xyz[..., 2]], axis=-1)


def polar_to_cart(pol: np.ndarray) -> np.ndarray:
    """Inverse of :func:`cart_to_polar` (exact up to floating round-off)."""
    pol = np.asarray(pol, dtype=np.float64)
    rho, theta = pol[..., 0], pol[..., 1]
    return np.stack([rho * np.cos(theta), rho * np.sin(theta), pol[..., 2]], axis=-1)


def rotation_z(angle: float) -> np.ndarray:
    """3x3 rotation about the z axis."""
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera: intrinsic K (3x3, pixels), extrinsic T (4x4, LiDAR -> camera)."""

    intrinsic: np.ndarray
    extrinsic: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        K = np.asarray(self.intrinsic, dtype=np.float64).reshape(3, 3)
        T = np.asarray(self.extrinsic, dtype=np.float64).reshape(4, 4)
        if not (np.isfinite(K).all() and np.isfinite(T).all()):
            raise ValueError("camera matrices must be finite")
        if K[0, 0] <= 0 or K[1, 1] <= 0 or K[2, 2] <= 0:
            raise ValueError("intrinsic focal entries must be positive")
        if np.abs(K[np.tril_indices(3, k=-1)]).max() > 1e-9:
            raise ValueError("intrinsic must be upper-triangular")
        R = T[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6):
            raise ValueError("extrinsic rotation block must be orthonormal")
        # |det| == 1 admits the mirrored extrinsics produced by flip augmentation;
        # calibration files are additionally required to be proper (det == +1).
        if abs(abs(np.linalg.det(R)) - 1.0) > 1e-6:
            raise ValueError("extrinsic rotation block must have |det| == 1")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        object.__setattr__(self, "intrinsic", K)
        object.__setattr__(self, "extrinsic", T)

    @property
    def is_proper(self) -> bool:
        return np.linalg.det(self.extrinsic[:3, :3]) > 0.0


def project_points(xyz: np.ndarray, cam: CameraModel) -> tuple[np.ndarray, np.ndarray]:
    """Project (N, 3) points: returns continuous (N, 2) pixel coords and (N,) depths.

    Rows with depth <= 0 hold unusable pixel values; callers filter on depth
    and image bounds. Out-of-image projections are not an error.
    """
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    cam_pts = xyz @ cam.extrinsic[:3, :3].T + cam.extrinsic[:3, 3]
    depth = cam_pts[:, 2]
    hom = cam_pts @ cam.intrinsic.T
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = hom[:, :2] / depth[:, None]
    return uv, depth


def project_point(p, cam: CameraModel) -> tuple[float, float, float]:
    """Project one point, returning (u, v, depth). Raises BehindCameraError if depth <= 0."""
    uv, depth = project_points(np.asarray(p, dtype=np.float64).reshape(1, 3), cam)
    d = float(depth[0])
    if d <= 0.0:
        raise BehindCameraError(f"camera-frame depth {d} <= 0")
    return float(uv[0, 0]), float(uv[0, 1]), d


def valid_projections(xyz: np.ndarray, cam: CameraModel) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project points and keep those in front of the camera and inside the image.

    Returns (uv, depth, valid_mask); uv/depth cover all input rows.
    """
    uv, depth = project_points(xyz, cam)
    valid = (
        (depth > 0.0)
        & (uv[:, 0] >= 0.0)
        & (uv[:, 0] < cam.width)
        & (uv[:, 1] >= 0.0)
        & (uv[:, 1] < cam.height)
    )
    return uv, depth, valid


@dataclass(frozen=True)
class Rect:
    """Inclusive integer pixel rectangle."""

    u_min: int
    v_min: int
    u_max: int
    v_max: int

    def __post_init__(self):
        if self.u_min > self.u_max or self.v_min > self.v_max:
            raise ValueError("rectangle sides must be ordered")

    def contains(self, u: int, v: int) -> bool:
        return self.u_min <= u <= self.u_max and self.v_min <= v <= self.v_max

    def as_array(self) -> np.ndarray:
        return np.array([self.u_min, self.v_min, self.u_max, self.v_max], dtype=np.int32)


def bounding_rect(uv: np.ndarray) -> Rect:
    """Minimal integer rectangle covering the floor-rounded pixel cells of `uv` (N, 2)."""
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    if uv.shape[0] == 0:
        raise EmptySetError("bounding_rect of an empty pixel set")
    cells = np.floor(uv).astype(np.int64)
    return Rect(
        int(cells[:, 0].min()),
        int(cells[:, 1].min()),
        int(cells[:, 0].max()),
        int(cells[:, 1].max()),
    )


@dataclass(frozen=True)
class InstanceTransform:
    """Similarity transform applied to a pasted instance about its centroid."""

    translation: np.ndarray
    rot_z: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.scale <= 0.0:
            raise ValueError("scale must be positive")
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "InstanceTransform":
        return cls(np.zeros(3), 0.0, 1.0)


def transform_instance(points: np.ndarray, t: InstanceTransform) -> np.ndarray:
    """Rotate/scale about the point-set centroid, then translate. Returns float64 (N, 3)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] == 0:
        return pts.copy()
    centroid = pts.mean(axis=0)
    out = (pts - centroid) @ rotation_z(t.rot_z).T * t.scale
    return out + centroid + t.translation


def similarity_matrix(rot_z: float = 0.0, flip_y: bool = False, scale: float = 1.0) -> np.ndarray:
    """3x3 linear map for the global scene transforms: p' = scale * F * Rz * p."""
    A = rotation_z(rot_z)
    if flip_y:
        A = np.diag([1.0, -1.0, 1.0]) @ A
    return scale * A


def transform_camera(cam: CameraModel, A: np.ndarray) -> CameraModel:
    """Adjust an extrinsic so projection of transformed points matches the original.

    For points p' = A p with A = scale * orthogonal, the returned camera maps
    p' to the original pixel (u, v); depths scale with the scene, keeping the
    extrinsic rotation block orthonormal.
    """
    A = np.asarray(A, dtype=np.float64)
    scale = abs(np.linalg.det(A)) ** (1.0 / 3.0)
    O = A / scale
    R = cam.extrinsic[:3, :3]
    t = cam.extrinsic[:3, 3]
    T = np.eye(4)
    T[:3, :3] = R @ np.linalg.inv(O)
    T[:3, 3] = scale * t
    return CameraModel(cam.intrinsic, T, cam.width, cam.height)
