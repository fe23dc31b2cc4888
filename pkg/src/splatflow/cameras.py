"""Camera models, Plucker-ray/timestamp frame encoding and scene-scale normalization.

Conventions:
  world-to-camera transform:  x_cam = R @ x_world + t
  camera center (world):      C = -R^T @ t
  pixel (row r, col c) ray:   K^-1 @ [c, r, 1] in camera coords, rotated to world
  depth:                      Euclidean distance along the pixel ray (not z-depth)
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np


class GeometryError(ValueError):
    """Raised for invalid camera parameters or degenerate geometric inputs."""


@dataclass(frozen=True)
class Camera:
    """Pinhole camera: intrinsics in pixels, world-to-camera rigid transform."""

    fx: float
    fy: float
    cx: float
    cy: float
    height: int
    width: int
    R: np.ndarray  # (3, 3) world-to-camera rotation
    t: np.ndarray  # (3,)  world-to-camera translation

    def __post_init__(self):
        object.__setattr__(self, "R", np.asarray(self.R, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(3))
        self.validate()

    def validate(self, tol: float = 1e-6) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError(f"focal length must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError(
                f"principal point ({self.cx}, {self.cy}) outside image bounds "
                f"{self.width}x{self.height}"
            )
        err = np.abs(self.R @ self.R.T - np.eye(3)).max()
        if err > tol:
            raise GeometryError(f"rotation is not orthonormal (|R R^T - I| = {err:.3g})")
        if np.linalg.det(self.R) < 1.0 - tol:
            raise GeometryError("rotation has determinant != +1 (improper rotation)")

    @property
    def center(self) -> np.ndarray:
        """Camera origin in world coordinates."""
        return -self.R.T @ self.t

    def pixel_rays(self) -> np.ndarray:
        """Unit world-space ray directions through every pixel center, (H, W, 3)."""
        cols, rows = np.meshgrid(np.arange(self.width), np.arange(self.height))
        d_cam = np.stack(
            [(cols - self.cx) / self.fx, (rows - self.cy) / self.fy, np.ones_like(cols, dtype=np.float64)],
            axis=-1,
        )
        d_world = d_cam @ self.R  # == (R^T @ d_cam^T)^T
        return d_world / np.linalg.norm(d_world, axis=-1, keepdims=True)

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Project world points (..., 3) to pixel coords (col, row) and camera z."""
        p = np.asarray(points, dtype=np.float64)
        p_cam = p @ self.R.T + self.t
        z = p_cam[..., 2]
        u = self.fx * p_cam[..., 0] / z + self.cx
        v = self.fy * p_cam[..., 1] / z + self.cy
        return np.stack([u, v], axis=-1), z

    def rescaled(self, s: float) -> "Camera":
        """Camera for a scene whose geometry was uniformly scaled by s."""
        return replace(self, t=self.t * s)

    def to_record(self) -> np.ndarray:
        """Flat 18-float record: fx fy cx cy H W + 3x4 [R|t] row-major."""
        rt = np.concatenate([self.R, self.t[:, None]], axis=1)
        return np.concatenate(
            [[self.fx, self.fy, self.cx, self.cy, self.height, self.width], rt.ravel()]
        )

    @classmethod
    def from_record(cls, rec: np.ndarray) -> "Camera":
        rec = np.asarray(rec, dtype=np.float64).ravel()
        if rec.size != 18:
            raise GeometryError(f"camera record must have 18 values, got {rec.size}")
        rt = rec[6:].reshape(3, 4)
        return cls(
            fx=float(rec[0]), fy=float(rec[1]), cx=float(rec[2]), cy=float(rec[3]),
            height=int(rec[4]), width=int(rec[5]), R=rt[:, :3], t=rt[:, 3],
        )


def save_cameras(path, cameras: list[Camera]) -> None:
    """Write cameras as one 18-value text record per line."""
    recs = np.stack([c.to_record() for c in cameras])
    np.savetxt(path, recs, fmt="%.17g", header=f"records={len(cameras)}")


def load_cameras(path) -> list[Camera]:
    recs = np.loadtxt(path, ndmin=2)
    return [Camera.from_record(r) for r in recs]


@dataclass(frozen=True)
class RayTimeMap:
    """Per-pixel 7-channel encoding of a posed frame: ray direction, moment, timestamp.

    `grid[..., 0:3]` unit ray direction, `grid[..., 3:6]` moment = origin x direction,
    `grid[..., 6]` timestamp in [0, 1], equal across the map. The shared ray origin is
    kept alongside the grid; it is not part of the 7-channel encoding.
    """

    grid: np.ndarray  # (H, W, 7)
    origin: np.ndarray  # (3,)

    @property
    def directions(self) -> np.ndarray:
        return self.grid[..., 0:3]

    @property
    def moments(self) -> np.ndarray:
        return self.grid[..., 3:6]

    @property
    def timestamp(self) -> float:
        return float(self.grid[0, 0, 6])

    def validate(self, tol: float = 1e-6) -> None:
        norms = np.linalg.norm(self.directions, axis=-1)
        if np.abs(norms - 1.0).max() > tol:
            raise GeometryError("ray directions are not unit length")
        dots = np.abs(np.sum(self.directions * self.moments, axis=-1))
        if dots.max() > tol:
            raise GeometryError("ray moments are not orthogonal to directions")
        ts = self.grid[..., 6]
        if ts.min() < 0.0 or ts.max() > 1.0 or (ts != ts.flat[0]).any():
            raise GeometryError("timestamps must be equal across the map and lie in [0, 1]")


def plucker_encode(camera: Camera, frame_index: int, window_length: int) -> RayTimeMap:
    """Encode a posed frame as per-pixel Plucker rays plus a normalized timestamp.

    The timestamp channel is frame_index / window_length; frame_index may lie
    anywhere in [0, window_length].
    """
    if window_length < 1:
        raise GeometryError(f"window length must be >= 1, got {window_length}")
    if not (0 <= frame_index <= window_length):
        raise GeometryError(
            f"frame index {frame_index} outside window [0, {window_length}]"
        )
    camera.validate()
    dirs = camera.pixel_rays()
    origin = camera.center
    moments = np.cross(np.broadcast_to(origin, dirs.shape), dirs)
    ts = np.full(dirs.shape[:2] + (1,), frame_index / window_length)
    return RayTimeMap(grid=np.concatenate([dirs, moments, ts], axis=-1), origin=origin)


def unproject(ray_map: RayTimeMap, depths: np.ndarray) -> np.ndarray:
    """Lift per-pixel ray distances to world points: origin + d * direction."""
    d = np.asarray(depths, dtype=np.float64)
    if d.shape != ray_map.grid.shape[:2]:
        raise GeometryError(f"depth shape {d.shape} does not match map {ray_map.grid.shape[:2]}")
    if (d <= 0).any():
        raise GeometryError("depths must be positive")
    return ray_map.origin + d[..., None] * ray_map.directions


@dataclass(frozen=True)
class SceneScale:
    """Global scale factor applied to poses, depths and flows."""

    s: float

    def __post_init__(self):
        if not (self.s > 0):
            raise GeometryError(f"scene scale must be positive, got {self.s}")


def scale_from_disparity(disparity: np.ndarray, percentile: float = 20.0) -> SceneScale:
    """Scale factor s = 1 / (2 * d_p) with d_p the given percentile of valid depths.

    After multiplying depths by s, the disparity at that depth percentile equals 2.
    Invalid entries (non-finite or <= 0 disparity) are ignored.
    """
    disp = np.asarray(disparity, dtype=np.float64).ravel()
    valid = np.isfinite(disp) & (disp > 0)
    if not valid.any():
        raise GeometryError("no valid pixels in the disparity source")
    depths = 1.0 / disp[valid]
    d_p = np.percentile(depths, percentile)  # linear interpolation between order statistics
    return SceneScale(s=1.0 / (2.0 * d_p))


def normalize_scene(
    disparity: np.ndarray,
    cameras: list[Camera],
    depths: list[np.ndarray] | None = None,
    flows: list[np.ndarray] | None = None,
) -> tuple[SceneScale, list[Camera], list[np.ndarray], list[np.ndarray]]:
    """Rescale a scene so the disparity of the 20th depth percentile equals 2.

    The disparity source is the per-pixel disparity of the first frame (ground-truth
    or injected from an external estimator). The returned scale multiplies camera
    translations, depth maps and flow vectors; inputs are not modified.
    """
    scale = scale_from_disparity(disparity)
    s = scale.s
    cams = [c.rescaled(s) for c in cameras]
    depths_out = [np.asarray(d) * s for d in (depths or [])]
    flows_out = [np.asarray(f) * s for f in (flows or [])]
    return scale, cams, depths_out, flows_out
