"""Per-pixel deformable Gaussian splats: keyframe sets, warping, and flow queries.

Each keyframe holds one Gaussian per pixel, parametrized by depth along the pixel
ray, color, rotation, scale, opacity, and a per-timestamp translation field. Warping
to a target timestamp moves centers by the corresponding translation vector and
copies every other attribute unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .cameras import Camera
from .tracks import TrackSet


def _to_tensor(x, dtype=torch.float32) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)


@dataclass
class KeyframeGaussians:
    """Pixel-aligned deformable Gaussians of one keyframe.

    timestamp: keyframe index in {0, l, 2l, ..., N}.
    depth:     (H, W) ray distance, > 0.
    rgb:       (H, W, 3) in [0, 1].
    rotation:  (H, W, 4) unit quaternion (w, x, y, z).
    scale:     (H, W, 3) positive scene units.
    opacity:   (H, W) in [0, 1].
    flow:      (H, W, N+1, 3) translation to every window timestamp; exactly zero
               at the keyframe's own timestamp (canonicalized).
    origin:    (3,) shared ray origin (keyframe camera center, world).
    directions:(H, W, 3) unit pixel ray directions (world).
    """

    timestamp: int
    depth: torch.Tensor
    rgb: torch.Tensor
    rotation: torch.Tensor
    scale: torch.Tensor
    opacity: torch.Tensor
    flow: torch.Tensor
    origin: torch.Tensor
    directions: torch.Tensor

    def __post_init__(self):
        self.depth = _to_tensor(self.depth)
        self.rgb = _to_tensor(self.rgb)
        self.rotation = _to_tensor(self.rotation)
        self.scale = _to_tensor(self.scale)
        self.opacity = _to_tensor(self.opacity)
        self.flow = _to_tensor(self.flow)
        self.origin = _to_tensor(self.origin)
        self.directions = _to_tensor(self.directions)

    @property
    def image_shape(self) -> tuple[int, int]:
        return tuple(self.depth.shape)

    @property
    def window_length(self) -> int:
        """N: flow covers timestamps 0..N."""
        return self.flow.shape[2] - 1

    @property
    def num_gaussians(self) -> int:
        return self.depth.numel()

    @property
    def centers(self) -> torch.Tensor:
        """(H, W, 3) Gaussian centers; every center lies on its pixel ray."""
        return self.origin + self.depth[..., None] * self.directions

    def validate(self, tol_quat: float = 1e-5, tol_flow: float = 0.0) -> None:
        if (self.depth <= 0).any():
            raise ValueError("depths must be positive")
        if self.rgb.min() < 0 or self.rgb.max() > 1:
            raise ValueError("rgb must lie in [0, 1]")
        qerr = (self.rotation.norm(dim=-1) - 1.0).abs().max().item()
        if qerr > tol_quat:
            raise ValueError(f"quaternions not unit norm (max err {qerr:.3g})")
        if self.opacity.min() < 0 or self.opacity.max() > 1:
            raise ValueError("opacities must lie in [0, 1]")
        if (self.scale <= 0).any():
            raise ValueError("scales must be positive")
        if not (0 <= self.timestamp <= self.window_length):
            raise ValueError(f"keyframe timestamp {self.timestamp} outside window")
        own = self.flow[:, :, self.timestamp].abs().max().item()
        if own > tol_flow:
            raise ValueError(f"flow at the keyframe's own timestamp must be zero (max {own:.3g})")


def canonicalize_flow(flow: torch.Tensor, own_timestamp: int) -> torch.Tensor:
    """Shift a raw per-timestamp translation field so it is zero at the owner's time."""
    return flow - flow[..., own_timestamp : own_timestamp + 1, :]


@dataclass
class WarpedSet:
    """Flat world-space Gaussians at a single target timestamp, keyframe-major order."""

    centers: torch.Tensor  # (M, 3)
    rotation: torch.Tensor  # (M, 4)
    scale: torch.Tensor  # (M, 3)
    rgb: torch.Tensor  # (M, 3)
    opacity: torch.Tensor  # (M,)
    timestamp: int = 0

    def __len__(self) -> int:
        return self.centers.shape[0]


def warp(gaussians: list[KeyframeGaussians], target_timestamp: int) -> WarpedSet:
    """Deform every keyframe's Gaussians to one timestamp and take the union.

    Output order is keyframe-major, row-major within a keyframe. Non-positional
    attributes are the source tensors untouched.
    """
    if not gaussians:
        raise ValueError("need at least one keyframe")
    n = gaussians[0].window_length
    hw = gaussians[0].image_shape
    for g in gaussians:
        if g.window_length != n or g.image_shape != hw:
            raise ValueError("all keyframes must share image shape and window length")
    if not (0 <= target_timestamp <= n):
        raise ValueError(f"target timestamp {target_timestamp} outside window [0, {n}]")

    centers, rots, scales, rgbs, opacs = [], [], [], [], []
    for g in gaussians:
        centers.append((g.centers + g.flow[:, :, target_timestamp]).reshape(-1, 3))
        rots.append(g.rotation.reshape(-1, 4))
        scales.append(g.scale.reshape(-1, 3))
        rgbs.append(g.rgb.reshape(-1, 3))
        opacs.append(g.opacity.reshape(-1))
    return WarpedSet(
        centers=torch.cat(centers),
        rotation=torch.cat(rots),
        scale=torch.cat(scales),
        rgb=torch.cat(rgbs),
        opacity=torch.cat(opacs),
        timestamp=target_timestamp,
    )


def momentary_flow(gaussians: KeyframeGaussians, end: bool) -> torch.Tensor:
    """Per-pixel relative scene flow between the window's last (or first) two timestamps."""
    n = gaussians.window_length
    if n < 1:
        raise ValueError("window must contain at least 2 timestamps")
    f = gaussians.flow
    if end:
        return f[:, :, n] - f[:, :, n - 1]
    return f[:, :, 1] - f[:, :, 0]


def tracks_from_flow(
    gaussians: KeyframeGaussians, pixel_queries: np.ndarray | list
) -> TrackSet:
    """Single-window 3D tracks for query pixels: track(n) = center + flow(n)."""
    queries = np.atleast_2d(np.asarray(pixel_queries, dtype=np.int64))
    h, w = gaussians.image_shape
    bad = (queries[:, 0] < 0) | (queries[:, 0] >= h) | (queries[:, 1] < 0) | (queries[:, 1] >= w)
    if bad.any():
        raise ValueError(f"{int(bad.sum())} queries outside {h}x{w} image bounds")
    rows, cols = queries[:, 0], queries[:, 1]
    with torch.no_grad():
        centers = gaussians.centers[rows, cols]  # (P, 3)
        flows = gaussians.flow[rows, cols]  # (P, N+1, 3)
        pos = (centers[:, None, :] + flows).numpy()
    return TrackSet(positions=pos, query_ids=rows * w + cols)


def save_bundle(path, gaussians: list[KeyframeGaussians], cameras: list[Camera],
                temporal_rate: int) -> None:
    """Write keyframe Gaussians plus their cameras to an array container.

    Layout: header scalars H, W, N, l, num_keyframes; then per keyframe i the arrays
    kf{i}_depth, kf{i}_rgb, kf{i}_quat, kf{i}_scale, kf{i}_opacity, kf{i}_flow,
    kf{i}_timestamp and kf{i}_camera (18-value record used to rebuild pixel rays).
    """
    if len(gaussians) != len(cameras):
        raise ValueError("one camera per keyframe required")
    h, w = gaussians[0].image_shape
    arrays = {
        "header": np.array([h, w, gaussians[0].window_length, temporal_rate, len(gaussians)],
                           dtype=np.int64),
    }
    for i, (g, cam) in enumerate(zip(gaussians, cameras)):
        arrays[f"kf{i}_depth"] = g.depth.detach().numpy()
        arrays[f"kf{i}_rgb"] = g.rgb.detach().numpy()
        arrays[f"kf{i}_quat"] = g.rotation.detach().numpy()
        arrays[f"kf{i}_scale"] = g.scale.detach().numpy()
        arrays[f"kf{i}_opacity"] = g.opacity.detach().numpy()
        arrays[f"kf{i}_flow"] = g.flow.detach().numpy()
        arrays[f"kf{i}_timestamp"] = np.int64(g.timestamp)
        arrays[f"kf{i}_camera"] = cam.to_record()
    np.savez(path, **arrays)


def load_bundle(path) -> tuple[list[KeyframeGaussians], list[Camera], int]:
    """Inverse of save_bundle; returns (keyframes, cameras, temporal_rate)."""
    with np.load(path) as z:
        h, w, n, rate, count = [int(v) for v in z["header"]]
        gaussians, cams = [], []
        for i in range(count):
            cam = Camera.from_record(z[f"kf{i}_camera"])
            rays = cam.pixel_rays()
            g = KeyframeGaussians(
                timestamp=int(z[f"kf{i}_timestamp"]),
                depth=z[f"kf{i}_depth"],
                rgb=z[f"kf{i}_rgb"],
                rotation=z[f"kf{i}_quat"],
                scale=z[f"kf{i}_scale"],
                opacity=z[f"kf{i}_opacity"],
                flow=z[f"kf{i}_flow"],
                origin=cam.center,
                directions=rays,
            )
            if g.image_shape != (h, w) or g.window_length != n:
                raise ValueError("bundle header does not match stored arrays")
            gaussians.append(g)
            cams.append(cam)
    return gaussians, cams, rate
