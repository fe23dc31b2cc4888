"""Procedural rigid-body dynamic scenes with exact multi-view ground truth.

Replaces a physics-engine pipeline with scripted trajectory families (linear,
ballistic, constant angular velocity) over textured convex primitives and a
textured ground plane, rendered by the z-buffer pass for exact depth, per-pixel
object coordinates and 3D scene flow. A 4-camera synchronized rig is randomized
per scene: a slow first-camera trajectory, three relative cameras with a shared
look-at point, per-camera focal lengths, and one motion-blur camera (input-only).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .cameras import Camera, GeometryError
from .sparse_flow import SparseFlowField
from .zbuffer import Mesh, RenderBuffers, make_box, make_capsule, make_ground, make_icosphere, render_geometry


@dataclass
class RigRandomization:
    num_cameras: int = 4
    max_path_length: float = 0.5  # first-camera trajectory arc length, meters
    rel_dist_min: float = 4.0  # relative camera distance bounds, meters
    rel_dist_max: float = 16.0
    focal_mm_min: float = 25.0  # 35mm-equivalent focal range
    focal_mm_max: float = 55.0
    base_radius: tuple[float, float] = (8.5, 11.0)  # first camera distance to look-at
    polar_deg: tuple[float, float] = (15.0, 32.0)  # angle from vertical; keeps horizon out
    rel_offset: tuple[float, float] = (4.0, 5.5)  # sampled relative distances


@dataclass
class SceneSpec:
    rig: RigRandomization = field(default_factory=RigRandomization)
    frames: int = 25
    height: int = 64
    width: int = 64
    fps: float = 12.0
    num_objects: tuple[int, int] = (3, 5)
    speed: tuple[float, float] = (0.15, 0.6)  # m/s
    spin: tuple[float, float] = (0.3, 1.2)  # rad/s
    gravity: float = 0.3  # gentle ballistic pull, m/s^2
    ground_half_extent: float = 60.0
    blur_substeps: int = 4


@dataclass
class ObjectMotion:
    """Per-frame rigid transform record of one object (world = R x_obj + t)."""

    rotations: np.ndarray  # (F, 3, 3)
    translations: np.ndarray  # (F, 3)
    is_static: bool

    def pose_at(self, tau_frames: float, fps: float):  # analytic, used for blur substeps
        raise NotImplementedError


@dataclass
class SceneBundle:
    scene_id: int
    spec: SceneSpec
    cameras: list[list[Camera]]  # [camera][frame]
    images: np.ndarray  # (C, F, H, W, 3) float32 in [0, 1]
    depths: np.ndarray  # (C, F, H, W) float32 ray distance, 0 = no hit
    obj_ids: np.ndarray | None  # (C, F, H, W) int32, -1 = no hit (generation-time only)
    obj_coords: np.ndarray | None  # (C, F, H, W, 3) float32 (generation-time only)
    motions: list[ObjectMotion]
    blur_index: int
    heldout_index: int
    flows: dict[int, SparseFlowField] = field(default_factory=dict)

    @property
    def num_cameras(self) -> int:
        return len(self.cameras)

    @property
    def frames(self) -> int:
        return self.spec.frames


# ---------------------------------------------------------------------------
# deterministic value noise and materials


def _hash01(ix: np.ndarray, iy: np.ndarray, iz: np.ndarray, seed: int) -> np.ndarray:
    h = (ix * 374761393 + iy * 668265263 + iz * 2147483647 + seed * 144665) & 0x7FFFFFFF
    h = (h ^ (h >> 13)) * 1274126177 & 0x7FFFFFFF
    return ((h ^ (h >> 16)) % 1048576) / 1048576.0


def value_noise3(points: np.ndarray, freq: float, seed: int) -> np.ndarray:
    """Trilinearly interpolated lattice noise in [0, 1]; smooth and deterministic."""
    p = np.asarray(points, dtype=np.float64) * freq
    i = np.floor(p).astype(np.int64)
    f = p - i
    f = f * f * (3.0 - 2.0 * f)  # smoothstep
    out = np.zeros(p.shape[:-1])
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                corner = _hash01(i[..., 0] + dx, i[..., 1] + dy, i[..., 2] + dz, seed)
                wx = f[..., 0] if dx else 1.0 - f[..., 0]
                wy = f[..., 1] if dy else 1.0 - f[..., 1]
                wz = f[..., 2] if dz else 1.0 - f[..., 2]
                out += corner * wx * wy * wz
    return out


@dataclass
class Material:
    base_color: np.ndarray  # (3,)
    noise_freq: float
    noise_amp: float
    seed: int

    def shade(self, obj_coords: np.ndarray, normals: np.ndarray, light_dir: np.ndarray) -> np.ndarray:
        tex = value_noise3(obj_coords, self.noise_freq, self.seed)
        tex = tex + 0.5 * value_noise3(obj_coords, self.noise_freq * 2.7, self.seed + 7)
        tex /= 1.5
        albedo = self.base_color * (1.0 - self.noise_amp + self.noise_amp * 2.0 * tex[..., None])
        lambert = np.clip((normals * light_dir).sum(-1), 0.0, 1.0)
        shade = 0.72 + 0.28 * lambert
        return np.clip(albedo * shade[..., None], 0.0, 1.0)


# ---------------------------------------------------------------------------
# trajectories


def _rodrigues(axis: np.ndarray, angle: float) -> np.ndarray:
    a = axis / np.linalg.norm(axis)
    kx, ky, kz = a
    k = np.array([[0, -kz, ky], [kz, 0, -kx], [-ky, kx, 0]])
    return np.eye(3) + math.sin(angle) * k + (1.0 - math.cos(angle)) * (k @ k)


@dataclass
class Trajectory:
    """Analytic rigid motion: pose(tau) with tau in seconds."""

    kind: str  # linear | ballistic | spin
    p0: np.ndarray
    velocity: np.ndarray
    gravity: float = 0.0
    axis: np.ndarray = field(default_factory=lambda: np.array([0.0, 1.0, 0.0]))
    omega: float = 0.0

    def pose(self, tau: float) -> tuple[np.ndarray, np.ndarray]:
        t = self.p0 + self.velocity * tau
        if self.kind == "ballistic":
            t = t + np.array([0.0, -0.5 * self.gravity * tau * tau, 0.0])
        r = _rodrigues(self.axis, self.omega * tau) if self.kind == "spin" else np.eye(3)
        return r, t

    def min_height(self, duration: float, steps: int = 50) -> float:
        taus = np.linspace(0.0, duration, steps)
        return min(self.pose(float(tau))[1][1] for tau in taus)


def _lookat_rotation(position: np.ndarray, target: np.ndarray) -> np.ndarray:
    z = target - position
    z = z / np.linalg.norm(z)
    up = np.array([0.0, 1.0, 0.0])
    x = np.cross(z, up)
    n = np.linalg.norm(x)
    if n < 1e-8:
        raise GeometryError("camera looking straight along the up axis")
    x = x / n
    y = np.cross(z, x)
    return np.stack([x, y, z])  # rows: world-to-camera


class _Rig:
    """Analytic camera rig: first-camera path plus fixed relative offsets."""

    def __init__(self, spec: SceneSpec, rng: np.random.Generator):
        rig = spec.rig
        self.look_at = np.array([rng.uniform(-0.5, 0.5), 0.5, rng.uniform(-0.5, 0.5)])
        for _ in range(200):
            polar = math.radians(rng.uniform(*rig.polar_deg))
            azim = rng.uniform(0.0, 2.0 * math.pi)
            radius = rng.uniform(*rig.base_radius)
            base = self.look_at + radius * np.array(
                [math.sin(polar) * math.cos(azim), math.cos(polar), math.sin(polar) * math.sin(azim)]
            )
            offsets = [np.zeros(3)]
            ok = True
            for _k in range(rig.num_cameras - 1):
                placed = False
                for _try in range(50):
                    d = rng.uniform(*rig.rel_offset)
                    direction = rng.normal(size=3)
                    direction[1] *= 0.35  # keep the rig mostly around the scene, not above it
                    direction /= np.linalg.norm(direction)
                    off = d * direction
                    pos = base + off
                    rel = pos - self.look_at
                    r = np.linalg.norm(rel)
                    pol = math.degrees(math.acos(np.clip(rel[1] / r, -1, 1)))
                    if not (rig.polar_deg[0] - 3.0 <= pol <= rig.polar_deg[1] + 3.0):
                        continue
                    if pos[1] < 2.0:
                        continue
                    dists = [np.linalg.norm(off - o) for o in offsets]
                    if any(x < rig.rel_dist_min or x > rig.rel_dist_max for x in dists):
                        continue
                    offsets.append(off)
                    placed = True
                    break
                if not placed:
                    ok = False
                    break
            if ok:
                self.base = base
                self.offsets = offsets
                break
        else:
            raise GeometryError("could not sample a valid camera rig")

        # slow first-camera arc with total path length <= max_path_length
        duration = (spec.frames - 1) / spec.fps
        tangent = np.cross(self.base - self.look_at, np.array([0.0, 1.0, 0.0]))
        tangent /= np.linalg.norm(tangent)
        lift = rng.uniform(-0.25, 0.25)
        self.path_dir = tangent + np.array([0.0, lift, 0.0])
        self.path_dir /= np.linalg.norm(self.path_dir)
        self.path_len = rig.max_path_length * rng.uniform(0.6, 1.0)
        self.path_speed = self.path_len / duration

        self.focals_px = [
            rng.uniform(rig.focal_mm_min, rig.focal_mm_max) / 36.0 * spec.width
            for _ in range(rig.num_cameras)
        ]
        self.spec = spec

    def camera(self, cam_index: int, frame_tau: float) -> Camera:
        spec = self.spec
        pos = self.base + self.offsets[cam_index] + self.path_dir * self.path_speed * frame_tau
        r = _lookat_rotation(pos, self.look_at)
        f = self.focals_px[cam_index]
        return Camera(
            fx=f, fy=f, cx=spec.width / 2.0, cy=spec.height / 2.0,
            height=spec.height, width=spec.width, R=r, t=-r @ pos,
        )


def _sample_objects(spec: SceneSpec, rng: np.random.Generator):
    meshes: list[Mesh] = [make_ground(spec.ground_half_extent, cells=6)]
    trajectories: list[Trajectory | None] = [None]  # ground is static
    materials = [
        Material(
            base_color=np.array([0.55, 0.58, 0.50]), noise_freq=0.18, noise_amp=0.45,
            seed=int(rng.integers(1 << 30)),
        )
    ]
    count = int(rng.integers(spec.num_objects[0], spec.num_objects[1] + 1))
    duration = (spec.frames - 1) / spec.fps
    placed: list[np.ndarray] = []
    for _ in range(count):
        kind = rng.choice(["box", "sphere", "capsule"])
        if kind == "box":
            half = rng.uniform(0.45, 0.8, size=3)
            mesh, reach = make_box(half), float(np.linalg.norm(half))
        elif kind == "sphere":
            radius = rng.uniform(0.5, 0.9)
            mesh, reach = make_icosphere(radius, 2), radius
        else:
            radius, hh = rng.uniform(0.35, 0.55), rng.uniform(0.35, 0.6)
            mesh, reach = make_capsule(radius, hh), radius + hh

        for _try in range(60):
            p0 = np.array(
                [rng.uniform(-2.2, 2.2), rng.uniform(0.8 + reach, 2.8), rng.uniform(-2.2, 2.2)]
            )
            if all(np.linalg.norm(p0 - q) > 1.6 for q in placed):
                break
        placed.append(p0)

        family = rng.choice(["linear", "ballistic", "spin"])
        direction = rng.normal(size=3)
        direction[1] *= 0.3
        direction /= np.linalg.norm(direction)
        speed = rng.uniform(*spec.speed)
        for _try in range(50):
            if family == "linear":
                traj = Trajectory(kind="linear", p0=p0, velocity=direction * speed)
            elif family == "ballistic":
                v = direction * speed + np.array([0.0, rng.uniform(0.1, 0.4), 0.0])
                traj = Trajectory(kind="ballistic", p0=p0, velocity=v, gravity=spec.gravity)
            else:
                axis = rng.normal(size=3)
                traj = Trajectory(
                    kind="spin", p0=p0, velocity=direction * speed * rng.uniform(0.0, 0.5),
                    axis=axis / np.linalg.norm(axis), omega=rng.uniform(*spec.spin),
                )
            if traj.min_height(duration) > reach + 0.05:
                break
            speed *= 0.7
        hue = rng.uniform(0.0, 1.0)
        sat = rng.uniform(0.35, 0.65)
        val = rng.uniform(0.45, 0.8)
        base = _hsv_to_rgb(hue, sat, val)
        meshes.append(mesh)
        trajectories.append(traj)
        materials.append(
            Material(base_color=base, noise_freq=rng.uniform(1.2, 2.6), noise_amp=0.35,
                     seed=int(rng.integers(1 << 30)))
        )
    return meshes, trajectories, materials


def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    rgb = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]
    return np.array(rgb)


def _instances_at(meshes, trajectories, tau: float):
    out = []
    for mesh, traj in zip(meshes, trajectories):
        if traj is None:
            out.append((mesh, np.eye(3), np.zeros(3)))
        else:
            r, t = traj.pose(tau)
            out.append((mesh, r, t))
    return out


def generate_scene(spec: SceneSpec, seed: int) -> SceneBundle:
    """Render one deterministic synthetic scene with full ground truth."""
    rng = np.random.default_rng(seed)
    rig = _Rig(spec, rng)
    meshes, trajectories, materials = _sample_objects(spec, rng)
    light = rng.normal(size=3)
    light[1] = abs(light[1]) + 1.5
    light /= np.linalg.norm(light)

    ncam, nfr = spec.rig.num_cameras, spec.frames
    h, w = spec.height, spec.width
    blur_index = int(rng.integers(0, ncam))
    heldout_candidates = [i for i in range(ncam) if i != blur_index]
    heldout_index = int(rng.choice(heldout_candidates))

    cameras: list[list[Camera]] = [[] for _ in range(ncam)]
    images = np.zeros((ncam, nfr, h, w, 3), dtype=np.float32)
    depths = np.zeros((ncam, nfr, h, w), dtype=np.float32)
    obj_ids = np.full((ncam, nfr, h, w), -1, dtype=np.int32)
    obj_coords = np.zeros((ncam, nfr, h, w, 3), dtype=np.float32)

    for ci in range(ncam):
        for fi in range(nfr):
            tau = fi / spec.fps
            cam = rig.camera(ci, tau)
            cameras[ci].append(cam)
            buffers = render_geometry(cam, _instances_at(meshes, trajectories, tau))
            rgb = _shade(buffers, materials, light)
            if ci == blur_index and spec.blur_substeps > 1:
                acc = rgb.astype(np.float64)
                for k in range(1, spec.blur_substeps):
                    sub_tau = tau + k / (spec.blur_substeps * spec.fps)
                    sub_cam = rig.camera(ci, sub_tau)
                    sub = render_geometry(sub_cam, _instances_at(meshes, trajectories, sub_tau))
                    acc += _shade(sub, materials, light)
                rgb = (acc / spec.blur_substeps).astype(np.float32)
            images[ci, fi] = rgb
            depths[ci, fi] = buffers.depth.astype(np.float32)
            obj_ids[ci, fi] = buffers.obj_id
            obj_coords[ci, fi] = buffers.obj_coords.astype(np.float32)

    motions = []
    for traj in trajectories:
        if traj is None:
            motions.append(
                ObjectMotion(
                    rotations=np.tile(np.eye(3), (nfr, 1, 1)),
                    translations=np.zeros((nfr, 3)),
                    is_static=True,
                )
            )
        else:
            rs, ts = [], []
            for fi in range(nfr):
                r, t = traj.pose(fi / spec.fps)
                rs.append(r)
                ts.append(t)
            motions.append(
                ObjectMotion(rotations=np.stack(rs), translations=np.stack(ts), is_static=False)
            )

    bundle = SceneBundle(
        scene_id=seed, spec=spec, cameras=cameras, images=images, depths=depths,
        obj_ids=obj_ids, obj_coords=obj_coords, motions=motions,
        blur_index=blur_index, heldout_index=heldout_index,
    )
    for ci in range(ncam):
        bundle.flows[ci] = extract_scene_flow(
            bundle, list(range(nfr)), list(range(nfr)), camera_index=ci
        )
    return bundle


def _shade(buffers: RenderBuffers, materials: list[Material], light: np.ndarray) -> np.ndarray:
    rgb = np.zeros(buffers.depth.shape + (3,), dtype=np.float32)
    for oid, mat in enumerate(materials):
        mask = buffers.obj_id == oid
        if mask.any():
            rgb[mask] = mat.shade(buffers.obj_coords[mask], buffers.normal[mask], light)
    return rgb


def extract_scene_flow(
    bundle: SceneBundle,
    source_frames: list[int],
    target_frames: list[int],
    camera_index: int = 0,
) -> SparseFlowField:
    """World-space flow per source pixel: move its surface point by the object's
    rigid transforms. Static surfaces are omitted (implicit zero); pixels with no
    hit are invalid and also omitted."""
    if bundle.obj_ids is None or bundle.obj_coords is None:
        raise ValueError("bundle does not carry object-coordinate buffers")
    spec = bundle.spec
    sf = SparseFlowField(frames=spec.frames, height=spec.height, width=spec.width)
    hw = spec.height * spec.width
    for s in source_frames:
        ids = bundle.obj_ids[camera_index, s].ravel()
        coords = bundle.obj_coords[camera_index, s].reshape(-1, 3)
        moving = np.zeros(hw, dtype=bool)
        for oid, motion in enumerate(bundle.motions):
            if not motion.is_static:
                moving |= ids == oid
        idx = np.nonzero(moving)[0]
        if idx.size == 0:
            for t in target_frames:
                sf.put(s, t, np.empty(0, dtype=np.uint32), np.empty((0, 3), dtype=np.float32))
            continue
        ids_m = ids[idx]
        pts = coords[idx]
        pos_src = np.zeros((idx.size, 3))
        for oid, motion in enumerate(bundle.motions):
            sel = ids_m == oid
            if sel.any():
                pos_src[sel] = pts[sel] @ motion.rotations[s].T + motion.translations[s]
        for t in target_frames:
            pos_tgt = np.zeros((idx.size, 3))
            for oid, motion in enumerate(bundle.motions):
                sel = ids_m == oid
                if sel.any():
                    pos_tgt[sel] = pts[sel] @ motion.rotations[t].T + motion.translations[t]
            sf.put(s, t, idx, (pos_tgt - pos_src).astype(np.float32))
    return sf
