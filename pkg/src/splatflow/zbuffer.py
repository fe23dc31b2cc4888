"""Minimal z-buffer triangle renderer for ground-truth data generation.

Renders textured triangle meshes with exact per-pixel depth (ray distance),
object ids and object-frame surface coordinates. Correctness over speed: a
per-triangle scanline with perspective-correct attribute interpolation; near-plane
crossing triangles are clipped properly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cameras import Camera

_ZNEAR = 0.1


@dataclass
class Mesh:
    vertices: np.ndarray  # (V, 3) object frame
    faces: np.ndarray  # (F, 3) int

    def transformed(self, rot: np.ndarray, trans: np.ndarray) -> np.ndarray:
        return self.vertices @ np.asarray(rot).T + np.asarray(trans)


def make_box(half_extents) -> Mesh:
    hx, hy, hz = half_extents
    v = np.array(
        [[sx * hx, sy * hy, sz * hz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)],
        dtype=np.float64,
    )
    f = np.array(
        [
            [0, 1, 3], [0, 3, 2],  # -x
            [4, 6, 7], [4, 7, 5],  # +x
            [0, 4, 5], [0, 5, 1],  # -y
            [2, 3, 7], [2, 7, 6],  # +y
            [0, 2, 6], [0, 6, 4],  # -z
            [1, 5, 7], [1, 7, 3],  # +z
        ],
        dtype=np.int64,
    )
    return Mesh(vertices=v, faces=f)


def make_icosphere(radius: float, subdivisions: int = 2) -> Mesh:
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    v = np.array(
        [
            [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
            [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
            [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
        ],
        dtype=np.float64,
    )
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    f = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ],
        dtype=np.int64,
    )
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}
        verts = list(v)
        new_faces = []

        def midpoint(i: int, j: int) -> int:
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                m /= np.linalg.norm(m)
                cache[key] = len(verts)
                verts.append(m)
            return cache[key]

        for a, b, c in f:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        v = np.array(verts)
        f = np.array(new_faces, dtype=np.int64)
    return Mesh(vertices=v * radius, faces=f)


def make_capsule(radius: float, half_height: float, segments: int = 12, rings: int = 4) -> Mesh:
    """Capsule along the y axis: cylinder of half_height capped by hemispheres."""
    verts, faces = [], []
    ang = np.linspace(0, 2 * np.pi, segments, endpoint=False)

    def ring(y: float, r: float) -> list[int]:
        base = len(verts)
        for a in ang:
            verts.append([r * np.cos(a), y, r * np.sin(a)])
        return list(range(base, base + segments))

    rows = []
    for k in range(rings + 1):  # bottom hemisphere
        th = np.pi / 2 * (k / rings)
        rows.append(ring(-half_height - radius * np.cos(th), radius * np.sin(th)))
    for k in range(1, rings + 1):  # top hemisphere
        th = np.pi / 2 * (1 - k / rings)
        rows.append(ring(half_height + radius * np.cos(th), radius * np.sin(th)))
    for ra, rb in zip(rows[:-1], rows[1:]):
        for i in range(segments):
            j = (i + 1) % segments
            faces += [[ra[i], rb[i], rb[j]], [ra[i], rb[j], ra[j]]]
    return Mesh(vertices=np.array(verts, dtype=np.float64), faces=np.array(faces, dtype=np.int64))


def make_ground(extent: float, cells: int = 4) -> Mesh:
    """Square plane y=0 of +/- extent, subdivided so near-plane clipping stays local."""
    line = np.linspace(-extent, extent, cells + 1)
    xs, zs = np.meshgrid(line, line)
    v = np.stack([xs.ravel(), np.zeros(xs.size), zs.ravel()], axis=1)
    faces = []
    for r in range(cells):
        for c in range(cells):
            a = r * (cells + 1) + c
            b = a + 1
            d = a + cells + 1
            e = d + 1
            faces += [[a, d, b], [b, d, e]]
    return Mesh(vertices=v, faces=np.array(faces, dtype=np.int64))


def _clip_near(tri_cam: np.ndarray, attrs: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Clip one camera-space triangle against z = _ZNEAR; returns 0-2 triangles."""
    z = tri_cam[:, 2]
    inside = z > _ZNEAR
    if inside.all():
        return [(tri_cam, attrs)]
    if not inside.any():
        return []
    poly_v, poly_a = [], []
    for i in range(3):
        j = (i + 1) % 3
        vi, vj = tri_cam[i], tri_cam[j]
        ai, aj = attrs[i], attrs[j]
        if inside[i]:
            poly_v.append(vi)
            poly_a.append(ai)
        if inside[i] != inside[j]:
            t = (_ZNEAR - vi[2]) / (vj[2] - vi[2])
            poly_v.append(vi + t * (vj - vi))
            poly_a.append(ai + t * (aj - ai))
    out = []
    for k in range(1, len(poly_v) - 1):
        out.append(
            (np.stack([poly_v[0], poly_v[k], poly_v[k + 1]]),
             np.stack([poly_a[0], poly_a[k], poly_a[k + 1]]))
        )
    return out


@dataclass
class RenderBuffers:
    depth: np.ndarray  # (H, W) ray distance, 0 where nothing was hit
    obj_id: np.ndarray  # (H, W) int32, -1 where nothing was hit
    obj_coords: np.ndarray  # (H, W, 3) object-frame surface point
    normal: np.ndarray  # (H, W, 3) world-space face normal


def render_geometry(
    camera: Camera,
    instances: list[tuple[Mesh, np.ndarray, np.ndarray]],
) -> RenderBuffers:
    """Rasterize mesh instances (mesh, rotation, translation) into G-buffers."""
    h, w = camera.height, camera.width
    zbuf = np.full((h, w), np.inf)
    obj_id = np.full((h, w), -1, dtype=np.int32)
    obj_coords = np.zeros((h, w, 3))
    normal = np.zeros((h, w, 3))

    cam_r, cam_t = camera.R, camera.t
    for oid, (mesh, rot, trans) in enumerate(instances):
        world_v = mesh.transformed(rot, trans)
        cam_v = world_v @ cam_r.T + cam_t
        for face in mesh.faces:
            tri_cam = cam_v[face]
            if (tri_cam[:, 2] <= _ZNEAR).all():
                continue
            tri_attr = mesh.vertices[face]  # object-frame coords carried through clipping
            for clipped_cam, clipped_attr in _clip_near(tri_cam, tri_attr):
                _raster_triangle(
                    camera, zbuf, obj_id, obj_coords, normal,
                    clipped_cam, clipped_attr, oid,
                )

    depth_factor = _ray_norms(camera)
    depth = np.where(np.isfinite(zbuf), zbuf * depth_factor, 0.0)
    return RenderBuffers(depth=depth, obj_id=obj_id, obj_coords=obj_coords, normal=normal)


def _ray_norms(camera: Camera) -> np.ndarray:
    cols, rows = np.meshgrid(np.arange(camera.width), np.arange(camera.height))
    dx = (cols - camera.cx) / camera.fx
    dy = (rows - camera.cy) / camera.fy
    return np.sqrt(dx * dx + dy * dy + 1.0)


def _raster_triangle(camera, zbuf, obj_id, obj_coords, normal, tri_cam, tri_attr, oid):
    h, w = zbuf.shape
    z = tri_cam[:, 2]
    u = camera.fx * tri_cam[:, 0] / z + camera.cx
    v = camera.fy * tri_cam[:, 1] / z + camera.cy

    x0 = max(int(np.ceil(u.min())), 0)
    x1 = min(int(np.floor(u.max())), w - 1)
    y0 = max(int(np.ceil(v.min())), 0)
    y1 = min(int(np.floor(v.max())), h - 1)
    if x0 > x1 or y0 > y1:
        return
    area = (u[1] - u[0]) * (v[2] - v[0]) - (u[2] - u[0]) * (v[1] - v[0])
    if abs(area) < 1e-12:
        return

    px, py = np.meshgrid(np.arange(x0, x1 + 1), np.arange(y0, y1 + 1))
    w0 = (u[1] - px) * (v[2] - py) - (u[2] - px) * (v[1] - py)
    w1 = (u[2] - px) * (v[0] - py) - (u[0] - px) * (v[2] - py)
    w2 = area - w0 - w1
    b = np.stack([w0, w1, w2], axis=-1) / area
    inside = (b >= 0).all(axis=-1)
    if not inside.any():
        return

    inv_z = b @ (1.0 / z)
    z_pix = 1.0 / inv_z
    rows = py[inside]
    cols = px[inside]
    zp = z_pix[inside]
    closer = zp < zbuf[rows, cols]
    if not closer.any():
        return
    rows, cols, zp = rows[closer], cols[closer], zp[closer]
    bb = b[inside][closer]

    attr = (bb / z) @ tri_attr * zp[:, None]  # perspective-correct interpolation
    zbuf[rows, cols] = zp
    obj_id[rows, cols] = oid
    obj_coords[rows, cols] = attr
    n = np.cross(tri_cam[1] - tri_cam[0], tri_cam[2] - tri_cam[0])
    n_world = camera.R.T @ n  # camera-space normal back to world
    norm = np.linalg.norm(n_world)
    if norm > 0:
        normal[rows, cols] = n_world / norm
