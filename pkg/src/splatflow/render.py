"""Differentiable rasterization of world-space Gaussians into RGB, depth and alpha.

Exact per-pixel evaluation: every Gaussian is splatted onto all pixels inside its
screen-space cutoff box (cutoff_sigma standard deviations, rounded outward), then
pixels composite front-to-back in depth order. No tiling, no approximation beyond
the cutoff; gradients flow to every Gaussian attribute through plain autograd ops.

Several views of the same size render in one batched pass (shared pair machinery,
one sort, one scatter), which is what the training loop uses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .cameras import Camera
from .gaussians import WarpedSet

_ZNEAR = 1e-3
_ALPHA_MAX = 0.999
_LOWPASS = 0.3  # screen-space dilation, keeps sub-pixel Gaussians visible


@dataclass
class RenderRequest:
    """Target camera, timestamp and background color for one rasterization."""

    camera: Camera
    timestamp: int = 0
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.timestamp < 0:
            raise ValueError("target timestamp must be non-negative")


@dataclass
class RenderOutput:
    rgb: torch.Tensor  # (H, W, 3) in [0, 1]
    depth: torch.Tensor  # (H, W) alpha-weighted expected ray distance; 0 where alpha == 0
    alpha: torch.Tensor  # (H, W) in [0, 1]


def quat_to_rotmat(q: torch.Tensor) -> torch.Tensor:
    """Unit quaternion (w, x, y, z) batch to rotation matrices, (..., 3, 3)."""
    q = q / q.norm(dim=-1, keepdim=True).clamp(min=1e-12)
    w, x, y, z = q.unbind(-1)
    row0 = torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1)
    row1 = torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1)
    row2 = torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1)
    return torch.stack([row0, row1, row2], dim=-2)


def rasterize_views(
    warped: WarpedSet,
    requests: list[RenderRequest],
    cutoff_sigma: float = 3.0,
    max_radius: float | None = None,
) -> list[RenderOutput]:
    """Rasterize one Gaussian set into several same-sized views in a single pass."""
    if not requests:
        return []
    cams = [r.camera for r in requests]
    h, w = cams[0].height, cams[0].width
    for c in cams:
        c.validate()
        if (c.height, c.width) != (h, w):
            raise ValueError("batched rasterization requires equal view sizes")

    nviews = len(requests)
    m = len(warped)
    dtype = warped.centers.dtype if m else torch.float32
    bgs = torch.tensor([r.background for r in requests], dtype=dtype)  # (V, 3)

    def _empty() -> list[RenderOutput]:
        zero = torch.zeros(h, w, dtype=dtype)
        return [
            RenderOutput(rgb=torch.zeros(h, w, 3, dtype=dtype) + bgs[v], depth=zero.clone(),
                         alpha=zero.clone())
            for v in range(nviews)
        ]

    if m == 0:
        return _empty()

    for t in (warped.centers, warped.rotation, warped.scale, warped.rgb, warped.opacity):
        if not torch.isfinite(t).all():
            raise ValueError("Gaussian parameters contain NaN or Inf")

    rot = torch.stack([torch.as_tensor(c.R, dtype=dtype) for c in cams])  # (V, 3, 3)
    trans = torch.stack([torch.as_tensor(c.t, dtype=dtype) for c in cams])  # (V, 3)
    fx = torch.tensor([c.fx for c in cams], dtype=dtype)[:, None]
    fy = torch.tensor([c.fy for c in cams], dtype=dtype)[:, None]
    cx = torch.tensor([c.cx for c in cams], dtype=dtype)[:, None]
    cy = torch.tensor([c.cy for c in cams], dtype=dtype)[:, None]

    mu_cam = torch.einsum("vij,mj->vmi", rot, warped.centers) + trans[:, None, :]  # (V, M, 3)
    z_raw = mu_cam[..., 2]
    z = z_raw.clamp(min=_ZNEAR)  # behind-camera rows are culled below; keep math finite
    u = fx * mu_cam[..., 0] / z + cx
    v = fy * mu_cam[..., 1] / z + cy
    ray_dist = mu_cam.norm(dim=-1)

    # 3D covariance, shared across views
    rm = quat_to_rotmat(warped.rotation)  # (M, 3, 3)
    cov3 = rm @ torch.diag_embed(warped.scale * warped.scale) @ rm.transpose(-1, -2)

    # local affine projection T = J @ R_view, rows expanded to avoid a (V, M) bmm
    zinv = 1.0 / z
    r0 = rot[:, None, 0, :]  # (V, 1, 3)
    r1 = rot[:, None, 1, :]
    r2 = rot[:, None, 2, :]
    t0 = (fx * zinv)[..., None] * r0 - (fx * mu_cam[..., 0] * zinv * zinv)[..., None] * r2
    t1 = (fy * zinv)[..., None] * r1 - (fy * mu_cam[..., 1] * zinv * zinv)[..., None] * r2
    # cov2 entries via quadratic forms t_i^T cov3 t_j
    c0 = torch.einsum("vmi,mij->vmj", t0, cov3)
    a = (c0 * t0).sum(-1) + _LOWPASS
    b = (c0 * t1).sum(-1)
    c = (torch.einsum("vmi,mij->vmj", t1, cov3) * t1).sum(-1) + _LOWPASS

    det = (a * c - b * b).clamp(min=1e-12)
    ia = c / det
    ib = -b / det
    ic = a / det
    mid = 0.5 * (a + c)
    lam_max = mid + torch.sqrt((mid * mid - det).clamp(min=0.0))
    radius = cutoff_sigma * torch.sqrt(lam_max)
    if max_radius is not None:
        radius = radius.clamp(max=max_radius)

    with torch.no_grad():
        x0 = torch.ceil(u - radius)
        x1 = torch.floor(u + radius)
        y0 = torch.ceil(v - radius)
        y1 = torch.floor(v + radius)
        visible = (z_raw > _ZNEAR) & (x1 >= 0) & (x0 <= w - 1) & (y1 >= 0) & (y0 <= h - 1)
        x0 = x0.clamp(0, w - 1).long().reshape(-1)
        x1 = x1.clamp(0, w - 1).long().reshape(-1)
        y0 = y0.clamp(0, h - 1).long().reshape(-1)
        y1 = y1.clamp(0, h - 1).long().reshape(-1)
        counts = torch.where(
            visible.reshape(-1), (x1 - x0 + 1) * (y1 - y0 + 1), torch.zeros_like(x0)
        )  # (V*M,)
        total = int(counts.sum())
        if total == 0:
            return _empty()

        offsets = torch.cumsum(counts, 0) - counts
        vg = torch.repeat_interleave(torch.arange(counts.numel()), counts)  # view*M + gaussian
        k = torch.arange(total) - offsets.index_select(0, vg)
        bwg = (x1 - x0 + 1).index_select(0, vg)
        px = x0.index_select(0, vg) + k % bwg
        py = y0.index_select(0, vg) + k // bwg
        pix = (vg // m) * (h * w) + py * w + px  # view-offset pixel id

        # one sort on a composite key: pixel-major, global depth rank within pixel
        z_order = torch.argsort(z_raw.reshape(-1))
        z_rank = torch.empty_like(z_order)
        z_rank[z_order] = torch.arange(z_order.numel())
        key = pix * counts.numel() + z_rank.index_select(0, vg)
        perm = torch.argsort(key)
        vg_s = vg.index_select(0, perm)
        pix_s = pix.index_select(0, perm)
        px_s = px.index_select(0, perm).to(dtype)
        py_s = py.index_select(0, perm).to(dtype)
        seg_start = torch.ones_like(pix_s, dtype=torch.bool)
        seg_start[1:] = pix_s[1:] != pix_s[:-1]
        starts = seg_start.nonzero(as_tuple=True)[0]
        seg_len = torch.diff(starts, append=torch.tensor([pix_s.numel()]))
        start_idx = torch.repeat_interleave(starts, seg_len)

    # per-scalar gathers in sorted pair order; backward is index_add into (V*M,) buffers
    def g1(t: torch.Tensor) -> torch.Tensor:
        return t.reshape(-1).index_select(0, vg_s)

    du = px_s - g1(u)
    dv = py_s - g1(v)
    power = -0.5 * (g1(ia) * du * du + 2.0 * g1(ib) * du * dv + g1(ic) * dv * dv)
    opac_g = warped.opacity[None].expand(nviews, m)
    alpha = (g1(opac_g) * torch.exp(power)).clamp(max=_ALPHA_MAX)

    log_t = torch.log1p(-alpha)
    excl = torch.cumsum(log_t, 0) - log_t  # exclusive global prefix
    transmit = torch.exp(excl - excl.index_select(0, start_idx))
    weight = transmit * alpha

    rgb_pairs = warped.rgb.index_select(0, vg_s % m)
    src = torch.cat(
        [weight[:, None] * rgb_pairs, weight[:, None], (weight * g1(ray_dist))[:, None]], dim=1
    )
    acc = torch.zeros(nviews * h * w, 5, dtype=dtype).index_add(0, pix_s, src)

    acc_rgb = acc[:, 0:3].reshape(nviews, h, w, 3)
    acc_alpha = acc[:, 3].reshape(nviews, h, w)
    acc_depth = acc[:, 4].reshape(nviews, h, w)
    outs = []
    for vi in range(nviews):
        al = acc_alpha[vi]
        rgb = acc_rgb[vi] + (1.0 - al)[..., None] * bgs[vi]
        depth = torch.where(al > 0, acc_depth[vi] / al.clamp(min=1e-12), acc_depth[vi])
        outs.append(RenderOutput(rgb=rgb, depth=depth, alpha=al))
    return outs


def rasterize(
    warped: WarpedSet,
    request: RenderRequest,
    cutoff_sigma: float = 3.0,
    max_radius: float | None = None,
) -> RenderOutput:
    """Alpha-composite a warped Gaussian set into a single requested view."""
    return rasterize_views(warped, [request], cutoff_sigma, max_radius)[0]


def _image_loss(out: RenderOutput, target: torch.Tensor) -> torch.Tensor:
    return ((out.rgb - target) ** 2).mean()


_FD_FAMILIES = ("centers", "rgb", "opacity", "scale")


def gradient_check(
    warped: WarpedSet,
    request: RenderRequest,
    fd_step: float = 1e-3,
    return_details: bool = False,
):
    """Max relative error between autograd and central finite-difference gradients.

    Runs in float64 on a scalar image loss against a fixed pseudorandom target.
    Relative error is evaluated only on entries whose magnitude is significant
    relative to the family's largest gradient (the rest would be ratios of noise).
    """
    if len(warped) > 16:
        raise ValueError("gradient_check is intended for scenes of <= 16 Gaussians")
    cam = request.camera
    if cam.height > 32 or cam.width > 32:
        raise ValueError("gradient_check is intended for images of <= 32x32")

    params = {
        "centers": warped.centers.detach().double().clone().requires_grad_(True),
        "rgb": warped.rgb.detach().double().clone().requires_grad_(True),
        "opacity": warped.opacity.detach().double().clone().requires_grad_(True),
        "scale": warped.scale.detach().double().clone().requires_grad_(True),
    }
    quat = warped.rotation.detach().double()

    gen = torch.Generator().manual_seed(20240 + cam.height * 31 + len(warped))
    target = torch.rand(cam.height, cam.width, 3, generator=gen, dtype=torch.float64)

    def render_loss(tensors: dict[str, torch.Tensor]) -> torch.Tensor:
        ws = WarpedSet(
            centers=tensors["centers"], rotation=quat, scale=tensors["scale"],
            rgb=tensors["rgb"], opacity=tensors["opacity"], timestamp=warped.timestamp,
        )
        return _image_loss(rasterize(ws, request), target)

    loss = render_loss(params)
    grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    analytic = {
        name: (g if g is not None else torch.zeros_like(p))
        for (name, p), g in zip(params.items(), grads)
    }

    details = {}
    worst = 0.0
    for name in _FD_FAMILIES:
        base = params[name].detach().clone()
        fd = torch.zeros_like(base)
        flat = base.reshape(-1)
        fd_flat = fd.reshape(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            for sign in (+1.0, -1.0):
                flat[i] = orig + sign * fd_step
                probe = {k: (base if k == name else params[k].detach()) for k in params}
                val = render_loss(probe).item()
                fd_flat[i] += sign * val / (2.0 * fd_step)
            flat[i] = orig
        an = analytic[name]
        mag = torch.maximum(an.abs(), fd.abs())
        floor = max(1e-4 * float(mag.max()), 1e-9)
        significant = mag > floor
        rel = torch.zeros_like(mag)
        rel[significant] = (an - fd).abs()[significant] / mag[significant]
        err = float(rel.max()) if significant.any() else 0.0
        details[name] = err
        worst = max(worst, err)

    if return_details:
        return worst, details
    return worst
