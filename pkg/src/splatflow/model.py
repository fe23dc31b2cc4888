"""Feed-forward predictor: spatio-temporal tokenizer, self-attention transformer with
weight normalization, and output heads producing per-pixel deformable Gaussians.

The input clip (N+1 posed frames) and optional reference frames are channel-wise
concatenated with their ray/timestamp encodings (3 rgb + 7 ray-time = 10 channels).
Clip frames are patchified into s x s x l cubes, one token per cube; reference
frames are patchified per-frame (s x s x 1) so their ordering is immaterial. One
set of Gaussians is predicted per keyframe slab; reference frames get none.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.parametrizations import weight_norm

from .cameras import Camera, plucker_encode
from .gaussians import KeyframeGaussians, canonicalize_flow


@dataclass
class ModelConfig:
    window_length: int = 24  # N; clip holds N+1 frames
    temporal_rate: int = 4  # l
    patch_size: int = 8  # s
    ref_count: int = 4  # K
    blocks: int = 4  # 24 at full scale
    width: int = 256
    heads: int = 8
    mlp_ratio: float = 4.0
    endpoint_keyframe: bool = True  # keyframes {0,l,...,N}; False drops the N slab
    near: float = 0.1
    far: float = 20.0
    scale_min: float = 1e-4
    scale_max: float = 1.0

    def validate(self) -> None:
        if self.window_length < 1 or self.temporal_rate < 1:
            raise ValueError("window length and temporal rate must be >= 1")
        if self.window_length % self.temporal_rate != 0:
            raise ValueError(
                f"window length {self.window_length} not divisible by rate {self.temporal_rate}"
            )
        if self.width <= 0 or self.blocks < 1 or self.heads < 1:
            raise ValueError("width, blocks and heads must be positive")
        if self.width % self.heads != 0:
            raise ValueError("width must be divisible by the head count")
        if self.patch_size < 1 or self.ref_count < 0:
            raise ValueError("invalid patch size or reference count")

    @property
    def keyframe_indices(self) -> list[int]:
        idx = list(range(0, self.window_length + 1, self.temporal_rate))
        return idx if self.endpoint_keyframe else idx[:-1]

    @property
    def flow_steps(self) -> int:
        return self.window_length + 1

    @property
    def out_channels(self) -> int:
        # depth 1 + rgb 3 + quat 4 + scale 3 + opacity 1 + flow 3*(N+1)
        return 12 + 3 * self.flow_steps


IN_CHANNELS = 10  # rgb (3) + ray direction (3) + ray moment (3) + timestamp (1)


@dataclass
class FrameStack:
    """Posed frames with their ray-time encodings, ready for tokenization."""

    images: torch.Tensor  # (T, H, W, 3) in [0, 1]
    ray_time: torch.Tensor  # (T, H, W, 7)
    origins: torch.Tensor  # (T, 3)
    directions: torch.Tensor  # (T, H, W, 3)
    cameras: list[Camera]

    @classmethod
    def build(
        cls,
        images: np.ndarray | torch.Tensor,
        cameras: list[Camera],
        frame_indices: list[int],
        window_length: int,
    ) -> "FrameStack":
        """Encode frames; indices outside [0, N] get clamped timestamps."""
        imgs = torch.as_tensor(np.asarray(images), dtype=torch.float32)
        grids, origins, dirs = [], [], []
        for cam, idx in zip(cameras, frame_indices):
            rm = plucker_encode(cam, int(np.clip(idx, 0, window_length)), window_length)
            grids.append(torch.as_tensor(rm.grid, dtype=torch.float32))
            origins.append(torch.as_tensor(rm.origin, dtype=torch.float32))
            dirs.append(torch.as_tensor(rm.directions, dtype=torch.float32))
        return cls(
            images=imgs,
            ray_time=torch.stack(grids),
            origins=torch.stack(origins),
            directions=torch.stack(dirs),
            cameras=list(cameras),
        )

    @property
    def channels(self) -> torch.Tensor:
        return torch.cat([self.images, self.ray_time], dim=-1)


@dataclass
class TokenGrid:
    tokens: torch.Tensor  # (T_t * T_h * T_w, width)
    dims: tuple[int, int, int]  # (T_t, T_h, T_w)

    @property
    def count(self) -> int:
        return self.tokens.shape[0]


def partition_cubes(x: torch.Tensor, patch: int, rate: int) -> torch.Tensor:
    """(T, H, W, C) -> (T/rate, H/s, W/s, rate*s*s*C) non-overlapping cube flattening.

    The inverse of merge_cubes; together they are a lossless reshape.
    """
    t, h, w, c = x.shape
    if t % rate or h % patch or w % patch:
        raise ValueError(
            f"stack {t}x{h}x{w} not divisible by cube {rate}x{patch}x{patch}"
        )
    x = x.reshape(t // rate, rate, h // patch, patch, w // patch, patch, c)
    x = x.permute(0, 2, 4, 1, 3, 5, 6)
    return x.reshape(t // rate, h // patch, w // patch, rate * patch * patch * c)


def merge_cubes(x: torch.Tensor, patch: int, rate: int, channels: int) -> torch.Tensor:
    """Inverse of partition_cubes."""
    tt, th, tw, d = x.shape
    if d != rate * patch * patch * channels:
        raise ValueError("cube dimension mismatch")
    x = x.reshape(tt, th, tw, rate, patch, patch, channels)
    x = x.permute(0, 3, 1, 4, 2, 5, 6)
    return x.reshape(tt * rate, th * patch, tw * patch, channels)


def token_count(frames: int, height: int, width: int, patch: int, rate: int) -> int:
    if frames % rate or height % patch or width % patch:
        raise ValueError("dimensions not divisible by the cube size")
    return (frames // rate) * (height // patch) * (width // patch)


class Block(nn.Module):
    """Pre-LN transformer block with weight-normalized projections."""

    def __init__(self, width: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.heads = heads
        self.ln1 = nn.LayerNorm(width)
        self.qkv = weight_norm(nn.Linear(width, 3 * width))
        self.proj = weight_norm(nn.Linear(width, width))
        self.ln2 = nn.LayerNorm(width)
        hidden = int(width * mlp_ratio)
        self.fc1 = weight_norm(nn.Linear(width, hidden))
        self.fc2 = weight_norm(nn.Linear(hidden, width))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        n, d = x.shape
        qkv = self.qkv(self.ln1(x)).reshape(n, 3, self.heads, d // self.heads)
        q, k, v = qkv.permute(1, 2, 0, 3).unbind(0)  # (heads, n, d/h)
        attn = F.scaled_dot_product_attention(q, k, v)
        x = x + self.proj(attn.permute(1, 0, 2).reshape(n, d))
        x = x + self.fc2(F.gelu(self.fc1(self.ln2(x))))
        return x


class GaussianPredictor(nn.Module):
    """Predicts one set of pixel-aligned deformable Gaussians per keyframe."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        s, l, d = config.patch_size, config.temporal_rate, config.width
        self.clip_embed = weight_norm(nn.Linear(s * s * l * IN_CHANNELS, d))
        self.ref_embed = weight_norm(nn.Linear(s * s * IN_CHANNELS, d))
        self.blocks = nn.ModuleList(
            [Block(d, config.heads, config.mlp_ratio) for _ in range(config.blocks)]
        )
        self.ln_out = nn.LayerNorm(d)
        self.head_hidden = weight_norm(nn.Linear(d, d))
        self.head_out = weight_norm(nn.Linear(d, s * s * config.out_channels))
        self._init_head()

    def _init_head(self) -> None:
        # small output weights + channel biases put the untrained model in a sane
        # regime: depth ~0.5 units, opacity ~0.12, near-pixel scales, identity quats
        with torch.no_grad():
            w = self.head_out.parametrizations.weight.original1
            w.normal_(0.0, 1e-2)
            bias = torch.zeros(self.head_out.out_features)
            c = self.config.out_channels
            bias_img = bias.reshape(-1, c)
            bias_img[:, 0] = -0.71  # depth: near + softplus(-0.71) ~= 0.5
            bias_img[:, 4] = 1.0  # quat w
            bias_img[:, 8:11] = math.log(0.01)  # scale
            bias_img[:, 11] = -2.0  # opacity
            self.head_out.bias.copy_(bias)

    def tokenize(self, stack: FrameStack, reference: bool = False) -> TokenGrid:
        """Patchify a frame stack into transformer tokens (one linear per cube)."""
        s = self.config.patch_size
        rate = 1 if reference else self.config.temporal_rate
        cubes = partition_cubes(stack.channels, s, rate)
        tt, th, tw, _ = cubes.shape
        embed = self.ref_embed if reference else self.clip_embed
        return TokenGrid(tokens=embed(cubes.reshape(tt * th * tw, -1)), dims=(tt, th, tw))

    def forward(
        self, clip: FrameStack, refs: FrameStack | None = None
    ) -> list[KeyframeGaussians]:
        cfg = self.config
        n, l, s = cfg.window_length, cfg.temporal_rate, cfg.patch_size
        t, h, w, _ = clip.images.shape
        if t != n + 1:
            raise ValueError(f"clip must hold {n + 1} frames, got {t}")
        if refs is not None and refs.images.shape[0] > 0:
            if refs.images.shape[1:3] != clip.images.shape[1:3]:
                raise ValueError("reference resolution must match the clip")
            if refs.images.shape[0] > cfg.ref_count:
                raise ValueError(
                    f"at most {cfg.ref_count} reference frames allowed, got {refs.images.shape[0]}"
                )

        # pad the clip to a multiple of l by repeating the last frame; each keyframe
        # x*l is then the first frame of its temporal slab
        x = clip.channels
        pad = (-x.shape[0]) % l
        if pad:
            x = torch.cat([x, x[-1:].expand(pad, -1, -1, -1)], dim=0)
        cubes = partition_cubes(x, s, l)
        tt, th, tw, _ = cubes.shape
        clip_tokens = self.clip_embed(cubes.reshape(tt * th * tw, -1))

        seq = clip_tokens
        if refs is not None and refs.images.shape[0] > 0:
            ref_cubes = partition_cubes(refs.channels, s, 1)
            rt, rh, rw, _ = ref_cubes.shape
            seq = torch.cat([seq, self.ref_embed(ref_cubes.reshape(rt * rh * rw, -1))], dim=0)

        for block in self.blocks:
            seq = block(seq)
        out_tokens = self.ln_out(seq[: clip_tokens.shape[0]])
        raw = self.head_out(F.gelu(self.head_hidden(out_tokens)))
        # unpatchify each temporal slab back to a pixel-aligned parameter image
        raw = raw.reshape(tt, th, tw, s * s * cfg.out_channels)
        maps = merge_cubes(raw.reshape(tt * 1, th, tw, -1), s, 1, cfg.out_channels)
        maps = maps.reshape(tt, h, w, cfg.out_channels)

        keyframes = []
        for slab, kf in enumerate(cfg.keyframe_indices):
            m = maps[slab]
            depth = (cfg.near + F.softplus(m[..., 0])).clamp(max=cfg.far)
            rgb = torch.sigmoid(m[..., 1:4])
            quat = F.normalize(m[..., 4:8], dim=-1)
            scale = torch.exp(m[..., 8:11]).clamp(min=cfg.scale_min, max=cfg.scale_max)
            opacity = torch.sigmoid(m[..., 11])
            flow = canonicalize_flow(
                m[..., 12:].reshape(h, w, cfg.flow_steps, 3), kf
            )
            keyframes.append(
                KeyframeGaussians(
                    timestamp=kf,
                    depth=depth,
                    rgb=rgb,
                    rotation=quat,
                    scale=scale,
                    opacity=opacity,
                    flow=flow,
                    origin=clip.origins[kf],
                    directions=clip.directions[kf],
                )
            )
        return keyframes


def parameter_report(config: ModelConfig, height: int = 64, width: int = 64) -> dict:
    """Closed-form parameter count and token budget; no weights are allocated."""
    config.validate()
    if height % config.patch_size or width % config.patch_size:
        raise ValueError("resolution not divisible by the patch size")
    s, l, d = config.patch_size, config.temporal_rate, config.width
    r = config.mlp_ratio

    def linear(nin: int, nout: int) -> int:
        return nin * nout + nout + nout  # weight + bias + weight-norm gain

    per_block = (
        2 * d  # ln1
        + linear(d, 3 * d)  # qkv
        + linear(d, d)  # attn proj
        + 2 * d  # ln2
        + linear(d, int(d * r))
        + linear(int(d * r), d)
    )
    params = (
        linear(s * s * l * IN_CHANNELS, d)
        + linear(s * s * IN_CHANNELS, d)
        + config.blocks * per_block
        + 2 * d  # output layer norm
        + linear(d, d)
        + linear(d, s * s * config.out_channels)
    )

    spatial = (height // s) * (width // s)
    clip_frames = config.window_length + 1
    padded = clip_frames + (-clip_frames) % l
    report = {
        "parameters": params,
        "clip_tokens": (padded // l) * spatial,
        "ref_tokens": config.ref_count * spatial,
        "keyframes": len(config.keyframe_indices),
        "out_channels_per_pixel": config.out_channels,
    }
    report["total_tokens"] = report["clip_tokens"] + report["ref_tokens"]
    return report


def save_checkpoint(path, model: GaussianPredictor, extra: dict | None = None) -> None:
    """Checkpoint = config header + named parameter blobs (+ optional metadata)."""
    torch.save(
        {"config": asdict(model.config), "state": model.state_dict(), "extra": extra or {}},
        path,
    )


def load_checkpoint(path) -> tuple[GaussianPredictor, dict]:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    config = ModelConfig(**blob["config"])
    model = GaussianPredictor(config)
    model.load_state_dict(blob["state"])
    return model, blob.get("extra", {})


def save_model_config(path, config: ModelConfig) -> None:
    import yaml

    with open(path, "w") as fh:
        yaml.safe_dump(asdict(config), fh, sort_keys=False)


def load_model_config(path) -> ModelConfig:
    import yaml

    with open(path) as fh:
        return ModelConfig(**yaml.safe_load(fh))
