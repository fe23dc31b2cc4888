"""Sparse 3D scene-flow storage: in-memory blocks and the DGSF binary format.

Scene flow is overwhelmingly zero (static background), so only moving pixels are
stored: flat pixel indices (u32, strictly increasing) plus 3 x f32 flow values.
Omitted pixels reconstruct to exactly zero.

File layout (little-endian):
    magic "DGSF" | version u32 | F u32 | H u32 | W u32
    then one block per ordered (source, target) frame pair, source-major:
    count u32 | indices u32[count] | values f32[count * 3]
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"DGSF"
VERSION = 1


@dataclass
class SparseFlowField:
    """Per (source, target) sparse flow blocks over an F-frame, HxW video."""

    frames: int
    height: int
    width: int
    blocks: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def put(self, source: int, target: int, indices: np.ndarray, values: np.ndarray) -> None:
        indices = np.asarray(indices, dtype=np.uint32).ravel()
        values = np.asarray(values, dtype=np.float32).reshape(-1, 3)
        if indices.shape[0] != values.shape[0]:
            raise ValueError("index / value count mismatch")
        if indices.size and (np.diff(indices.astype(np.int64)) <= 0).any():
            raise ValueError("indices must be strictly increasing")
        if indices.size and int(indices.max()) >= self.height * self.width:
            raise ValueError("index out of image bounds")
        self.blocks[(source, target)] = (indices, values)

    def put_dense(self, source: int, target: int, dense: np.ndarray) -> None:
        """Store only the nonzero pixels of a dense (H, W, 3) flow map."""
        dense = np.asarray(dense, dtype=np.float32)
        if dense.shape != (self.height, self.width, 3):
            raise ValueError(f"dense flow must be {(self.height, self.width, 3)}")
        moving = np.any(dense != 0.0, axis=-1).ravel()
        idx = np.nonzero(moving)[0]
        self.put(source, target, idx, dense.reshape(-1, 3)[idx])

    def dense(self, source: int, target: int) -> np.ndarray:
        """Exact dense reconstruction; omitted pixels are zero."""
        out = np.zeros((self.height * self.width, 3), dtype=np.float32)
        if (source, target) in self.blocks:
            idx, val = self.blocks[(source, target)]
            out[idx.astype(np.int64)] = val
        return out.reshape(self.height, self.width, 3)

    def serialized_size(self) -> int:
        size = 4 + 4 + 12  # magic, version, dims
        size += 4 * self.frames * self.frames  # per-block counts
        for idx, _ in self.blocks.values():
            size += idx.size * (4 + 12)
        return size

    def dense_equivalent_size(self) -> int:
        """Bytes a dense f32 field of the stored (source, target) blocks would take."""
        return len(self.blocks) * self.height * self.width * 3 * 4

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<IIII", VERSION, self.frames, self.height, self.width))
            empty_idx = np.empty(0, dtype=np.uint32)
            empty_val = np.empty((0, 3), dtype=np.float32)
            for s in range(self.frames):
                for t in range(self.frames):
                    idx, val = self.blocks.get((s, t), (empty_idx, empty_val))
                    fh.write(struct.pack("<I", idx.size))
                    fh.write(idx.astype("<u4").tobytes())
                    fh.write(val.astype("<f4").tobytes())

    @classmethod
    def load(cls, path) -> "SparseFlowField":
        with open(path, "rb") as fh:
            if fh.read(4) != MAGIC:
                raise ValueError("not a DGSF file")
            version, frames, height, width = struct.unpack("<IIII", fh.read(16))
            if version != VERSION:
                raise ValueError(f"unsupported DGSF version {version}")
            out = cls(frames=frames, height=height, width=width)
            for s in range(frames):
                for t in range(frames):
                    (count,) = struct.unpack("<I", fh.read(4))
                    if count == 0:
                        continue
                    idx = np.frombuffer(fh.read(4 * count), dtype="<u4").copy()
                    val = np.frombuffer(fh.read(12 * count), dtype="<f4").copy().reshape(-1, 3)
                    out.blocks[(s, t)] = (idx, val)
        return out


def sparse_roundtrip(dense_stack: dict[tuple[int, int], np.ndarray], frames: int,
                     height: int, width: int) -> tuple[SparseFlowField, dict]:
    """Encode dense flow maps, report sizes, and verify exact reconstruction."""
    sf = SparseFlowField(frames=frames, height=height, width=width)
    for (s, t), dense in dense_stack.items():
        sf.put_dense(s, t, dense)
    stats = {
        "serialized_bytes": sf.serialized_size(),
        "dense_bytes": sf.dense_equivalent_size(),
    }
    stats["ratio"] = stats["serialized_bytes"] / max(stats["dense_bytes"], 1)
    for (s, t), dense in dense_stack.items():
        if not np.array_equal(sf.dense(s, t), np.asarray(dense, dtype=np.float32)):
            raise AssertionError("sparse round-trip reconstruction is not exact")
    return sf, stats
