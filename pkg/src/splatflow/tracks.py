"""Long-range 3D point trajectories with validity and lost-track bookkeeping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class TrackSet:
    """Per-query 3D trajectories over a time horizon.

    positions: (P, T, 3) world-space points.
    valid:     (P, T) bool, entry participates in evaluation.
    lost:      (P, T) bool, True from the timestamp a track lost its match onward;
               positions stay frozen at the last matched point.
    excluded:  (P,) bool, track flagged out of the evaluable set (FV filtering);
               flagged, never deleted.
    query_ids: (P,) int identifiers (e.g. flattened source pixel indices).
    """

    positions: np.ndarray
    valid: np.ndarray | None = None
    lost: np.ndarray | None = None
    excluded: np.ndarray | None = None
    query_ids: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 3 or self.positions.shape[-1] != 3:
            raise ValueError(f"positions must be (P, T, 3), got {self.positions.shape}")
        p, t, _ = self.positions.shape
        if self.valid is None:
            self.valid = np.ones((p, t), dtype=bool)
        if self.lost is None:
            self.lost = np.zeros((p, t), dtype=bool)
        if self.excluded is None:
            self.excluded = np.zeros(p, dtype=bool)
        if self.query_ids is None:
            self.query_ids = np.arange(p)
        self.valid = np.asarray(self.valid, dtype=bool)
        self.lost = np.asarray(self.lost, dtype=bool)
        self.excluded = np.asarray(self.excluded, dtype=bool)
        self.query_ids = np.asarray(self.query_ids)

    @property
    def num_points(self) -> int:
        return self.positions.shape[0]

    @property
    def horizon(self) -> int:
        return self.positions.shape[1]

    def check_frozen_after_loss(self, tol: float = 0.0) -> None:
        """Verify per-frame displacement is exactly zero once a track is lost."""
        pos, lost = self.positions, self.lost
        step = np.linalg.norm(pos[:, 1:] - pos[:, :-1], axis=-1)
        frozen = lost[:, 1:] & lost[:, :-1]
        if frozen.any() and step[frozen].max() > tol:
            raise ValueError("lost tracks must remain stationary")

    def save(self, path) -> None:
        np.savez(
            path,
            positions=self.positions,
            valid=self.valid,
            lost=self.lost,
            excluded=self.excluded,
            query_ids=self.query_ids,
        )

    @classmethod
    def load(cls, path) -> "TrackSet":
        with np.load(path) as z:
            return cls(
                positions=z["positions"],
                valid=z["valid"],
                lost=z["lost"],
                excluded=z["excluded"],
                query_ids=z["query_ids"],
            )

    def write_text(self, path) -> None:
        """Line-delimited records: query_id t x y z valid lost."""
        with open(path, "w") as fh:
            fh.write("# query_id t x y z valid lost\n")
            for i in range(self.num_points):
                qid = self.query_ids[i]
                for t in range(self.horizon):
                    x, y, z = self.positions[i, t]
                    fh.write(
                        f"{qid} {t} {x:.9g} {y:.9g} {z:.9g} "
                        f"{int(self.valid[i, t])} {int(self.lost[i, t])}\n"
                    )
