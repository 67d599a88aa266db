"""BEV-guided masking: choose masked grids among non-empty ones and split the cloud.

Sampling is reproducible across platforms. The raw 64-bit stream comes from
PCG64 seeded with the plan seed; grids are sorted lexicographically and the
first ``m`` slots of a Fisher-Yates shuffle (unbiased bounded draws by
rejection) are the masked set.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import GridIndex, Occupancy, PointCloud

_TWO64 = 1 << 64


class MaskError(ValueError):
    pass


@dataclass(frozen=True)
class MaskPlan:
    masked: frozenset
    visible: frozenset
    ratio: float
    seed: int

    def masked_sorted(self) -> list[GridIndex]:
        return sorted(self.masked)

    def visible_sorted(self) -> list[GridIndex]:
        return sorted(self.visible)

    @property
    def n_nonempty(self) -> int:
        return len(self.masked) + len(self.visible)


@dataclass
class CloudSplit:
    visible_points: PointCloud
    masked_points_by_grid: dict     # GridIndex -> PointCloud, input order kept

    @property
    def n_masked_points(self) -> int:
        return sum(len(c) for c in self.masked_points_by_grid.values())


class _RawStream:
    def __init__(self, seed: int):
        self._gen = np.random.PCG64(int(seed) % _TWO64)
        self._buf = []

    def next_u64(self) -> int:
        if not self._buf:
            self._buf = [int(v) for v in self._gen.random_raw(64)][::-1]
        return self._buf.pop()

    def below(self, n: int) -> int:
        """Uniform integer in ``[0, n)`` without modulo bias."""
        threshold = _TWO64 % n
        while True:
            r = self.next_u64()
            if r >= threshold:
                return r % n


def masked_count(n_nonempty: int, ratio: float) -> int:
    """``round(ratio * n)`` with halves rounded up, clamped to keep both sides non-empty."""
    m = int(np.floor(ratio * n_nonempty + 0.5))
    if n_nonempty >= 2:
        m = min(max(m, 1), n_nonempty - 1)
    return m


def plan_mask(occupancy, ratio: float = 0.7, seed: int = 0) -> MaskPlan:
    grids = sorted(occupancy.keys() if isinstance(occupancy, Occupancy) else occupancy)
    if not grids:
        raise MaskError("cannot mask a scene with no non-empty grids")
    if not 0.0 < ratio < 1.0:
        raise MaskError(f"mask ratio must lie in (0, 1), got {ratio}")
    n = len(grids)
    m = masked_count(n, ratio)
    stream = _RawStream(seed)
    order = list(range(n))
    for i in range(m):
        j = i + stream.below(n - i)
        order[i], order[j] = order[j], order[i]
    masked = frozenset(GridIndex(*grids[k]) for k in order[:m])
    visible = frozenset(GridIndex(*grids[k]) for k in order[m:])
    return MaskPlan(masked, visible, float(ratio), int(seed))


def split_cloud(cloud: PointCloud, occupancy: Occupancy, plan: MaskPlan) -> CloudSplit:
    for g in plan.masked | plan.visible:
        if g not in occupancy:
            raise MaskError(f"plan references grid {tuple(g)} absent from occupancy")
    if len(plan.masked) + len(plan.visible) != len(occupancy):
        raise MaskError("plan does not cover every non-empty grid")
    visible = visible_ordinals(occupancy, plan)
    masked = {g: cloud.subset(occupancy[g]) for g in plan.masked_sorted()}
    return CloudSplit(cloud.subset(visible), masked)


def visible_ordinals(occupancy: Occupancy, plan: MaskPlan) -> np.ndarray:
    """Ascending ordinals of every point in a visible grid."""
    parts = [occupancy[g] for g in plan.visible]
    if not parts:
        return np.zeros(0, dtype=np.int64)
    return np.sort(np.concatenate(parts)).astype(np.int64)
