"""Interaction graph construction: occupancy-grid gating around the ego
vehicle and RBF-weighted adjacency over the surviving nodes."""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

# 200 ft x 35 ft, stored in meters; positions are meters throughout
GRID_LENGTH_M = 60.96
GRID_WIDTH_M = 10.668


@dataclass(frozen=True)
class OccupancyGrid:
    """Rectangle centered on the ego: length runs longitudinal (y), width
    lateral (x)."""

    length: float = GRID_LENGTH_M
    width: float = GRID_WIDTH_M

    def __post_init__(self):
        if self.length <= 0 or self.width <= 0:
            raise DataError(f"grid extents must be positive, got "
                            f"{self.length} x {self.width}")

    @property
    def delta(self) -> float:
        """RBF bandwidth: distance from grid center to a corner."""
        return math.hypot(self.length / 2.0, self.width / 2.0)

    def contains(self, dx: float, dy: float) -> bool:
        return abs(dy) <= self.length / 2.0 and abs(dx) <= self.width / 2.0


@dataclass
class AdjacencyMatrix:
    matrix: np.ndarray          # [n, n], symmetric, entries in [0, 1]
    ids: tuple                  # node index -> vehicle id
    delta: float
    index: dict = field(init=False)

    def __post_init__(self):
        self.index = {vid: i for i, vid in enumerate(self.ids)}


def select_grid_nodes(scene, reference_time: int, grid: OccupancyGrid | None = None):
    """Ids of vehicles inside the grid around the ego at reference_time.

    The ego is always first; neighbors follow in ascending id order.
    """
    if grid is None:
        grid = OccupancyGrid()
    ego_pos = scene.history[scene.ego][reference_time, :2]
    kept = [scene.ego]
    for vid in sorted(scene.history):
        if vid == scene.ego:
            continue
        pos = scene.history[vid][reference_time, :2]
        if grid.contains(pos[0] - ego_pos[0], pos[1] - ego_pos[1]):
            kept.append(vid)
    return kept


def build_adjacency(ids, positions, grid: OccupancyGrid | None = None) -> AdjacencyMatrix:
    """RBF adjacency A_ij = exp(-dist^2 / delta^2) over grid-gated nodes.

    positions: [n, 2] meters, row i for ids[i].  Each unordered pair is
    computed once so the matrix is symmetric to the bit.
    """
    if grid is None:
        grid = OccupancyGrid()
    ids = tuple(ids)
    if len(set(ids)) != len(ids):
        raise DataError(f"duplicate node ids in {ids}")
    positions = np.asarray(positions, dtype=np.float64)
    if positions.shape != (len(ids), 2):
        raise DataError(f"expected positions [{len(ids)}, 2], got "
                        f"{positions.shape}")
    delta = grid.delta
    n = len(ids)
    a = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            d2 = float(np.sum((positions[i] - positions[j]) ** 2))
            w = math.exp(-d2 / (delta * delta))
            a[i, j] = w
            a[j, i] = w
    return AdjacencyMatrix(matrix=a, ids=ids, delta=delta)
