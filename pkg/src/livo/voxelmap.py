"""Hash-grid world map with bounded cells and per-update visit tracking.

Cells are preallocated arrays so registration and rendering can gather
neighbourhoods without building python objects; MapPoint is a lightweight
handle into its cell.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

VoxelIndex = tuple[int, int, int]


class VoxelCell:
    """Fixed-capacity point storage for one voxel."""

    __slots__ = ("positions", "colors", "weights", "stamps", "seqs", "rendered", "n")

    def __init__(self, capacity: int):
        self.positions = np.empty((capacity, 3))
        self.colors = np.zeros((capacity, 3))
        self.weights = np.zeros(capacity)
        self.stamps = np.empty(capacity)
        self.seqs = np.empty(capacity, dtype=np.int64)
        self.rendered = np.zeros(capacity, dtype=bool)
        self.n = 0

    @property
    def capacity(self) -> int:
        return len(self.weights)

    def points(self) -> np.ndarray:
        return self.positions[:self.n]


@dataclass(frozen=True)
class MapPoint:
    """Handle to one stored point; attribute reads go through to the cell."""

    cell: VoxelCell
    idx: int

    @property
    def position(self) -> np.ndarray:
        return self.cell.positions[self.idx]

    @property
    def color(self) -> np.ndarray:
        return self.cell.colors[self.idx]

    @property
    def color_weight(self) -> float:
        return float(self.cell.weights[self.idx])

    @property
    def insert_stamp(self) -> float:
        return float(self.cell.stamps[self.idx])

    @property
    def rendered(self) -> bool:
        return bool(self.cell.rendered[self.idx])

    @property
    def seq(self) -> int:
        return int(self.cell.seqs[self.idx])


# offsets of the 27-cell neighbourhood, precomputed once
_NEIGHBOR_OFFSETS = [(dx, dy, dz)
                     for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)]


@dataclass(frozen=True)
class VisitedView:
    """Concatenated storage of the recently visited cells.

    ``blocks`` maps each contributing cell to its [lo, hi) row range so
    array-level edits can be scattered back with plain slice writes.
    """

    blocks: list[tuple[VoxelCell, int, int]]
    positions: np.ndarray
    colors: np.ndarray
    weights: np.ndarray
    rendered: np.ndarray
    seqs: np.ndarray


class VoxelMap:
    """Sparse voxel hash map of world points.

    Each cell holds at most ``capacity`` points and rejects inserts closer
    than ``min_point_spacing`` to a stored point of the same cell.
    ``recently_visited`` lists the voxel indices touched (looked up or
    inserted into) by the latest ``update`` call.

    ``plane_cache`` is scratch space for consumers that fit per-cell surface
    models over 27-cell neighbourhoods: entries whose neighbourhood gained a
    point are dropped on update, so a cached fit is always current.
    """

    def __init__(self, voxel_size: float = 0.5, capacity: int = 20,
                 min_point_spacing: float = 0.1):
        if voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        self.voxel_size = voxel_size
        self.capacity = capacity
        self.min_point_spacing = min_point_spacing
        self.cells: dict[VoxelIndex, VoxelCell] = {}
        self.recently_visited: list[VoxelIndex] = []
        self.plane_cache: dict[VoxelIndex, object] = {}
        self._seq = 0

    def __len__(self) -> int:
        return sum(c.n for c in self.cells.values())

    def voxel_index(self, p: np.ndarray) -> VoxelIndex:
        i = np.floor(np.asarray(p, dtype=float) / self.voxel_size).astype(np.int64)
        return (int(i[0]), int(i[1]), int(i[2]))

    def voxel_indices(self, points: np.ndarray) -> np.ndarray:
        return np.floor(np.asarray(points, dtype=float) / self.voxel_size).astype(np.int64)

    def update(self, points: np.ndarray, stamp: float) -> None:
        """Insert world points, replacing the recently-visited voxel list."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        visited: dict[VoxelIndex, None] = {}  # insertion-ordered set
        inserted: set[VoxelIndex] = set()
        if points.size:
            indices = self.voxel_indices(points)
            min_d2 = self.min_point_spacing * self.min_point_spacing
            for p, ijk in zip(points, indices):
                key = (int(ijk[0]), int(ijk[1]), int(ijk[2]))
                visited[key] = None
                cell = self.cells.get(key)
                if cell is None:
                    cell = VoxelCell(self.capacity)
                    self.cells[key] = cell
                if cell.n >= self.capacity:
                    continue
                if cell.n:
                    d2 = np.sum((cell.positions[:cell.n] - p) ** 2, axis=1)
                    if float(d2.min()) < min_d2:
                        continue
                i = cell.n
                cell.positions[i] = p
                cell.stamps[i] = stamp
                cell.seqs[i] = self._seq
                self._seq += 1
                cell.n = i + 1
                inserted.add(key)
        self.recently_visited = list(visited)
        if inserted and self.plane_cache:
            pop = self.plane_cache.pop
            for x, y, z in inserted:
                for dx, dy, dz in _NEIGHBOR_OFFSETS:
                    pop((x + dx, y + dy, z + dz), None)

    def neighbor_points(self, index: VoxelIndex) -> np.ndarray:
        """All stored points in the 27-cell neighbourhood of ``index``."""
        chunks = []
        x, y, z = index
        for dx, dy, dz in _NEIGHBOR_OFFSETS:
            cell = self.cells.get((x + dx, y + dy, z + dz))
            if cell is not None and cell.n:
                chunks.append(cell.positions[:cell.n])
        if not chunks:
            return np.empty((0, 3))
        return np.concatenate(chunks, axis=0)

    def newest_point(self, index: VoxelIndex) -> MapPoint | None:
        """The most recently inserted point of a cell (stamp, then order)."""
        cell = self.cells.get(index)
        if cell is None or cell.n == 0:
            return None
        stamps = cell.stamps[:cell.n]
        best = np.flatnonzero(stamps == stamps.max())
        idx = int(best[np.argmax(cell.seqs[best])])
        return MapPoint(cell, idx)

    def visited_points(self) -> list[MapPoint]:
        """Handles for every point stored in the recently visited voxels."""
        out: list[MapPoint] = []
        for key in self.recently_visited:
            cell = self.cells.get(key)
            if cell is None:
                continue
            out.extend(MapPoint(cell, i) for i in range(cell.n))
        return out

    def visited_blocks(self) -> VisitedView:
        """Array snapshot of visited_points(), in the same point order."""
        blocks: list[tuple[VoxelCell, int, int]] = []
        ps, cs, ws, rs, qs = [], [], [], [], []
        lo = 0
        for key in self.recently_visited:
            cell = self.cells.get(key)
            if cell is None or cell.n == 0:
                continue
            n = cell.n
            blocks.append((cell, lo, lo + n))
            ps.append(cell.positions[:n])
            cs.append(cell.colors[:n])
            ws.append(cell.weights[:n])
            rs.append(cell.rendered[:n])
            qs.append(cell.seqs[:n])
            lo += n
        if not blocks:
            return VisitedView(blocks, np.empty((0, 3)), np.empty((0, 3)),
                               np.empty(0), np.empty(0, dtype=bool),
                               np.empty(0, dtype=np.int64))
        return VisitedView(blocks, np.concatenate(ps), np.concatenate(cs),
                           np.concatenate(ws), np.concatenate(rs),
                           np.concatenate(qs))

    def all_points(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Dense arrays (positions, colors, weights, rendered) over the map."""
        ps, cs, ws, rs = [], [], [], []
        for cell in self.cells.values():
            if cell.n:
                ps.append(cell.positions[:cell.n])
                cs.append(cell.colors[:cell.n])
                ws.append(cell.weights[:cell.n])
                rs.append(cell.rendered[:cell.n])
        if not ps:
            return (np.empty((0, 3)), np.empty((0, 3)), np.empty(0),
                    np.empty(0, dtype=bool))
        return (np.concatenate(ps), np.concatenate(cs),
                np.concatenate(ws), np.concatenate(rs))
