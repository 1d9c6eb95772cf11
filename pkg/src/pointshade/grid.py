"""Voxel-hash neighborhood index and sample-density estimation.

The grid is an acceleration structure only: every query is defined as "all
points strictly within radius r" and must agree exactly with a linear scan.
Cells are keyed by packed integer coordinates; points are stored in one flat
array sorted by cell key, so batch queries reduce to vectorized searchsorted
lookups over the (2K+1)^3 cell neighborhood.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._validation import check_positions, check_scalar

#: Default cell size: a 100^3 grid over the [-2, 2]^3 working volume.
DEFAULT_CELL_SIZE = 4.0 / 100.0
DEFAULT_ORIGIN = (-2.0, -2.0, -2.0)

_SHIFT = 21
_BIAS = 1 << 20


def _pack_cells(cells: np.ndarray) -> np.ndarray:
    c = cells.astype(np.int64) + _BIAS
    return (c[:, 0] << (2 * _SHIFT)) | (c[:, 1] << _SHIFT) | c[:, 2]


@dataclass
class Neighborhood:
    """Points strictly within ``radius`` of ``center``, nearest first
    (ties broken by ascending index)."""

    center: np.ndarray
    radius: float
    indices: np.ndarray
    distances: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)


class VoxelHashGrid:
    """Uniform grid over scattered 3D points supporting radius queries."""

    def __init__(self, points, cell_size: float = DEFAULT_CELL_SIZE, origin=DEFAULT_ORIGIN):
        points = check_positions(points, "points")
        cell_size = check_scalar(cell_size, "cell_size", minimum=0.0, strict=True)
        self.points = points
        self.cell_size = cell_size
        self.origin = np.asarray(origin, dtype=np.float64)
        cells = np.floor((points - self.origin) / cell_size).astype(np.int64)
        keys = _pack_cells(cells)
        self.order = np.argsort(keys, kind="stable").astype(np.int64)
        self._sorted_keys = keys[self.order]
        self.cell_keys, self.cell_starts = np.unique(self._sorted_keys, return_index=True)
        self.cell_counts = np.diff(np.append(self.cell_starts, len(keys))).astype(np.int64)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def cells(self) -> dict:
        """Materialized cell map {(i, j, k): [point indices]} (for inspection)."""
        out = {}
        for key, start, count in zip(self.cell_keys, self.cell_starts, self.cell_counts):
            i = (key >> (2 * _SHIFT)) - _BIAS
            j = ((key >> _SHIFT) & ((1 << _SHIFT) - 1)) - _BIAS
            k = (key & ((1 << _SHIFT) - 1)) - _BIAS
            out[(int(i), int(j), int(k))] = self.order[start : start + count].tolist()
        return out

    def cell_of(self, point) -> tuple:
        c = np.floor((np.asarray(point, dtype=np.float64) - self.origin) / self.cell_size).astype(np.int64)
        return tuple(int(v) for v in c)

    # -- queries -----------------------------------------------------------

    def query_radius(self, x, r: float) -> Neighborhood:
        """All indexed points with distance < r from x."""
        x = np.asarray(x, dtype=np.float64).reshape(1, 3)
        r = check_scalar(r, "r", minimum=0.0, strict=True)
        dst, idx, dist = self.query_radius_batch(x, r)
        return Neighborhood(center=x[0], radius=r, indices=idx, distances=dist)

    def query_radius_batch(self, queries, r: float):
        """Radius query for many centers at once.

        Returns ``(query_ids, point_ids, distances)`` as flat arrays sorted by
        (query id, distance, point id).
        """
        queries = check_positions(queries, "queries")
        r = check_scalar(r, "r", minimum=0.0, strict=True)
        nq = len(queries)
        if nq == 0 or len(self.points) == 0:
            return (np.empty(0, np.int64), np.empty(0, np.int64), np.empty(0, np.float64))
        k = max(1, math.ceil(r / self.cell_size - 1e-12))
        qcells = np.floor((queries - self.origin) / self.cell_size).astype(np.int64)
        qids_parts, cand_parts = [], []
        rng = range(-k, k + 1)
        for dx in rng:
            for dy in rng:
                for dz in rng:
                    keys = _pack_cells(qcells + np.array([dx, dy, dz], dtype=np.int64))
                    pos = np.searchsorted(self.cell_keys, keys)
                    valid = (pos < len(self.cell_keys)) & (self.cell_keys[np.minimum(pos, len(self.cell_keys) - 1)] == keys)
                    if not np.any(valid):
                        continue
                    vq = np.nonzero(valid)[0]
                    starts = self.cell_starts[pos[vq]]
                    counts = self.cell_counts[pos[vq]]
                    total = int(counts.sum())
                    if total == 0:
                        continue
                    # grouped arange: flat offsets into the sorted point array
                    rep_start = np.repeat(starts, counts)
                    base = np.repeat(np.cumsum(counts) - counts, counts)
                    flat = rep_start + (np.arange(total) - base)
                    qids_parts.append(np.repeat(vq, counts))
                    cand_parts.append(self.order[flat])
        if not qids_parts:
            return (np.empty(0, np.int64), np.empty(0, np.int64), np.empty(0, np.float64))
        qids = np.concatenate(qids_parts)
        cand = np.concatenate(cand_parts)
        delta = queries[qids] - self.points[cand]
        dist = np.sqrt(np.einsum("ij,ij->i", delta, delta))
        keep = dist < r
        qids, cand, dist = qids[keep], cand[keep], dist[keep]
        order = np.lexsort((cand, dist, qids))
        return qids[order], cand[order], dist[order]


def build_grid(points, cell_size: float = DEFAULT_CELL_SIZE) -> VoxelHashGrid:
    """Index ``points`` into a voxel hash grid (linear cost)."""
    return VoxelHashGrid(points, cell_size=cell_size)


# -- density estimation ----------------------------------------------------

#: Kernel bandwidth as a fraction of the convolution radius.
DENSITY_BANDWIDTH = 0.25


def point_densities(points, r: float, grid: VoxelHashGrid | None = None) -> np.ndarray:
    """Per-point sampling density under an Epanechnikov kernel.

    Bandwidth is ``DENSITY_BANDWIDTH * r`` where r is the convolution radius
    the densities will compensate.  The self term contributes K(0) = 1, so a
    sampling spaced at least r/2 apart (half the receptive field) has density
    exactly 1 and clustered points rise above it.  Values are strictly
    positive and invariant to uniform rescaling of positions and r.
    """
    points = check_positions(points, "points")
    r = check_scalar(r, "r", minimum=0.0, strict=True)
    h = DENSITY_BANDWIDTH * r
    if grid is None or grid.cell_size > h * 1.5:
        grid = VoxelHashGrid(points, cell_size=h)
    qids, _cand, dist = grid.query_radius_batch(points, h)
    t = dist / h
    contrib = 1.0 - t * t
    dens = np.zeros(len(points))
    if len(qids):
        unique, starts = np.unique(qids, return_index=True)  # qids arrive sorted
        dens[unique] = np.add.reduceat(contrib, starts)
    return dens


def estimate_density(points, x, neighborhood: Neighborhood, r: float) -> np.ndarray:
    """Density value for each member of ``neighborhood`` (one per neighbor).

    The estimate depends only on the neighbor's surroundings, not on the
    query point, so values can be shared across overlapping neighborhoods.
    """
    dens = point_densities(points, r)
    return dens[neighborhood.indices]
