"""Octree quantization of point sets inside the unit cell [-1, 1]^3.

Level ``l`` splits each axis into ``2**l`` segments of side ``2**(1 - l)``.
Cell boxes are half-open ``[lo, hi)`` except on the upper domain face, which
is closed so every point in the unit cell owns exactly one cell per level.
Cells of a level are stored sorted by Morton key, which gives a canonical
order independent of input point order.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

MAX_LEVEL = 21  # 3 * 21 = 63 key bits

KERNEL_OFFSETS = np.array(list(itertools.product((-1, 0, 1), repeat=3)), dtype=np.int64)
CENTER_OFFSET = 13  # index of (0, 0, 0) in KERNEL_OFFSETS


class CellCoord(NamedTuple):
    level: int
    x: int
    y: int
    z: int

    def validate(self) -> None:
        if not 0 <= self.level <= MAX_LEVEL:
            raise ValueError(f"level {self.level} outside [0, {MAX_LEVEL}]")
        n = 1 << self.level
        for c in (self.x, self.y, self.z):
            if not 0 <= c < n:
                raise ValueError(f"coordinate {c} outside [0, {n}) at level {self.level}")


POINT_BLOCK = 1 << 13  # points per block in the key pass, so the temporaries stay cache-resident


def _check_unit_cell(points: np.ndarray) -> None:
    if points.size and (np.any(points < -1.0) or np.any(points > 1.0) or not np.all(np.isfinite(points))):
        raise ValueError("positions must lie inside the unit cell [-1, 1]^3")


def cell_coords(points: np.ndarray, level: int) -> np.ndarray:
    """Integer cell coordinates ``(N, 3)`` of ``points`` at ``level``."""
    pts = np.asarray(points, dtype=np.float64)
    _check_unit_cell(pts)
    n = 1 << level
    side = 2.0 ** (1 - level)
    idx = np.floor((pts + 1.0) * (0.5 * n)).astype(np.int64)
    np.clip(idx, 0, n - 1, out=idx)
    # (p + 1) can round across a face; lo = -1 + idx * side is exact, so fix up against it.
    lo = -1.0 + idx * side
    idx -= (pts < lo) & (idx > 0)
    lo = -1.0 + idx * side
    idx += (pts >= lo + side) & (idx < n - 1)
    return idx


def cell_coord(p, level: int) -> CellCoord:
    x, y, z = cell_coords(np.asarray(p, dtype=np.float64).reshape(1, 3), level)[0]
    return CellCoord(level, int(x), int(y), int(z))


def cell_bounds(coords: np.ndarray, level: int) -> tuple[np.ndarray, np.ndarray]:
    side = 2.0 ** (1 - level)
    lo = -1.0 + np.asarray(coords, np.int64) * side
    return lo, lo + side


def cell_centers(coords: np.ndarray, level: int) -> np.ndarray:
    lo, hi = cell_bounds(coords, level)
    return 0.5 * (lo + hi)


def _spread_bits(v: np.ndarray) -> np.ndarray:
    v = v.astype(np.uint64) & np.uint64(0x1FFFFF)
    v = (v | (v << np.uint64(32))) & np.uint64(0x1F00000000FFFF)
    v = (v | (v << np.uint64(16))) & np.uint64(0x1F0000FF0000FF)
    v = (v | (v << np.uint64(8))) & np.uint64(0x100F00F00F00F00F)
    v = (v | (v << np.uint64(4))) & np.uint64(0x10C30C30C30C30C3)
    v = (v | (v << np.uint64(2))) & np.uint64(0x1249249249249249)
    return v


def _compact_bits(v: np.ndarray) -> np.ndarray:
    v = v.astype(np.uint64) & np.uint64(0x1249249249249249)
    v = (v | (v >> np.uint64(2))) & np.uint64(0x10C30C30C30C30C3)
    v = (v | (v >> np.uint64(4))) & np.uint64(0x100F00F00F00F00F)
    v = (v | (v >> np.uint64(8))) & np.uint64(0x1F0000FF0000FF)
    v = (v | (v >> np.uint64(16))) & np.uint64(0x1F00000000FFFF)
    v = (v | (v >> np.uint64(32))) & np.uint64(0x1FFFFF)
    return v


def morton_keys(coords: np.ndarray) -> np.ndarray:
    """Interleave ``(N, 3)`` integer coords into int64 keys, x in the lowest bit."""
    c = np.asarray(coords)
    if c.size and (c.min() < 0 or c.max() >= (1 << MAX_LEVEL)):
        raise ValueError("coordinate outside the 21-bit key range")
    key = _spread_bits(c[:, 0]) | (_spread_bits(c[:, 1]) << np.uint64(1)) | (_spread_bits(c[:, 2]) << np.uint64(2))
    return key.astype(np.int64)


def morton_decode_keys(keys: np.ndarray) -> np.ndarray:
    k = np.asarray(keys, dtype=np.int64).astype(np.uint64)
    return np.stack(
        [_compact_bits(k), _compact_bits(k >> np.uint64(1)), _compact_bits(k >> np.uint64(2))], axis=1
    ).astype(np.int64)


def morton_encode(c: CellCoord) -> int:
    c.validate()
    return int(morton_keys(np.array([[c.x, c.y, c.z]]))[0])


def morton_decode(key: int, level: int) -> CellCoord:
    if not 0 <= key < (1 << (3 * level)):
        raise ValueError(f"key {key} out of range for level {level}")
    x, y, z = morton_decode_keys(np.array([key]))[0]
    return CellCoord(level, int(x), int(y), int(z))


@dataclass(frozen=True)
class CellLevel:
    level: int
    coords: np.ndarray  # (n, 3) int64
    keys: np.ndarray  # (n,) int64, strictly increasing
    centers: np.ndarray  # (n, 3) float64
    parent: np.ndarray  # (n,) index into level - 1, or -1 when not materialized

    def __len__(self) -> int:
        return len(self.keys)

    def lookup(self, keys: np.ndarray) -> np.ndarray:
        """Index of each key in this level, -1 where the cell is empty."""
        keys = np.asarray(keys, dtype=np.int64)
        if len(self.keys) == 0:
            return np.full(keys.shape, -1, dtype=np.int64)
        pos = np.searchsorted(self.keys, keys)
        pos_c = np.minimum(pos, len(self.keys) - 1)
        return np.where(self.keys[pos_c] == keys, pos_c, -1)


@dataclass(frozen=True)
class CellSet:
    """Non-empty octree cells for levels ``L_min..L`` with node incidence."""

    L: int
    L_min: int
    levels: dict[int, CellLevel]
    node_to_cell: np.ndarray  # (N,) leaf cell index per node
    cell_offsets: np.ndarray  # (n_leaf + 1,) CSR offsets into cell_nodes
    cell_nodes: np.ndarray  # (N,) node indices grouped by leaf cell
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def leaf(self) -> CellLevel:
        return self.levels[self.L]

    @property
    def n_nodes(self) -> int:
        return len(self.node_to_cell)

    def level(self, l: int) -> CellLevel:
        if l not in self.levels:
            raise KeyError(f"level {l} not materialized (have {self.L_min}..{self.L})")
        return self.levels[l]

    def n_cells(self, l: int) -> int:
        return len(self.level(l))

    def centers(self, l: int) -> np.ndarray:
        return self.level(l).centers

    def cell_graph(self, l: int) -> np.ndarray:
        return np.zeros(self.n_cells(l), dtype=np.int64)

    def cell_to_nodes(self, i: int) -> np.ndarray:
        return self.cell_nodes[self.cell_offsets[i] : self.cell_offsets[i + 1]]

    def nodes_per_cell(self) -> np.ndarray:
        return np.diff(self.cell_offsets)

    def node_cells_at(self, l: int) -> np.ndarray:
        """Owning level-``l`` cell index for every node."""
        idx = self.node_to_cell
        for lev in range(self.L, l, -1):
            idx = self.level(lev).parent[idx]
        self.level(l)
        return idx

    def neighbor_table(self, to_level: int, stride: int = 0) -> np.ndarray:
        """``(n_to, 27)`` indices of level ``to_level + stride`` cells feeding each output cell.

        Output cell ``P`` reads the fine cells ``P * 2**stride + offset`` for
        every offset in ``KERNEL_OFFSETS``; -1 marks an empty neighbor.
        Tables are cached on the cell set.
        """
        key = (to_level, stride)
        if key not in self._cache:
            dst = self.level(to_level)
            src = self.level(to_level + stride)
            anchor = dst.coords * (1 << stride)
            cand = anchor[:, None, :] + KERNEL_OFFSETS[None, :, :]
            n_src = 1 << (to_level + stride)
            inside = np.all((cand >= 0) & (cand < n_src), axis=2)
            flat = np.where(inside[..., None], cand, 0).reshape(-1, 3)
            idx = src.lookup(morton_keys(flat)).reshape(cand.shape[:2])
            self._cache[key] = np.where(inside, idx, -1)
        return self._cache[key]


class CellBatch:
    """Disjoint union of per-graph cell sets; cells of different graphs never mix.

    Exposes the subset of the :class:`CellSet` interface used by the model,
    with cell indices offset per graph at every level.
    """

    def __init__(self, sets: list[CellSet]):
        if not sets:
            raise ValueError("empty cell batch")
        if len({(c.L, c.L_min) for c in sets}) != 1:
            raise ValueError("cell sets in a batch must share L and L_min")
        self.sets = list(sets)
        self.L, self.L_min = sets[0].L, sets[0].L_min
        self._offsets = {
            l: np.concatenate([[0], np.cumsum([c.n_cells(l) for c in sets])]).astype(np.int64)
            for l in range(self.L_min, self.L + 1)
        }
        self._cache: dict = {}
        leaf = self._offsets[self.L]
        self.node_to_cell = np.concatenate([c.node_to_cell + leaf[g] for g, c in enumerate(sets)])

    @property
    def n_graphs(self) -> int:
        return len(self.sets)

    @property
    def n_nodes(self) -> int:
        return len(self.node_to_cell)

    def n_cells(self, l: int) -> int:
        self._check(l)
        return int(self._offsets[l][-1])

    def graph_cell_counts(self, l: int) -> np.ndarray:
        self._check(l)
        return np.diff(self._offsets[l])

    def _check(self, l: int) -> None:
        if l not in self._offsets:
            raise KeyError(f"level {l} not materialized (have {self.L_min}..{self.L})")

    def centers(self, l: int) -> np.ndarray:
        return np.concatenate([c.centers(l) for c in self.sets])

    def cell_graph(self, l: int) -> np.ndarray:
        return np.repeat(np.arange(self.n_graphs), self.graph_cell_counts(l))

    def node_cells_at(self, l: int) -> np.ndarray:
        off = self._offsets[l]
        return np.concatenate([c.node_cells_at(l) + off[g] for g, c in enumerate(self.sets)])

    def neighbor_table(self, to_level: int, stride: int = 0) -> np.ndarray:
        key = (to_level, stride)
        if key not in self._cache:
            src_off = self._offsets[to_level + stride]
            parts = []
            for g, c in enumerate(self.sets):
                t = c.neighbor_table(to_level, stride)
                parts.append(np.where(t >= 0, t + src_off[g], -1))
            self._cache[key] = np.concatenate(parts)
        return self._cache[key]


def _stable_argsort(keys: np.ndarray, key_bits: int) -> np.ndarray:
    # (key, index) composites are distinct, so the fast unstable sort gives the stable order
    idx_bits = max(int(len(keys) - 1).bit_length(), 1)
    if key_bits + idx_bits > 62:
        return np.argsort(keys, kind="stable")
    return np.argsort((keys.astype(np.int64) << idx_bits) | np.arange(len(keys), dtype=np.int64))


def _sorted_unique(keys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Distinct values of an ascending array and each entry's rank among them."""
    new = np.empty(len(keys), dtype=bool)
    new[:1] = True
    np.not_equal(keys[1:], keys[:-1], out=new[1:])
    return keys[new], np.cumsum(new, dtype=np.int64) - 1


def build_cell_set(positions: np.ndarray, L: int, L_min: int | None = None) -> CellSet:
    pts = np.asarray(positions, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError("positions must have shape (N, 3)")
    if len(pts) == 0:
        raise ValueError("cannot build cells for an empty point set")
    if L_min is None:
        L_min = L
    if not 0 <= L_min <= L <= MAX_LEVEL:
        raise ValueError(f"need 0 <= L_min <= L <= {MAX_LEVEL}, got L_min={L_min}, L={L}")
    node_keys = np.empty(len(pts), dtype=np.int64)
    for s in range(0, len(pts), POINT_BLOCK):
        node_keys[s : s + POINT_BLOCK] = morton_keys(cell_coords(pts[s : s + POINT_BLOCK], L))
    # one stable sort; every coarser level is a linear pass over sorted keys
    order = _stable_argsort(node_keys, 3 * L)
    leaf_keys, rank = _sorted_unique(node_keys[order])
    node_to_cell = np.empty(len(pts), dtype=np.int64)
    node_to_cell[order] = rank

    levels: dict[int, CellLevel] = {}
    keys = leaf_keys
    child_to_parent = None
    for lev in range(L, L_min - 1, -1):
        c = morton_decode_keys(keys)
        if lev > L_min:
            parent_keys, parent = _sorted_unique(keys >> 3)
        else:
            parent_keys, parent = None, np.full(len(keys), -1, dtype=np.int64)
        levels[lev] = CellLevel(lev, c, keys, cell_centers(c, lev), parent)
        keys = parent_keys

    offsets = np.zeros(len(leaf_keys) + 1, dtype=np.int64)
    np.cumsum(np.bincount(node_to_cell, minlength=len(leaf_keys)), out=offsets[1:])
    return CellSet(L, L_min, levels, node_to_cell, offsets, order.astype(np.int64))


def neighbor_lookup(cs: CellSet, l: int, i: int, offset: tuple[int, int, int]) -> int | None:
    """Cell at ``P_l(i) + offset`` on the same level, or None if empty / off-grid."""
    lev = cs.level(l)
    if not 0 <= i < len(lev):
        raise IndexError(f"cell {i} does not exist at level {l}")
    p = lev.coords[i] + np.asarray(offset, dtype=np.int64)
    if np.any(p < 0) or np.any(p >= (1 << l)):
        return None
    j = int(lev.lookup(morton_keys(p[None, :]))[0])
    return None if j < 0 else j


def morton_start(positions: np.ndarray, level: int = 16) -> int:
    """Index of the point with the smallest Morton key at ``level``, ties by index."""
    keys = morton_keys(cell_coords(positions, level))
    return int(np.argmin(keys))


def fps(positions: np.ndarray, k: int, start: int | None = None) -> np.ndarray:
    """Greedy farthest point sampling; returns ``k`` indices in selection order.

    Distances are squared Euclidean in float64; ties go to the smallest index.
    With ``start=None`` the first pick is :func:`morton_start`.
    """
    pts = np.asarray(positions, dtype=np.float64)
    n = len(pts)
    if n == 0:
        raise ValueError("fps on an empty point set")
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must satisfy 1 <= k <= {n}")
    if start is None:
        start = morton_start(pts)
    if not 0 <= start < n:
        raise IndexError(f"start index {start} out of range")
    out = np.empty(k, dtype=np.int64)
    out[0] = start
    dist = ((pts - pts[start]) ** 2).sum(axis=1)
    dist[start] = -1.0
    for j in range(1, k):
        nxt = int(np.argmax(dist))
        out[j] = nxt
        np.minimum(dist, ((pts - pts[nxt]) ** 2).sum(axis=1), out=dist)
        dist[nxt] = -1.0
    return out
