"""Multi-resolution hash-grid feature encoding.

A point in [0,1]^3 is looked up in L voxel grids of geometrically
increasing resolution; at each level the 8 surrounding corner features
are fetched from a fixed-size learnable table (spatial hash, or a dense
collision-free index while the level still fits) and trilinearly
interpolated.  The per-level features are concatenated in level order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels as _k
from .autodiff import Node, Tape
from .errors import DomainError

DOMAIN_TOL = 1e-9
INIT_SCALE = 1e-4


@dataclass(frozen=True)
class HashGridConfig:
    levels: int = 16
    features_per_level: int = 2
    table_size: int = 2 ** 19
    n_min: int = 16
    n_max: int = 2048

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.features_per_level < 1:
            raise ValueError("features_per_level must be >= 1")
        if self.table_size < 1 or self.table_size & (self.table_size - 1):
            raise ValueError("table_size must be a power of two")
        if self.n_min < 2:
            raise ValueError("n_min must be >= 2")
        if self.n_max < self.n_min:
            raise ValueError("n_max must be >= n_min")

    @property
    def out_dim(self) -> int:
        return self.levels * self.features_per_level


def level_resolutions(config: HashGridConfig) -> np.ndarray:
    """Per-level grid resolutions N_i = floor(n_min * g^i).

    The growth factor g = exp((ln n_max - ln n_min) / (L - 1)) is chosen
    so the finest level lands on n_max; a single level stays at n_min.
    """
    if config.levels == 1:
        return np.array([config.n_min], dtype=np.int64)
    g = np.exp((np.log(config.n_max) - np.log(config.n_min)) / (config.levels - 1))
    exact = config.n_min * g ** np.arange(config.levels)
    return np.floor(exact + 1e-6).astype(np.int64)


class HashGrid:
    """Learnable feature tables plus the per-level lookup geometry."""

    def __init__(self, config: HashGridConfig, seed: int = 0,
                 tables: np.ndarray | None = None):
        self.config = config
        self.resolutions = level_resolutions(config)
        # levels whose full vertex lattice fits the table get a dense,
        # collision-free index instead of the hash
        self.dense_level = (self.resolutions + 1) ** 3 <= config.table_size
        shape = (config.levels, config.table_size, config.features_per_level)
        if tables is None:
            rng = np.random.Generator(np.random.PCG64(seed))
            tables = rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape)
        else:
            tables = np.asarray(tables, dtype=np.float64)
            if tables.shape != shape:
                raise ValueError(f"tables shape {tables.shape} != {shape}")
        self.tables = tables

    @property
    def out_dim(self) -> int:
        return self.config.out_dim

    def slot_index(self, level: int, vertex: tuple[int, int, int]) -> int:
        """Table slot of an integer grid vertex (hash determinism hook)."""
        res = int(self.resolutions[level])
        x, y, z = (int(v) for v in vertex)
        if self.dense_level[level]:
            return x + (res + 1) * (y + (res + 1) * z)
        p1, p2, p3 = _k.HASH_PRIMES
        h = (np.uint64(x) * p1) ^ (np.uint64(y) * p2) ^ (np.uint64(z) * p3)
        return int(h & np.uint64(self.config.table_size - 1))


def _check_domain(pts: np.ndarray):
    if pts.min() < -DOMAIN_TOL or pts.max() > 1.0 + DOMAIN_TOL:
        bad = pts[np.any((pts < -DOMAIN_TOL) | (pts > 1.0 + DOMAIN_TOL), axis=1)][0]
        raise DomainError(f"point {bad} outside the [0,1]^3 encoding domain")


def _as_batch(p) -> tuple[np.ndarray, bool]:
    pts = np.asarray(p, dtype=np.float64)
    single = pts.ndim == 1
    if single:
        pts = pts[None, :]
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected (3,) or (N,3) points, got {pts.shape}")
    return pts, single


def encode(grid: HashGrid, p) -> np.ndarray:
    """Feature vector(s) of length L*d for point(s) in [0,1]^3."""
    pts, single = _as_batch(p)
    _check_domain(pts)
    pts = np.clip(pts, 0.0, 1.0)
    out = np.empty((pts.shape[0], grid.out_dim))
    _k.hash_encode_fwd(np.ascontiguousarray(pts), grid.tables, grid.resolutions,
                       grid.dense_level, grid.config.table_size - 1, out)
    return out[0] if single else out


def encode_backward(grid: HashGrid, p, upstream, out: np.ndarray | None = None) -> np.ndarray:
    """Accumulate d(encode)/d(tables) contributions for the given point(s).

    Each table entry touched by the forward pass receives its trilinear
    weight times the matching upstream slice; everything else stays zero.
    """
    pts, single = _as_batch(p)
    _check_domain(pts)
    pts = np.clip(pts, 0.0, 1.0)
    up = np.asarray(upstream, dtype=np.float64)
    if single:
        up = up[None, :]
    if up.shape != (pts.shape[0], grid.out_dim):
        raise ValueError(f"upstream shape {up.shape} != ({pts.shape[0]}, {grid.out_dim})")
    if out is None:
        out = np.zeros_like(grid.tables)
    _k.hash_encode_bwd(np.ascontiguousarray(pts), np.ascontiguousarray(up),
                       grid.resolutions, grid.dense_level,
                       grid.config.table_size - 1, out)
    return out


def encode_node(tape: Tape, grid: HashGrid, tables_node: Node, coords: np.ndarray) -> Node:
    """Tape op: encode a constant batch of points against learnable tables."""
    coords = np.ascontiguousarray(coords, dtype=np.float64)
    _check_domain(coords)
    coords = np.clip(coords, 0.0, 1.0)
    out = np.empty((coords.shape[0], grid.out_dim))
    _k.hash_encode_fwd(coords, tables_node.value, grid.resolutions,
                       grid.dense_level, grid.config.table_size - 1, out)

    def vjp(g):
        gt = np.zeros_like(tables_node.value)
        _k.hash_encode_bwd(coords, np.ascontiguousarray(g), grid.resolutions,
                           grid.dense_level, grid.config.table_size - 1, gt)
        return (gt,)

    return tape._emit(out, (tables_node,), vjp)


def encode_reference(grid: HashGrid, pts: np.ndarray) -> np.ndarray:
    """Plain-numpy forward pass used as the kernel's correctness oracle."""
    pts, _ = _as_batch(pts)
    out = np.zeros((pts.shape[0], grid.out_dim))
    d = grid.config.features_per_level
    for lev in range(grid.config.levels):
        res = int(grid.resolutions[lev])
        f = pts * res
        idx = np.minimum(f.astype(np.int64), res - 1)
        w = f - idx
        for corner in range(8):
            off = np.array([corner & 1, (corner >> 1) & 1, (corner >> 2) & 1])
            cw = np.prod(np.where(off, w, 1.0 - w), axis=1)
            verts = idx + off
            slots = np.array([grid.slot_index(lev, tuple(v)) for v in verts])
            out[:, lev * d:(lev + 1) * d] += cw[:, None] * grid.tables[lev, slots]
    return out
