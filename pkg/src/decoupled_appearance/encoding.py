"""Multi-resolution hash-grid encoding and the degenerate ablation encodings.

The hash grid follows the Instant-NGP construction: level ``l`` is a virtual
voxel grid with ``floor(N_min * b**l)`` cells per axis whose vertex features
live in a table of at most ``T`` rows.  Coarse levels whose dense vertex count
fits in ``T`` are indexed directly (collision free); finer levels hash.

All queries are batched: positions are ``(N, 3)`` arrays and features come back
as ``(N, L * F)`` arrays with the levels concatenated in order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

PRIMES = (np.uint64(1), np.uint64(2654435761), np.uint64(805459861))

ENCODING_KINDS = ("xyz", "uv", "depth", "uv_depth", "color")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class HashGridConfig:
    levels: int = 16
    features_per_level: int = 2
    table_size: int = 2**19
    base_resolution: int = 16
    growth_factor: float = (512 / 16) ** (1 / 15)
    domain_min: tuple = (-1.0, -1.0, -1.0)
    domain_max: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "domain_min", tuple(float(v) for v in self.domain_min))
        object.__setattr__(self, "domain_max", tuple(float(v) for v in self.domain_max))
        if self.levels < 1 or self.features_per_level < 1:
            raise ConfigError("levels and features_per_level must be >= 1")
        if self.table_size < 1 or self.table_size & (self.table_size - 1):
            raise ConfigError(f"table_size must be a power of two, got {self.table_size}")
        if self.base_resolution < 1:
            raise ConfigError("base_resolution must be >= 1")
        if self.levels > 1 and not self.growth_factor > 1:
            raise ConfigError("growth_factor must be > 1")
        if len(self.domain_min) != 3 or len(self.domain_max) != 3:
            raise ConfigError("domain bounds must be 3-vectors")
        if not all(lo < hi for lo, hi in zip(self.domain_min, self.domain_max)):
            raise ConfigError("domain_min must be < domain_max componentwise")

    @classmethod
    def with_finest(cls, finest_resolution: int, levels: int = 16, base_resolution: int = 16, **kw) -> "HashGridConfig":
        """Config whose growth factor makes the finest level ``finest_resolution`` per axis."""
        b = (finest_resolution / base_resolution) ** (1 / max(levels - 1, 1)) if levels > 1 else 2.0
        return cls(levels=levels, base_resolution=base_resolution, growth_factor=b, **kw)

    @property
    def output_dim(self) -> int:
        return self.levels * self.features_per_level

    def resolution(self, level: int) -> int:
        # small epsilon keeps exact powers (e.g. 16 * 2**k) from flooring one below
        return int(math.floor(self.base_resolution * self.growth_factor**level + 1e-9))

    def level_rows(self, level: int) -> int:
        """Number of table rows actually allocated for ``level``."""
        return min(self.table_size, (self.resolution(level) + 1) ** 3)

    def is_dense(self, level: int) -> bool:
        return (self.resolution(level) + 1) ** 3 <= self.table_size

    def to_dict(self) -> dict:
        return {
            "levels": self.levels,
            "features_per_level": self.features_per_level,
            "table_size": self.table_size,
            "base_resolution": self.base_resolution,
            "growth_factor": self.growth_factor,
            "domain_min": list(self.domain_min),
            "domain_max": list(self.domain_max),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HashGridConfig":
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})


def hash_vertex(level_resolution: int, vertex, table_size: int) -> np.ndarray:
    """Map integer vertex coordinates ``(..., 3)`` of one level to table rows.

    Dense indexing is used when the level's ``(res + 1)**3`` vertices fit in
    the table; otherwise the XOR-of-primes spatial hash modulo ``table_size``.
    """
    v = np.asarray(vertex, dtype=np.int64)
    side = level_resolution + 1
    if side**3 <= table_size:
        return v[..., 0] + side * (v[..., 1] + side * v[..., 2])
    u = v.astype(np.uint64)
    h = (u[..., 0] * PRIMES[0]) ^ (u[..., 1] * PRIMES[1]) ^ (u[..., 2] * PRIMES[2])
    return (h & np.uint64(table_size - 1)).astype(np.int64)


# corner order: bit 0 -> x, bit 1 -> y, bit 2 -> z
_CORNERS = np.array([[(c >> 0) & 1, (c >> 1) & 1, (c >> 2) & 1] for c in range(8)], dtype=np.int64)


@dataclass
class SparseRows:
    """Gradient restricted to a sorted set of table rows."""

    rows: np.ndarray  # (K,) sorted unique row indices
    values: np.ndarray  # (K, F)

    def dense(self, num_rows: int) -> np.ndarray:
        out = np.zeros((num_rows, self.values.shape[1]))
        out[self.rows] = self.values
        return out

    def scaled(self, factor: float) -> "SparseRows":
        return SparseRows(self.rows, self.values * factor)


@dataclass
class GridCache:
    """Per-level lookup data saved by the forward pass for backward."""

    indices: list  # L arrays (N, 8) of table rows
    weights: list  # L arrays (N, 8) of trilinear weights
    frac: list  # L arrays (N, 3) of in-voxel fractions
    inside: np.ndarray  # (N, 3) bool, False where the coordinate was clamped


@dataclass
class HashGridStack:
    config: HashGridConfig
    tables: list = field(default_factory=list)

    @classmethod
    def create(cls, config: HashGridConfig, rng: np.random.Generator, init_scale: float = 1e-4) -> "HashGridStack":
        tables = [
            rng.uniform(-init_scale, init_scale, size=(config.level_rows(l), config.features_per_level))
            for l in range(config.levels)
        ]
        return cls(config, tables)

    @classmethod
    def zeros(cls, config: HashGridConfig) -> "HashGridStack":
        return cls(config, [np.zeros((config.level_rows(l), config.features_per_level)) for l in range(config.levels)])

    def normalize(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        lo = np.asarray(self.config.domain_min)
        hi = np.asarray(self.config.domain_max)
        t = (np.asarray(x, dtype=np.float64) - lo) / (hi - lo)
        inside = (t >= 0.0) & (t <= 1.0)
        return np.clip(t, 0.0, 1.0), inside

    def query(self, x) -> tuple[np.ndarray, GridCache]:
        """Features for world points ``x`` of shape ``(N, 3)``."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        t, inside = self.normalize(x)
        cfg = self.config
        n = x.shape[0]
        out = np.empty((n, cfg.output_dim))
        cache = GridCache([], [], [], inside)
        for level, table in enumerate(self.tables):
            res = cfg.resolution(level)
            pos = t * res
            base = np.minimum(np.floor(pos).astype(np.int64), res - 1)
            frac = pos - base
            verts = base[:, None, :] + _CORNERS[None, :, :]
            idx = hash_vertex(res, verts, cfg.table_size)
            w = np.where(_CORNERS[None, :, :] == 1, frac[:, None, :], 1.0 - frac[:, None, :]).prod(axis=2)
            f = cfg.features_per_level
            out[:, level * f : (level + 1) * f] = np.einsum("nc,ncf->nf", w, table[idx])
            cache.indices.append(idx)
            cache.weights.append(w)
            cache.frac.append(frac)
        return out, cache

    def backward(self, cache: GridCache, upstream: np.ndarray, need_position: bool = False):
        """Scatter ``upstream`` (N, L*F) onto the touched table rows.

        Returns:
            ``(table_grads, position_grad)``.  ``table_grads`` holds one
            :class:`SparseRows` per level; ``position_grad`` is ``(N, 3)`` or
            None.  Rows come out sorted and sums use ``np.bincount``, so the
            reduction order is fixed.
        """
        cfg = self.config
        f = cfg.features_per_level
        upstream = np.atleast_2d(upstream)
        grads = []
        pos_grad = np.zeros((upstream.shape[0], 3)) if need_position else None
        extent = np.asarray(cfg.domain_max) - np.asarray(cfg.domain_min)
        for level, table in enumerate(self.tables):
            g_level = upstream[:, level * f : (level + 1) * f]
            rows, inverse = np.unique(cache.indices[level].reshape(-1), return_inverse=True)
            w = cache.weights[level]
            values = np.empty((rows.size, f))
            for k in range(f):
                contrib = (w * g_level[:, k : k + 1]).reshape(-1)
                values[:, k] = np.bincount(inverse, weights=contrib, minlength=rows.size)
            grads.append(SparseRows(rows, values))
            if need_position:
                res = cfg.resolution(level)
                frac = cache.frac[level]
                vals = np.einsum("ncf,nf->nc", table[cache.indices[level]], g_level)
                for axis in range(3):
                    dw = np.where(_CORNERS[:, axis] == 1, 1.0, -1.0)[None, :]
                    for a in range(3):
                        if a != axis:
                            dw = dw * np.where(_CORNERS[None, :, a] == 1, frac[:, None, a], 1.0 - frac[:, None, a])
                    pos_grad[:, axis] += (dw * vals).sum(axis=1) * res / extent[axis]
        if need_position:
            pos_grad = np.where(cache.inside, pos_grad, 0.0)
        return grads, pos_grad

    def copy(self) -> "HashGridStack":
        return HashGridStack(self.config, [t.copy() for t in self.tables])


def grid_query(grids: HashGridStack, x) -> np.ndarray:
    """Concatenated level features for one point ``(3,)`` or a batch ``(N, 3)``."""
    x = np.asarray(x, dtype=np.float64)
    out, _ = grids.query(x.reshape(-1, 3))
    return out[0] if x.ndim == 1 else out


def grid_query_backward(grids: HashGridStack, x, upstream):
    """Table gradients and position gradient for ``grid_query(grids, x)``."""
    x = np.asarray(x, dtype=np.float64)
    _, cache = grids.query(x.reshape(-1, 3))
    up = np.asarray(upstream, dtype=np.float64).reshape(-1, grids.config.output_dim)
    table_grads, pos_grad = grids.backward(cache, up, need_position=True)
    return table_grads, (pos_grad[0] if x.ndim == 1 else pos_grad)


@dataclass(frozen=True)
class AblationEncoding:
    """Which quantity feeds the decoder in place of (or as) the 3D features."""

    kind: str = "xyz"
    pe_frequencies: int = 5

    def __post_init__(self):
        if self.kind not in ENCODING_KINDS:
            raise ConfigError(f"unknown encoding kind {self.kind!r}; expected one of {ENCODING_KINDS}")
        if self.pe_frequencies < 1:
            raise ConfigError("pe_frequencies must be >= 1")


def positional_encoding(values: np.ndarray, frequencies: int) -> np.ndarray:
    """Sine/cosine encoding of ``(N, Q)`` values in [0, 1].

    Layout per quantity ``q``: ``sin(2^0 pi q), cos(2^0 pi q), sin(2^1 pi q), ...``;
    quantities follow each other in input order.
    """
    values = np.atleast_2d(values)
    scales = np.pi * 2.0 ** np.arange(frequencies)
    arg = values[:, :, None] * scales[None, None, :]
    enc = np.stack([np.sin(arg), np.cos(arg)], axis=-1)
    return enc.reshape(values.shape[0], -1)


def ablation_encode(
    kind: str,
    pixel,
    depth,
    color,
    image_size: tuple[int, int],
    out_dim: int,
    pe_frequencies: int = 5,
    depth_range: tuple[float, float] = (0.0, 1.0),
) -> np.ndarray:
    """Degenerate (non-3D) decoder inputs, padded or truncated to ``out_dim``.

    Args:
        kind: ``uv``, ``depth``, ``uv_depth`` or ``color``.
        pixel: ``(N, 2)`` continuous pixel coordinates ``(u, v)``.
        depth: ``(N,)`` z-depths, mapped to [0, 1] through ``depth_range``.
        color: ``(N, 3)`` rendered RGB in [0, 1].
        image_size: ``(width, height)``.
        out_dim: Output length, normally ``L * F`` of the grid it replaces.
    """
    if kind == "xyz":
        raise ConfigError("the xyz encoding is served by the hash grid, not ablation_encode")
    if kind not in ENCODING_KINDS:
        raise ConfigError(f"unknown encoding kind {kind!r}")
    pixel = np.atleast_2d(np.asarray(pixel, dtype=np.float64))
    n = pixel.shape[0]
    width, height = image_size
    uv = np.clip(pixel / np.array([width, height], dtype=np.float64), 0.0, 1.0)
    near, far = depth_range
    d = np.clip((np.asarray(depth, dtype=np.float64).reshape(n, 1) - near) / (far - near), 0.0, 1.0)
    if kind == "uv":
        q = uv
    elif kind == "depth":
        q = d
    elif kind == "uv_depth":
        q = np.concatenate([uv, d], axis=1)
    else:
        q = np.clip(np.asarray(color, dtype=np.float64).reshape(n, 3), 0.0, 1.0)
    enc = positional_encoding(q, pe_frequencies)
    out = np.zeros((n, out_dim))
    m = min(out_dim, enc.shape[1])
    out[:, :m] = enc[:, :m]
    return out
