"""
Uniform box grids for RieszLab.
- Grid: the box [-L, L]^n sampled with spacing h, Dirichlet boundary nodes excluded
- GridFunction / VectorGridFunction: one value per interior node, n-vectors per node or per sample point
- ball averages, weighted L^p norms, volume-growth profiles
- CSV / binary layouts for grid functions (see README.md)
"""
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

logger = logging.getLogger(__name__)

# Anything that can stand in for a weight: None (unit), an explicit node array,
# or a WeightField-like callable mapping (k, n) points to (k,) values.
WeightLike = Union[None, np.ndarray, Callable[[np.ndarray], np.ndarray]]

_BIN_HEADER = np.dtype(
    [("magic", "S4"), ("n", "<i4"), ("L", "<f8"), ("h", "<f8"), ("count", "<i8")]
)
_BIN_MAGIC = b"RLGF"


@dataclass(frozen=True)
class Grid:
    n: int
    L: float
    h: float

    def __post_init__(self):
        if self.n not in (2, 3):
            raise ValueError(f"dimension must be 2 or 3, got {self.n}")
        if not self.h > 0:
            raise ValueError(f"spacing must be positive, got {self.h}")
        ratio = self.L / self.h
        k = round(ratio)
        if k < 1 or abs(ratio - k) > 1e-9 * max(1.0, ratio):
            raise ValueError(f"L/h must be a positive integer, got L={self.L}, h={self.h}")

    @property
    def half_steps(self) -> int:
        return int(round(self.L / self.h))

    @property
    def nodes_per_axis(self) -> int:
        """m = 2L/h + 1, boundary nodes included."""
        return 2 * self.half_steps + 1

    @property
    def interior_per_axis(self) -> int:
        return self.nodes_per_axis - 2

    @property
    def shape(self) -> tuple:
        return (self.interior_per_axis,) * self.n

    @property
    def size(self) -> int:
        return self.interior_per_axis ** self.n

    @property
    def cell_volume(self) -> float:
        return self.h ** self.n

    def axis_coords(self) -> np.ndarray:
        # node i sits at -L + i*h, i = 1 .. m-2
        idx = np.arange(1, self.nodes_per_axis - 1, dtype=float)
        return -self.L + idx * self.h

    def coords(self) -> np.ndarray:
        """Interior node coordinates, shape (size, n), row-major (axis 0 slowest)."""
        axes = [self.axis_coords()] * self.n
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def distance_to_boundary(self) -> np.ndarray:
        return self.L - np.abs(self.coords()).max(axis=1)

    def nearest_node(self, point: Sequence[float]) -> int:
        point = np.asarray(point, dtype=float)
        if point.shape != (self.n,):
            raise ValueError(f"point must have {self.n} coordinates")
        idx = np.rint((point + self.L) / self.h).astype(int) - 1
        idx = np.clip(idx, 0, self.interior_per_axis - 1)
        return int(np.ravel_multi_index(tuple(idx), self.shape))


@dataclass(frozen=True)
class GridFunction:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        vals = np.array(self.values, dtype=float).reshape(-1)
        if vals.size != self.grid.size:
            raise ValueError(f"expected {self.grid.size} values, got {vals.size}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("grid function has non-finite values")
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    def reshaped(self) -> np.ndarray:
        return self.values.reshape(self.grid.shape)


@dataclass(frozen=True, eq=False)
class VectorGridFunction:
    """
    n-vectors at the interior nodes, or at explicit sample points carrying
    their own quadrature measure (the discrete gradient lives at cell vertices).
    """
    grid: Grid
    values: np.ndarray
    points: Optional[np.ndarray] = None
    measure: Optional[np.ndarray] = None

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        count = self.grid.size if self.points is None else len(self.points)
        if vals.shape != (count, self.grid.n):
            raise ValueError(f"expected shape {(count, self.grid.n)}, got {vals.shape}")
        if (self.points is None) != (self.measure is None):
            raise ValueError("sample points and their measure come together")
        if self.measure is not None and np.shape(self.measure) != (count,):
            raise ValueError(f"measure must have shape ({count},)")
        if not np.all(np.isfinite(vals)):
            raise ValueError("vector grid function has non-finite values")
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    @property
    def at_nodes(self) -> bool:
        return self.points is None

    def magnitude(self) -> np.ndarray:
        return np.linalg.norm(self.values, axis=1)


@dataclass(frozen=True)
class MeasureProfile:
    doubling: float
    lower: float
    upper: float
    pooled: float

    def __post_init__(self):
        if not (0 < self.lower <= self.upper):
            raise ValueError(f"invalid growth exponents ({self.lower}, {self.upper})")
        if self.doubling < 1:
            raise ValueError(f"doubling constant below 1: {self.doubling}")


def node_weights(grid: Grid, w: WeightLike = None) -> np.ndarray:
    if w is None:
        return np.ones(grid.size)
    if isinstance(w, np.ndarray):
        if w.shape != (grid.size,):
            raise ValueError(f"weight array must have shape ({grid.size},)")
        return w
    return np.asarray(w(grid.coords()), dtype=float)


def ball_mask(grid: Grid, center: Sequence[float], r: float) -> np.ndarray:
    # strict inequality at node centers, cells are not clipped
    center = np.asarray(center, dtype=float)
    return np.linalg.norm(grid.coords() - center, axis=1) < r


def ball_volume(grid: Grid, center: Sequence[float], r: float, w: WeightLike = None) -> float:
    mask = ball_mask(grid, center, r)
    return float(np.sum(node_weights(grid, w)[mask]) * grid.cell_volume)


def ball_average(f: GridFunction, center: Sequence[float], r: float, w: WeightLike = None) -> float:
    grid = f.grid
    mask = ball_mask(grid, center, r)
    if not mask.any():
        raise ValueError("empty ball")
    wts = node_weights(grid, w)[mask]
    mass = np.sum(wts * grid.cell_volume)
    if mass <= 0:
        raise ValueError("empty ball")
    return float(np.sum(f.values[mask] * wts * grid.cell_volume) / mass)


def lp_norm(
    f: Union[GridFunction, VectorGridFunction], p: float, w: WeightLike = None
) -> float:
    """Weighted L^p norm; vector fields use the pointwise Euclidean length."""
    if p < 1:
        raise ValueError(f"p must be >= 1, got {p}")
    vector = isinstance(f, VectorGridFunction)
    mag = f.magnitude() if vector else np.abs(f.values)
    top = float(mag.max()) if mag.size else 0.0
    if math.isinf(p) or top == 0.0:
        return top
    if vector and not f.at_nodes:
        if w is not None:
            raise ValueError("fields at sample points carry their own measure")
        measure = f.measure
    else:
        measure = node_weights(f.grid, w) * f.grid.cell_volume
    # scale by the max so large p neither overflows nor underflows
    total = np.sum((mag / top) ** p * measure)
    return float(top * total ** (1.0 / p))


def measure_profile(
    grid: Grid,
    w: WeightLike,
    centers: Sequence[Sequence[float]],
    radii: Sequence[float],
) -> MeasureProfile:
    radii = np.asarray(radii, dtype=float)
    if radii.size < 2 or np.any(np.diff(radii) <= 0):
        raise ValueError("radii must be increasing with at least 2 entries")
    wts = node_weights(grid, w)
    if not np.any(wts > 0):
        raise ValueError("all-zero weight")

    log_r = np.log(radii)
    slopes, pooled_x, pooled_y, doubling = [], [], [], 1.0
    for c in centers:
        vols = np.array([ball_volume(grid, c, r, wts) for r in radii])
        if np.any(vols <= 0):
            raise ValueError(f"empty ball around center {tuple(c)}")
        log_v = np.log(vols)
        slopes.append(np.polyfit(log_r, log_v, 1)[0])
        pooled_x.extend(log_r)
        pooled_y.extend(log_v)
        # consecutive ratios rescaled to a doubling of the radius
        for k in range(radii.size - 1):
            step = math.log(2.0) / math.log(radii[k + 1] / radii[k])
            doubling = max(doubling, (vols[k + 1] / vols[k]) ** step)

    pooled = float(np.polyfit(pooled_x, pooled_y, 1)[0])
    profile = MeasureProfile(
        doubling=float(doubling), lower=float(min(slopes)), upper=float(max(slopes)), pooled=pooled
    )
    logger.info(
        f"MEASURE_PROFILE | centers={len(centers)} | C_D={profile.doubling:.4f} "
        f"| lower={profile.lower:.4f} | upper={profile.upper:.4f}"
    )
    return profile


def sample(grid: Grid, fn: Callable[[np.ndarray], np.ndarray]) -> GridFunction:
    return GridFunction(grid, np.asarray(fn(grid.coords()), dtype=float))


def bump(grid: Grid, center: Sequence[float], radius: float) -> GridFunction:
    """Compact (1 - s^2)^4 bump; never identically zero on the grid."""
    dist = np.linalg.norm(grid.coords() - np.asarray(center, dtype=float), axis=1)
    s = dist / radius
    vals = np.where(s < 1.0, (1.0 - np.minimum(s, 1.0) ** 2) ** 4, 0.0)
    if not vals.any():
        vals[grid.nearest_node(center)] = 1.0
    return GridFunction(grid, vals)


# -----------------------------
# SERIALIZATION
# -----------------------------

def save_grid_function(path: Union[str, Path], f: GridFunction) -> Path:
    path = Path(path)
    g = f.grid
    if path.suffix == ".bin":
        header = np.array([(_BIN_MAGIC, g.n, g.L, g.h, g.size)], dtype=_BIN_HEADER)
        with open(path, "wb") as fh:
            fh.write(header.tobytes())
            fh.write(f.values.astype("<f8").tobytes())
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("n,L,h\n")
            fh.write(f"{g.n},{g.L!r},{g.h!r}\n")
            np.savetxt(fh, f.values, fmt="%.17g")
    return path


def load_grid_function(path: Union[str, Path]) -> GridFunction:
    path = Path(path)
    if path.suffix == ".bin":
        raw = path.read_bytes()
        header = np.frombuffer(raw[: _BIN_HEADER.itemsize], dtype=_BIN_HEADER)[0]
        if header["magic"] != _BIN_MAGIC:
            raise ValueError(f"{path} is not a grid-function file")
        grid = Grid(int(header["n"]), float(header["L"]), float(header["h"]))
        vals = np.frombuffer(raw[_BIN_HEADER.itemsize:], dtype="<f8")
        if vals.size != int(header["count"]):
            raise ValueError(f"{path}: truncated value block")
        return GridFunction(grid, vals.astype(float))

    with open(path, "r", encoding="utf-8") as fh:
        fh.readline()
        n, L, h = fh.readline().strip().split(",")
        vals = np.loadtxt(fh, dtype=float, ndmin=1)
    return GridFunction(Grid(int(n), float(L), float(h)), vals)
