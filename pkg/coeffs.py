"""
Coefficient fields for RieszLab.

Matrix fields A(x) (symmetric, uniformly elliptic) and weights w(x), the conic
counterexample family, strip/compact perturbations, the mollified tiling
construction with its rescaling limit, and the (GD) decay checker.

Every field is a pure, vectorized rule: (k, n) points -> (k, n, n) matrices
(or (k,) weights). Constructors spot-check ellipticity on a fixed quasi-random
sample so a bad field fails at construction, not deep inside a solver.
"""
import logging
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import null_space
from scipy.stats import qmc

logger = logging.getLogger(__name__)

SPOT_CHECK_POINTS = 1000
_CHUNK = 4096


# -----------------------------
# FIELD TYPES
# -----------------------------

def _spot_points(n: int, radius: float, count: int = SPOT_CHECK_POINTS) -> np.ndarray:
    unit = qmc.Halton(d=n, scramble=False).random(count)
    return (2.0 * unit - 1.0) * radius


class MatrixField:
    """x -> symmetric n x n matrix with declared ellipticity constants (c_ell, C_ell)."""

    def __init__(
        self,
        n: int,
        rule: Callable[[np.ndarray], np.ndarray],
        c_ell: float,
        C_ell: float,
        name: str = "field",
        sample_radius: float = 4.0,
        singular_distance: Optional[Callable[[np.ndarray], np.ndarray]] = None,
        check: bool = True,
    ):
        if not (0 < c_ell <= C_ell):
            raise ValueError(f"invalid ellipticity constants ({c_ell}, {C_ell})")
        self.n = n
        self.rule = rule
        self.c_ell = float(c_ell)
        self.C_ell = float(C_ell)
        self.name = name
        self.sample_radius = float(sample_radius)
        self._singular_distance = singular_distance
        if check:
            self.spot_check()

    def __call__(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if pts.shape[1] != self.n:
            raise ValueError(f"{self.name}: expected {self.n}-d points, got {pts.shape[1]}")
        if pts.shape[0] <= _CHUNK:
            return self.rule(pts)
        return np.concatenate(
            [self.rule(pts[i:i + _CHUNK]) for i in range(0, pts.shape[0], _CHUNK)]
        )

    def at(self, x: Sequence[float]) -> np.ndarray:
        return self(np.asarray(x, dtype=float)[None, :])[0]

    def singular_distance(self, points: np.ndarray) -> np.ndarray:
        """Distance to the coefficient singularity (the origin unless the field says otherwise)."""
        pts = np.atleast_2d(points)
        if self._singular_distance is None:
            return np.linalg.norm(pts, axis=1)
        return self._singular_distance(pts)

    def spot_check(self, count: int = SPOT_CHECK_POINTS) -> None:
        pts = _spot_points(self.n, self.sample_radius, count)
        mats = self(pts)
        scale = max(1.0, float(np.abs(mats).max()))
        asym = float(np.abs(mats - np.swapaxes(mats, 1, 2)).max())
        if asym > 1e-12 * scale:
            raise ValueError(f"{self.name}: not symmetric (max asymmetry {asym:.3e})")
        eig = np.linalg.eigvalsh(mats)
        lo, hi = float(eig.min()), float(eig.max())
        if lo < self.c_ell * (1 - 1e-9) - 1e-12 or hi > self.C_ell * (1 + 1e-9) + 1e-12:
            raise ValueError(
                f"{self.name}: ellipticity spot-check failed, eigenvalues in [{lo:.6g}, {hi:.6g}] "
                f"outside declared [{self.c_ell:.6g}, {self.C_ell:.6g}]"
            )


class WeightField:
    """
    x -> positive weight, optionally with a comparability constant C to a partner
    weight (the unit weight when no partner is given): C^-1 w <= w0 <= C w.
    """

    def __init__(
        self,
        n: int,
        rule: Callable[[np.ndarray], np.ndarray],
        name: str = "weight",
        comparability: Optional[float] = None,
        sample_radius: float = 4.0,
        check: bool = True,
        partner: Optional["WeightField"] = None,
    ):
        self.n = n
        self.rule = rule
        self.name = name
        self.comparability = comparability
        self.partner = partner
        self.sample_radius = float(sample_radius)
        if comparability is not None and comparability < 1:
            raise ValueError(f"{self.name}: comparability constant must be >= 1, got {comparability}")
        if check:
            pts = _spot_points(n, self.sample_radius)
            vals = self(pts)
            if not np.all(vals > 0):
                raise ValueError(f"{self.name}: weight must be strictly positive on samples")
            if comparability is not None:
                measured = self.comparability_to(partner, pts)
                if measured > comparability * (1 + 1e-9):
                    raise ValueError(
                        f"{self.name}: sampled comparability {measured:.6g} exceeds declared {comparability:.6g}"
                    )

    def __call__(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return np.asarray(self.rule(pts), dtype=float)

    def comparability_to(self, other: Optional["WeightField"] = None, points: Optional[np.ndarray] = None) -> float:
        """Smallest C with C^-1 w <= other <= C w on the points (unit weight when other is None)."""
        pts = _spot_points(self.n, self.sample_radius) if points is None else np.atleast_2d(points)
        vals = self(pts)
        base = np.ones(len(pts)) if other is None else other(pts)
        ratio = vals / base
        return float(max(ratio.max(), 1.0 / ratio.min()))


def unit_weight(n: int) -> WeightField:
    return WeightField(n, lambda x: np.ones(x.shape[0]), name="unit", comparability=1.0)


def power_weight(a: float, n: int) -> WeightField:
    """w(x) = |x|^a, an A_2 weight for -n < a < n."""
    if not (-n < a < n):
        raise ValueError(f"|x|^{a} is not an A_2 weight in dimension {n}")

    def rule(x):
        r = np.linalg.norm(x, axis=1)
        with np.errstate(divide="ignore"):
            return r ** a

    return WeightField(n, rule, name=f"power{{a={a}}}")


# -----------------------------
# BASIC FIELDS
# -----------------------------

def constant_field(matrix: np.ndarray, name: str = "constant") -> MatrixField:
    mat = np.asarray(matrix, dtype=float)
    eig = np.linalg.eigvalsh(mat)
    return MatrixField(
        mat.shape[0],
        lambda x: np.broadcast_to(mat, (x.shape[0],) + mat.shape).copy(),
        float(eig.min()),
        float(eig.max()),
        name=name,
    )


def identity_field(n: int) -> MatrixField:
    return constant_field(np.eye(n), name="identity")


def scaled_identity(n: int, c: float) -> MatrixField:
    if c <= 0:
        raise ValueError(f"scale must be positive, got {c}")
    return constant_field(c * np.eye(n), name=f"scaled_identity{{c={c}}}")


# -----------------------------
# CONIC FAMILY
# -----------------------------

def _planar_conic_block(x1: np.ndarray, x2: np.ndarray, beta: float) -> np.ndarray:
    """beta(beta+2)/rho^2 * [[x2^2, -x1x2], [-x1x2, x1^2]], zero where rho = 0."""
    rho2 = x1 ** 2 + x2 ** 2
    k = beta * (beta + 2.0)
    safe = np.where(rho2 > 0, rho2, 1.0)
    coef = np.where(rho2 > 0, k / safe, 0.0)
    block = np.empty(x1.shape + (2, 2))
    block[:, 0, 0] = coef * x2 ** 2
    block[:, 0, 1] = -coef * x1 * x2
    block[:, 1, 0] = -coef * x1 * x2
    block[:, 1, 1] = coef * x1 ** 2
    return block


def meyer_conic(beta: float) -> MatrixField:
    if beta <= -1:
        raise ValueError(f"degenerate: beta must exceed -1, got {beta}")
    lam = (1.0 + beta) ** 2

    def rule(x):
        out = np.broadcast_to(np.eye(2), (x.shape[0], 2, 2)).copy()
        return out + _planar_conic_block(x[:, 0], x[:, 1], beta)

    return MatrixField(2, rule, min(1.0, lam), max(1.0, lam), name=f"meyer_conic{{beta={beta}}}")


def conic_nd(lam: float, N: int) -> MatrixField:
    """Radial eigenvalue 1, tangential eigenvalue lam; A(0) = I."""
    if lam <= 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    if N not in (2, 3):
        raise ValueError(f"dimension must be 2 or 3, got {N}")

    def rule(x):
        r2 = np.sum(x ** 2, axis=1)
        safe = np.where(r2 > 0, r2, 1.0)
        proj = np.einsum("ki,kj->kij", x, x) / safe[:, None, None]
        out = lam * np.eye(N) + (1.0 - lam) * proj
        out[r2 == 0] = np.eye(N)
        return out

    return MatrixField(N, rule, min(1.0, lam), max(1.0, lam), name=f"conic_nd{{lambda={lam},N={N}}}")


def beta_from_lambda(lam: float, N: int) -> float:
    if lam <= 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    return -N / 2.0 + math.sqrt((N / 2.0 - 1.0) ** 2 + lam * (N - 1))


def critical_p(beta: float, N: int, variant: str = "full") -> float:
    if not (-1 < beta < 0):
        raise ValueError(f"no blow-up predicted for beta={beta} outside (-1, 0)")
    if variant == "full":
        return N / abs(beta)
    if variant == "partial":
        return 2.0 / abs(beta)
    raise ValueError(f"unknown variant {variant!r}, expected 'full' or 'partial'")


def critical_p_lambda(lam: float, N: int) -> float:
    return critical_p(beta_from_lambda(lam, N), N, "full")


def partial_conic(beta: float, N: int) -> MatrixField:
    """Planar conic block in (x1, x2), identity in the remaining coordinates."""
    if N == 2:
        return meyer_conic(beta)
    if N < 2:
        raise ValueError(f"dimension must be at least 2, got {N}")
    if not (-1 < beta < 0):
        raise ValueError(f"beta must lie in (-1, 0), got {beta}")
    lam = (1.0 + beta) ** 2

    def rule(x):
        out = np.broadcast_to(np.eye(N), (x.shape[0], N, N)).copy()
        out[:, :2, :2] += _planar_conic_block(x[:, 0], x[:, 1], beta)
        return out

    return MatrixField(
        N, rule, min(1.0, lam), max(1.0, lam),
        name=f"partial_conic{{beta={beta},N={N}}}",
        singular_distance=lambda x: np.hypot(x[:, 0], x[:, 1]),
    )


def conic_eigenframe(field: MatrixField, x: Sequence[float]) -> Tuple[float, np.ndarray]:
    """(<A u, u>, eigenvalues of A on u-perp) for u = x/|x|."""
    x = np.asarray(x, dtype=float)
    norm = np.linalg.norm(x)
    if norm == 0:
        raise ValueError("eigenframe undefined at the origin")
    u = x / norm
    mat = field.at(x)
    basis = null_space(u[None, :])
    return float(u @ mat @ u), np.linalg.eigvalsh(basis.T @ mat @ basis)


def quasi_isometry_constant(A: MatrixField, A0: MatrixField, points: np.ndarray) -> float:
    """Smallest C with C^-1 <A0 xi, xi> <= <A xi, xi> <= C <A0 xi, xi> on the sample."""
    a = A(points)
    chol = np.linalg.cholesky(A0(points))
    left = np.linalg.solve(chol, a)
    sym = np.linalg.solve(chol, np.swapaxes(left, 1, 2))
    eig = np.linalg.eigvalsh(0.5 * (sym + np.swapaxes(sym, 1, 2)))
    return float(max(eig.max(), 1.0 / eig.min()))


# -----------------------------
# PERTURBATIONS
# -----------------------------

def _check_pair(A0: MatrixField, Apert: MatrixField) -> None:
    if A0.n != Apert.n:
        raise ValueError(f"dimension mismatch: {A0.n} vs {Apert.n}")


def strip_perturbation(A0: MatrixField, Apert: MatrixField) -> MatrixField:
    """Apert on the strip 0 <= x_n <= 1, A0 elsewhere."""
    _check_pair(A0, Apert)

    def rule(x):
        out = A0(x)
        inside = (x[:, -1] >= 0.0) & (x[:, -1] <= 1.0)
        if inside.any():
            out[inside] = Apert(x[inside])
        return out

    return MatrixField(
        A0.n, rule, min(A0.c_ell, Apert.c_ell), max(A0.C_ell, Apert.C_ell),
        name=f"strip[{Apert.name}|{A0.name}]",
        sample_radius=max(A0.sample_radius, Apert.sample_radius),
    )


def compact_perturbation(A0: MatrixField, Apert: MatrixField, R0: float) -> MatrixField:
    """Apert inside B(0, R0), A0 outside."""
    _check_pair(A0, Apert)
    if R0 <= 0:
        raise ValueError(f"R0 must be positive, got {R0}")

    def rule(x):
        out = A0(x)
        inside = np.linalg.norm(x, axis=1) < R0
        if inside.any():
            out[inside] = Apert(x[inside])
        return out

    return MatrixField(
        A0.n, rule, min(A0.c_ell, Apert.c_ell), max(A0.C_ell, Apert.C_ell),
        name=f"compact[{Apert.name}|{A0.name},R0={R0}]",
        sample_radius=max(A0.sample_radius, Apert.sample_radius, 2.0 * R0),
    )


# -----------------------------
# MOLLIFIER / TILING / RESCALING
# -----------------------------

def mollifier_rule(n: int, order: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Nodes in B(0,1) and weights of psi ~ (1-|y|^2)^4, normalized to unit mass."""
    order = order or (16 if n == 2 else 8)
    gx, gw = np.polynomial.legendre.leggauss(order)
    mesh = np.meshgrid(*([gx] * n), indexing="ij")
    nodes = np.stack([m.ravel() for m in mesh], axis=1)
    wmesh = np.meshgrid(*([gw] * n), indexing="ij")
    weights = np.prod(np.stack([m.ravel() for m in wmesh], axis=1), axis=1)
    r2 = np.sum(nodes ** 2, axis=1)
    inside = r2 < 1.0
    psi = (1.0 - r2[inside]) ** 4
    weights = weights[inside] * psi
    return nodes[inside], weights / weights.sum()


def mollify(field: MatrixField, scale: float, order: Optional[int] = None) -> MatrixField:
    if scale <= 0:
        raise ValueError(f"mollifier scale must be positive, got {scale}")
    nodes, weights = mollifier_rule(field.n, order)
    offsets = scale * nodes
    n, J = field.n, weights.size

    def rule(x):
        shifted = (x[:, None, :] - offsets[None, :, :]).reshape(-1, n)
        vals = field(shifted).reshape(x.shape[0], J, n, n)
        return np.einsum("j,kjab->kab", weights, vals)

    return MatrixField(
        n, rule, field.c_ell, field.C_ell,
        name=f"mollified[{field.name},{scale}]",
        sample_radius=field.sample_radius,
        singular_distance=field._singular_distance,
    )


@dataclass(frozen=True)
class RadiiSchedule:
    radii: Tuple[float, ...]

    def __post_init__(self):
        radii = tuple(float(r) for r in self.radii)
        object.__setattr__(self, "radii", radii)
        if not radii:
            raise ValueError("schedule needs at least one radius")
        if radii[0] <= 1:
            raise ValueError(f"r_1 > 1 violated: r_1 = {radii[0]}")
        for k in range(len(radii)):
            r = radii[k]
            if not r < r * r:
                raise ValueError(f"r_k < r_k^2 violated at k={k + 1}: {r}")
            if k + 1 < len(radii):
                nxt = radii[k + 1]
                bound = math.sqrt(nxt) - 1.0
                if not 2.0 * r * r < bound:
                    raise ValueError(
                        f"2*r_k^2 < sqrt(r_(k+1)) - 1 violated at k={k + 1}: "
                        f"{2.0 * r * r:g} >= {bound:.4g}"
                    )

    def annuli(self) -> List[Tuple[float, float, float]]:
        """(inner, outer, r_k): annulus k is sqrt(r_k)-1 <= |x| < 2 r_k^2."""
        return [(math.sqrt(r) - 1.0, 2.0 * r * r, r) for r in self.radii]

    def disjoint(self) -> bool:
        ann = self.annuli()
        return all(ann[k][1] < ann[k + 1][0] for k in range(len(ann) - 1))


def build_tiled(
    A: MatrixField,
    radii: RadiiSchedule,
    mollifier_scale: float,
    max_annuli: Optional[int] = 2,
) -> MatrixField:
    """A(x/r_k) on annulus k, identity elsewhere, then mollified."""
    if not isinstance(radii, RadiiSchedule):
        radii = RadiiSchedule(tuple(radii))
    annuli = radii.annuli()[:max_annuli] if max_annuli else radii.annuli()
    n = A.n

    def rule(x):
        out = np.broadcast_to(np.eye(n), (x.shape[0], n, n)).copy()
        r = np.linalg.norm(x, axis=1)
        for inner, outer, rk in annuli:
            hit = (r >= inner) & (r < outer)
            if hit.any():
                out[hit] = A(x[hit] / rk)
        return out

    tiled = MatrixField(
        n, rule, min(A.c_ell, 1.0), max(A.C_ell, 1.0),
        name=f"tiled_raw[{A.name}]",
        sample_radius=annuli[-1][1] * 1.1,
    )
    logger.info(
        f"TILED | base={A.name} | radii={list(radii.radii)} | annuli={len(annuli)} "
        f"| moll={mollifier_scale}"
    )
    out = mollify(tiled, mollifier_scale)
    out.name = f"tiled[{A.name},radii={list(radii.radii)},moll={mollifier_scale}]"
    return out


def rescale(field: MatrixField, s: float) -> MatrixField:
    if s <= 0:
        raise ValueError(f"scale factor must be positive, got {s}")
    if s == 1:
        return field
    return MatrixField(
        field.n, lambda x: field(s * x), field.c_ell, field.C_ell,
        name=f"rescaled[{field.name},{s}]",
        sample_radius=field.sample_radius / s,
    )


# -----------------------------
# POWER-LAW FITS
# -----------------------------

@dataclass(frozen=True)
class DecayFit:
    """values ~ amplitude * x^(-exponent); growth = -exponent."""
    amplitude: float
    exponent: float
    residual: float
    x_range: Tuple[float, float]
    infinite_decay: bool = False
    samples: Tuple[Tuple[float, float], ...] = ()

    def __post_init__(self):
        if self.residual < 0:
            raise ValueError("residual must be non-negative")
        if not self.infinite_decay and not math.isfinite(self.exponent):
            raise ValueError("finite fit with non-finite exponent")

    @property
    def growth(self) -> float:
        return -self.exponent

    def as_dict(self) -> Dict:
        return {
            "amplitude": self.amplitude,
            "exponent": self.exponent,
            "residual": self.residual,
            "x_range": list(self.x_range),
            "infinite_decay": self.infinite_decay,
        }


def fit_power_law(x: Sequence[float], y: Sequence[float]) -> DecayFit:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size != y.size or x.size < 2:
        raise ValueError("need at least 2 paired samples")
    if np.any(x <= 0):
        raise ValueError("abscissae must be positive")
    samples = tuple(zip(x.tolist(), y.tolist()))
    x_range = (float(x.min()), float(x.max()))
    if np.all(y == 0):
        return DecayFit(0.0, math.inf, 0.0, x_range, infinite_decay=True, samples=samples)
    if np.any(y <= 0) or not np.all(np.isfinite(y)):
        raise ValueError("power-law fit needs positive finite values")
    slope, intercept = np.polyfit(np.log(x), np.log(y), 1)
    resid = np.log(y) - (intercept + slope * np.log(x))
    return DecayFit(
        amplitude=float(math.exp(intercept)),
        exponent=float(-slope),
        residual=float(np.sqrt(np.mean(resid ** 2))),
        x_range=x_range,
        samples=samples,
    )


# -----------------------------
# (GD) DECAY
# -----------------------------

def _ball_lattice(center: np.ndarray, r: float, res: int) -> np.ndarray:
    """Cell-centred lattice of spacing r/res clipped to the open ball."""
    hq = r / res
    axis = (np.arange(-res, res) + 0.5) * hq
    mesh = np.meshgrid(*([axis] * center.size), indexing="ij")
    offsets = np.stack([m.ravel() for m in mesh], axis=1)
    offsets = offsets[np.linalg.norm(offsets, axis=1) < r]
    return center + offsets


def _default_resolution(n: int) -> int:
    return 256 if n == 2 else 24


def _gd_profile(
    integrand: Callable[[np.ndarray], np.ndarray],
    weight: Optional[WeightField],
    n: int,
    centers: Sequence[Sequence[float]],
    radii: Sequence[float],
    resolution: Optional[int],
    threads: int,
) -> np.ndarray:
    res = resolution or _default_resolution(n)
    centers = [np.asarray(c, dtype=float) for c in centers]

    def per_center(c):
        out = []
        for r in radii:
            pts = _ball_lattice(c, r, res)
            wts = np.ones(pts.shape[0]) if weight is None else weight(pts)
            vals = np.concatenate(
                [integrand(pts[i:i + _CHUNK]) for i in range(0, pts.shape[0], _CHUNK)]
            )
            out.append(float(np.sum(vals * wts) / np.sum(wts)))
        return out

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        table = np.array(list(pool.map(per_center, centers)))
    # max over centers, reduced in index order
    return table.max(axis=0)


def _check_gd_radii(radii: Sequence[float]) -> np.ndarray:
    radii = np.asarray(radii, dtype=float)
    if np.any(radii <= 1):
        raise ValueError("condition is scale-restricted to r > 1")
    if radii.size < 3:
        raise ValueError("gd_decay needs at least 3 radii")
    return radii


def _fit_profile(radii: np.ndarray, D: np.ndarray) -> DecayFit:
    if np.all(D == 0):
        return fit_power_law(radii, D)
    keep = D > 0
    if keep.sum() < 2:
        raise ValueError("too few radii with a non-zero average to fit a decay")
    if not keep.all():
        logger.warning(f"GD_FIT | dropped_zero_radii={radii[~keep].tolist()}")
    return fit_power_law(radii[keep], D[keep])


def gd_decay(
    A: MatrixField,
    A0: MatrixField,
    centers: Sequence[Sequence[float]],
    radii: Sequence[float],
    w0: Optional[WeightField] = None,
    resolution: Optional[int] = None,
    threads: int = 1,
) -> DecayFit:
    """Fit D(r) = max_y avg_{B(y,r)} |A - A0|_F ~ C r^(-eps)."""
    _check_pair(A0, A)
    radii = _check_gd_radii(radii)

    def frob(pts):
        return np.linalg.norm(A(pts) - A0(pts), axis=(1, 2))

    D = _gd_profile(frob, w0, A.n, centers, radii, resolution, threads)
    fit = _fit_profile(radii, D)
    logger.info(
        f"GD_DECAY | A={A.name} | A0={A0.name} | eps={fit.exponent:.4f} "
        f"| residual={fit.residual:.4f} | infinite={fit.infinite_decay}"
    )
    return fit


def weighted_gd_decay(
    A: MatrixField,
    A0: MatrixField,
    w: WeightField,
    w0: WeightField,
    centers: Sequence[Sequence[float]],
    radii: Sequence[float],
    resolution: Optional[int] = None,
    threads: int = 1,
) -> Dict[str, DecayFit]:
    """Joint and separate decay fits of |A - A0| and |w0 - w| / w0, averaged against w0."""
    _check_pair(A0, A)
    radii = _check_gd_radii(radii)

    def matrix_part(pts):
        return np.linalg.norm(A(pts) - A0(pts), axis=(1, 2))

    def weight_part(pts):
        base = w0(pts)
        return np.abs(base - w(pts)) / base

    parts = {
        "matrix": matrix_part,
        "weight": weight_part,
        "joint": lambda pts: matrix_part(pts) + weight_part(pts),
    }
    return {
        key: _fit_profile(radii, _gd_profile(fn, w0, A.n, centers, radii, resolution, threads))
        for key, fn in parts.items()
    }


# -----------------------------
# FIELD-SPEC GRAMMAR
# -----------------------------

_SPEC_RE = re.compile(r"^\s*([A-Za-z_][\w\-]*)\s*(?:\{(.*)\})?\s*$")


def _parse_scalar(token: str):
    token = token.strip()
    try:
        return int(token)
    except ValueError:
        pass
    try:
        return float(token)
    except ValueError:
        return token


def parse_field_spec(spec: str) -> Tuple[str, Dict[str, object]]:
    """'name{k=v,k=[a,b]}' -> ('name', {'k': v, ...})."""
    match = _SPEC_RE.match(spec)
    if not match:
        raise ValueError(f"malformed field spec {spec!r}")
    name, body = match.group(1), match.group(2)
    params: Dict[str, object] = {}
    if not body or not body.strip():
        return name, params

    parts, depth, current = [], 0, ""
    for ch in body:
        if ch == "[":
            depth += 1
        elif ch == "]":
            depth -= 1
        if ch == "," and depth == 0:
            parts.append(current)
            current = ""
        else:
            current += ch
    parts.append(current)

    for part in parts:
        if "=" not in part:
            raise ValueError(f"malformed parameter {part!r} in {spec!r}")
        key, value = (s.strip() for s in part.split("=", 1))
        if value.startswith("[") and value.endswith("]"):
            inner = value[1:-1].strip()
            params[key] = [_parse_scalar(v) for v in inner.split(",")] if inner else []
        else:
            params[key] = _parse_scalar(value)
    return name, params


def _build_named(name: str, params: Dict[str, object], n: int) -> MatrixField:
    p = dict(params)
    moll = p.pop("moll", None)

    if name == "identity":
        field = identity_field(n)
    elif name == "scaled_identity":
        field = scaled_identity(n, float(p.pop("c")))
    elif name == "meyer_conic":
        if n != 2:
            raise ValueError("meyer_conic is planar (n = 2)")
        field = meyer_conic(float(p.pop("beta")))
    elif name == "conic_nd":
        field = conic_nd(float(p.pop("lambda")), int(p.pop("N", n)))
    elif name == "partial_conic":
        field = partial_conic(float(p.pop("beta")), int(p.pop("N", n)))
    elif name == "strip":
        field = strip_perturbation(identity_field(n), scaled_identity(n, float(p.pop("inside", 2.0))))
    elif name == "compact":
        field = compact_perturbation(
            identity_field(n), scaled_identity(n, float(p.pop("inside", 2.0))), float(p.pop("R0", 1.0))
        )
    elif name == "bump":
        amp = float(p.pop("amp", 1.0))
        field = compact_perturbation(identity_field(n), scaled_identity(n, 1.0 + amp), float(p.pop("R0", 1.0)))
        moll = moll if moll is not None else 0.25
    elif name in ("tiled", "rescaled"):
        base = str(p.pop("base"))
        radii = p.pop("radii", None)
        s = p.pop("s", None)
        inner_moll = p.pop("inner_moll", None)
        base_params = dict(p)
        if inner_moll is not None:
            base_params["moll"] = inner_moll
        p = {}
        field = _build_named(base, base_params, n)
        if name == "tiled":
            if radii is None:
                raise ValueError("tiled needs radii=[...]")
            field = build_tiled(field, RadiiSchedule(tuple(radii)), float(moll if moll is not None else 1.0))
            moll = None
        else:
            field = rescale(field, float(s if s is not None else 1.0))
    else:
        raise ValueError(f"unknown field id {name!r}")

    if p:
        raise ValueError(f"unused parameters for {name!r}: {sorted(p)}")
    if moll is not None:
        field = mollify(field, float(moll))
    return field


def build_field(spec: str, n: int) -> MatrixField:
    name, params = parse_field_spec(spec)
    field = _build_named(name, params, n)
    field.name = spec.strip()
    return field


def build_weight(spec: Optional[str], n: int) -> Optional[WeightField]:
    """None / 'unit' -> None (unit weight); 'power{a=0.3}' -> |x|^0.3."""
    if spec is None or spec.strip() in ("", "unit"):
        return None
    name, params = parse_field_spec(spec)
    if name == "power":
        return power_weight(float(params.get("a", 0.3)), n)
    raise ValueError(f"unknown weight id {name!r}")
