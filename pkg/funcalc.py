"""
Functional calculus on a DiscreteOperator: resolvents, the heat semigroup,
(shift + L)^(-1/2) by quadrature, Riesz / local Riesz transforms and the
resolvent-difference operators.

Solves go through the dense oracle when it exists (and cfg.prefer_dense),
otherwise through Jacobi-preconditioned CG on (s M + t K) u = M f.
"""
import logging
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import scipy.sparse as sp
from pydantic import BaseModel, Field
from scipy.sparse.linalg import cg

from discretize import DenseSpectrum, DiscreteOperator, dense_spectral, gradient, stiffness_from, vertex_field
from grid import GridFunction, VectorGridFunction

logger = logging.getLogger(__name__)

_STATS_LOCK = threading.Lock()


class SolverConfig(BaseModel):
    cg_tol: float = Field(1e-10, gt=0, lt=1)
    max_iter: int = Field(20000, ge=1)
    quad_target: float = Field(1e-6, gt=0, lt=1)
    quad_nodes: int = Field(16, ge=4)
    heat_target: float = Field(1e-3, gt=0, lt=1)
    heat_max_steps: int = Field(4096, ge=1)
    dense_cap: int = Field(3000, ge=1)
    prefer_dense: bool = True
    identity_tol: float = Field(1e-8, gt=0, lt=1)
    threads: int = Field(1, ge=1)


class SolverError(RuntimeError):
    def __init__(self, message: str, iterations: int = 0, residual: float = float("nan"), tolerance: float = float("nan")):
        super().__init__(message)
        self.iterations = iterations
        self.residual = residual
        self.tolerance = tolerance


class IdentityError(SolverError):
    pass


def solver_iterations(op: DiscreteOperator) -> int:
    """Total CG iterations spent on op so far."""
    return op._cache.get("cg_iters", 0)


def _record(op: DiscreteOperator, iters: int) -> None:
    with _STATS_LOCK:
        op._cache["cg_iters"] = op._cache.get("cg_iters", 0) + iters


def _dense(op: DiscreteOperator, cfg: SolverConfig) -> Optional[DenseSpectrum]:
    if cfg.prefer_dense and op.size <= cfg.dense_cap:
        return dense_spectral(op, cfg.dense_cap)
    return None


def _spectral_apply(spec: DenseSpectrum, op: DiscreteOperator, values: np.ndarray, f: np.ndarray) -> np.ndarray:
    """V diag(values) V^T M f."""
    return spec.vectors @ (values * (spec.vectors.T @ (op.mass * f)))


# -----------------------------
# RESOLVENT
# -----------------------------

def _cg_solve(op: DiscreteOperator, s: float, t: float, f: np.ndarray, cfg: SolverConfig) -> np.ndarray:
    system = (t * op.stiffness + sp.diags(s * op.mass)).tocsr()
    rhs = op.mass * f
    if not np.any(rhs):
        return np.zeros_like(f)
    jacobi = sp.diags(1.0 / system.diagonal())
    count = [0]

    def tick(_):
        count[0] += 1

    u, info = cg(system, rhs, rtol=cfg.cg_tol, maxiter=cfg.max_iter, M=jacobi, callback=tick)
    _record(op, count[0])
    if info != 0:
        residual = float(np.linalg.norm(system @ u - rhs) / np.linalg.norm(rhs))
        logger.error(f"CG_FAIL | s={s} | t={t} | iters={count[0]} | rel_res={residual:.3e}")
        raise SolverError(
            f"CG did not converge: {count[0]} iterations, relative residual {residual:.3e} "
            f"> tolerance {cfg.cg_tol:.1e}",
            iterations=count[0], residual=residual, tolerance=cfg.cg_tol,
        )
    return u


def _solve(op: DiscreteOperator, s: float, t: float, f: np.ndarray, cfg: SolverConfig) -> np.ndarray:
    """(s + tL)^(-1) f for s >= 0, t >= 0, s + t > 0."""
    if t == 0:
        return f / s
    spec = _dense(op, cfg)
    if spec is not None:
        return _spectral_apply(spec, op, 1.0 / (s + t * spec.eigenvalues), f)
    return _cg_solve(op, s, t, f, cfg)


def resolvent(op: DiscreteOperator, s: float, t: float, f: GridFunction, cfg: Optional[SolverConfig] = None) -> GridFunction:
    cfg = cfg or SolverConfig()
    if s <= 0:
        raise ValueError(f"s must be positive, got {s}")
    if t < 0:
        raise ValueError(f"t must be non-negative, got {t}")
    return GridFunction(op.grid, _solve(op, s, t, f.values, cfg))


def resolvent_adjoint(
    op: DiscreteOperator, s: float, t: float, g: GridFunction, mass: np.ndarray, cfg: Optional[SolverConfig] = None
) -> GridFunction:
    """Adjoint of (s + tL)^(-1) in the pairing sum(mass * f * g)."""
    cfg = cfg or SolverConfig()
    ratio = op.mass / mass
    inner = resolvent(op, s, t, GridFunction(op.grid, g.values / ratio), cfg)
    return GridFunction(op.grid, ratio * inner.values)


# -----------------------------
# HEAT
# -----------------------------

def euler_steps(lam_min: float, lam_max: float, t: float, target: float, cap: int) -> int:
    """Smallest power-of-two m with sup |(1 + x/m)^(-m) - e^(-x)| <= target on [t lam_min, t lam_max]."""
    xs = np.unique(np.concatenate([
        np.geomspace(max(t * lam_min, 1e-12), t * lam_max, 400),
        [t * lam_min, t * lam_max, 2.0],
    ]))
    xs = xs[(xs >= t * lam_min) & (xs <= t * lam_max)]
    m = 1
    while m <= cap:
        err = np.max(np.abs((1.0 + xs / m) ** (-m) - np.exp(-xs)))
        if err <= target:
            return m
        m *= 2
    raise SolverError(
        f"backward Euler needs more than {cap} substeps for target {target:.1e}",
        iterations=cap, residual=float(err), tolerance=target,
    )


def heat(op: DiscreteOperator, t: float, f: GridFunction, cfg: Optional[SolverConfig] = None) -> GridFunction:
    cfg = cfg or SolverConfig()
    if t < 0:
        raise ValueError(f"t must be non-negative, got {t}")
    if t == 0:
        return f
    spec = _dense(op, cfg)
    if spec is not None:
        return GridFunction(op.grid, _spectral_apply(spec, op, np.exp(-t * spec.eigenvalues), f.values))

    lam_min, lam_max = op.spectral_bounds()
    m = euler_steps(lam_min, lam_max, t, cfg.heat_target, cfg.heat_max_steps)
    logger.info(f"HEAT_EULER | t={t} | substeps={m}")
    u = f.values
    for _ in range(m):
        u = _cg_solve(op, 1.0, t / m, u, cfg)
    return GridFunction(op.grid, u)


# -----------------------------
# INVERSE SQUARE ROOT
# -----------------------------

@dataclass(frozen=True)
class QuadratureRule:
    """
    x^(-1/2) ~ (2/pi) [ sum_j w_j / (1 + s_j^2 x) + head(x) + tail(x) ]
    head covers [0, s_min] by its Taylor series in x, tail covers [s_max, inf)
    by its expansion in 1/x.
    """
    nodes: np.ndarray
    weights: np.ndarray
    s_min: float
    s_max: float
    error: float

    def scalar(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        body = np.sum(self.weights / (1.0 + np.multiply.outer(x, self.nodes ** 2)), axis=-1)
        a, b = self.s_min, self.s_max
        head = a - x * a ** 3 / 3.0 + x ** 2 * a ** 5 / 5.0
        tail = 1.0 / (x * b) - 1.0 / (3.0 * x ** 2 * b ** 3) + 1.0 / (5.0 * x ** 3 * b ** 5)
        return (2.0 / math.pi) * (body + head + tail)


def _panel_rule(s_min: float, s_max: float, order: int) -> Tuple[np.ndarray, np.ndarray]:
    panels = max(1, math.ceil(math.log2(s_max / s_min)))
    edges = np.geomspace(s_min, s_max, panels + 1)
    gx, gw = np.polynomial.legendre.leggauss(order)
    lo, hi = edges[:-1, None], edges[1:, None]
    nodes = 0.5 * (hi - lo) * gx + 0.5 * (hi + lo)
    weights = 0.5 * (hi - lo) * gw
    return nodes.ravel(), weights.ravel()


def sqrt_quadrature(lam_min: float, lam_max: float, shift: float = 0.0, cfg: Optional[SolverConfig] = None) -> QuadratureRule:
    cfg = cfg or SolverConfig()
    lo, hi = lam_min + shift, lam_max + shift
    if not (lo > 0 and math.isfinite(hi)):
        raise ValueError(f"shift + lambda_min must be positive, got {lo}")
    s_min, s_max = 0.1 / math.sqrt(hi), 10.0 / math.sqrt(lo)
    sample = np.geomspace(lo, hi, 257) if hi > lo else np.array([lo])

    order = cfg.quad_nodes
    while True:
        nodes, weights = _panel_rule(s_min, s_max, order)
        rule = QuadratureRule(nodes, weights, s_min, s_max, 0.0)
        err = float(np.max(np.abs(rule.scalar(sample) * np.sqrt(sample) - 1.0)))
        if err <= cfg.quad_target:
            return QuadratureRule(nodes, weights, s_min, s_max, err)
        if order >= 128:
            raise ValueError(f"quadrature cannot reach target {cfg.quad_target:.1e} (error {err:.1e})")
        order *= 2


def inv_sqrt(op: DiscreteOperator, f: GridFunction, shift: float = 0.0, cfg: Optional[SolverConfig] = None) -> GridFunction:
    """(shift + L)^(-1/2) f."""
    cfg = cfg or SolverConfig()
    if shift < 0:
        raise ValueError(f"shift must be non-negative, got {shift}")
    spec = _dense(op, cfg)
    if spec is not None:
        lam = spec.eigenvalues + shift
        if lam[0] <= 0:
            raise ValueError("shift + lambda_min must be positive")
        return GridFunction(op.grid, _spectral_apply(spec, op, lam ** -0.5, f.values))

    lam_min, lam_max = op.spectral_bounds()
    rule = sqrt_quadrature(lam_min, lam_max, shift, cfg)
    values = f.values

    def node_solve(s):
        return _solve(op, 1.0 + s * s * shift, s * s, values, cfg)

    with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
        solves = list(pool.map(node_solve, rule.nodes))
    body = np.zeros_like(values)
    for w, u in zip(rule.weights, solves):
        body += w * u

    a, b = rule.s_min, rule.s_max

    def shifted(u):
        return op.apply(u) + shift * u

    x1 = shifted(values)
    x2 = shifted(x1)
    head = a * values - (a ** 3 / 3.0) * x1 + (a ** 5 / 5.0) * x2
    y1 = _solve(op, shift, 1.0, values, cfg)
    y2 = _solve(op, shift, 1.0, y1, cfg)
    y3 = _solve(op, shift, 1.0, y2, cfg)
    tail = y1 / b - y2 / (3.0 * b ** 3) + y3 / (5.0 * b ** 5)

    logger.info(
        f"INV_SQRT | shift={shift} | nodes={rule.nodes.size} | scalar_err={rule.error:.2e}"
    )
    return GridFunction(op.grid, (2.0 / math.pi) * (body + head + tail))


def inv_sqrt_resolvent(op: DiscreteOperator, t: float, f: GridFunction, cfg: Optional[SolverConfig] = None) -> GridFunction:
    """(1 + tL)^(-1/2) f = t^(-1/2) (1/t + L)^(-1/2) f."""
    if t < 0:
        raise ValueError(f"t must be non-negative, got {t}")
    if t == 0:
        return f
    out = inv_sqrt(op, f, 1.0 / t, cfg)
    return GridFunction(op.grid, out.values / math.sqrt(t))


def riesz(op: DiscreteOperator, f: GridFunction, cfg: Optional[SolverConfig] = None) -> VectorGridFunction:
    return gradient(op, inv_sqrt(op, f, 0.0, cfg))


def local_riesz(op: DiscreteOperator, f: GridFunction, cfg: Optional[SolverConfig] = None, shift: float = 1.0) -> VectorGridFunction:
    return gradient(op, inv_sqrt(op, f, shift, cfg))


# -----------------------------
# RESOLVENT DIFFERENCES
# -----------------------------

def _check_pair(opL: DiscreteOperator, opL0: DiscreteOperator) -> None:
    if opL.grid != opL0.grid:
        raise ValueError("operators live on different grids")


def resolvent_diff_grad(
    opL: DiscreteOperator, opL0: DiscreteOperator, t: float, f: GridFunction, cfg: Optional[SolverConfig] = None
) -> VectorGridFunction:
    """grad [(1+tL0)^(-1) - (1+tL)^(-1)] f, cross-checked against -grad t(1+tL)^(-1)(L0 - L)(1+tL0)^(-1) f."""
    cfg = cfg or SolverConfig()
    _check_pair(opL, opL0)
    if t <= 0:
        raise ValueError(f"t must be positive, got {t}")

    u0 = _solve(opL0, 1.0, t, f.values, cfg)
    u = _solve(opL, 1.0, t, f.values, cfg)
    direct = gradient(opL, GridFunction(opL.grid, u0 - u)).values

    jump = opL0.apply(u0) - opL.apply(u0)
    factored = gradient(opL, GridFunction(opL.grid, -t * _solve(opL, 1.0, t, jump, cfg))).values

    dense = _dense(opL, cfg) is not None and _dense(opL0, cfg) is not None
    tol = cfg.identity_tol if dense else max(cfg.identity_tol, math.sqrt(cfg.cg_tol))
    scale = max(
        np.linalg.norm(gradient(opL, GridFunction(opL.grid, u0)).values),
        np.linalg.norm(gradient(opL, GridFunction(opL.grid, u)).values),
        np.finfo(float).tiny,
    )
    residual = float(np.linalg.norm(direct - factored) / scale)
    if residual > tol:
        logger.error(f"IDENTITY_FAIL | t={t} | residual={residual:.3e} | tol={tol:.1e}")
        raise IdentityError(
            f"resolvent identity residual {residual:.3e} exceeds {tol:.1e}; assemblies are inconsistent",
            residual=residual, tolerance=tol,
        )
    return vertex_field(opL, factored)


def split_difference(
    opL: DiscreteOperator, opL0: DiscreteOperator, f: GridFunction
) -> Tuple[GridFunction, GridFunction]:
    """
    (L0 - L) f split as
      first  = -(1/w) K[wA - w0 A0] f     (coefficient piece)
      second = ((w - w0) / w) L0 f         (weight piece)
    """
    _check_pair(opL, opL0)
    K_diff = stiffness_from(opL, opL0.cell_coeff - opL.cell_coeff)
    first = (K_diff @ f.values) / opL.mass
    second = (opL.mass - opL0.mass) / opL.mass * opL0.apply(f.values)
    return GridFunction(opL.grid, first), GridFunction(opL.grid, second)
