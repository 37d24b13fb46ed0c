"""
RieszLab experiment harness.

Flat TOML experiment configs -> registered experiment -> CSV rows + JSON report.

CLI:
    python harness.py run experiments/conic_unbounded.toml [--out DIR] [--threads N] [--seed S]
    python harness.py list
    python harness.py validate experiments/conic_unbounded.toml

Exit codes: 0 pass, 1 verdict fail, 2 usage/config error, 3 internal error.
"""
import argparse
import logging
import math
import os
import sys
import time
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Callable, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import toml
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError
from scipy.stats import qmc

from analysis import (
    NormConfig,
    mesh_axis,
    appendix_suite,
    heat_kernel_probe,
    poincare_constant,
    perturbation_decay,
    resolvent_gradient_decay,
    rh_ratio,
    riesz_norm_samples,
    split_piece_decay,
)
from coeffs import (
    MatrixField,
    RadiiSchedule,
    build_field,
    build_weight,
    fit_power_law,
    gd_decay,
    rescale,
    weighted_gd_decay,
)
from discretize import DiscreteOperator, assemble
from funcalc import SolverConfig, solver_iterations
from grid import Grid, sample

logger = logging.getLogger(__name__)

CONFIG_PATH = Path(__file__).resolve().parent / "utils" / "config.toml"

CSV_COLUMNS = [
    "experiment", "field_id", "n", "L", "h", "p", "t", "r",
    "quantity", "value", "witness_norm", "solver_iters",
]


class ConfigError(ValueError):
    pass


# -----------------------------
# SETTINGS / LOGGING
# -----------------------------

def load_settings(path: Path = CONFIG_PATH) -> dict:
    """Repository-wide defaults from utils/config.toml (created when missing)."""
    path = Path(path)
    if not path.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
        default = {
            "solver": SolverConfig().model_dump(),
            "norm": NormConfig().model_dump(),
            "output": {"dir": "results"},
        }
        with open(path, "w", encoding="utf-8") as f:
            toml.dump(default, f)

    settings = toml.load(path)
    for section in ("solver", "norm", "output"):
        settings.setdefault(section, {})
    settings["output"].setdefault("dir", "results")
    return settings


def configure_logging() -> None:
    load_dotenv()
    log_path = os.getenv("RIESZLAB_LOG", "rieszlab.log")
    level = getattr(logging, os.getenv("RIESZLAB_LOG_LEVEL", "INFO").upper(), logging.INFO)
    logging.basicConfig(
        filename=log_path,
        level=level,
        format="%(asctime)s - %(levelname)s - %(message)s",
    )


# -----------------------------
# CONFIG / REPORT MODELS
# -----------------------------

class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    experiment: str
    field: str = "identity"
    field0: str = "identity"
    weight: str = "unit"
    weight0: Optional[str] = None
    n: int = Field(2, ge=2, le=3)
    L: List[float] = Field(default_factory=lambda: [1.0], min_length=1)
    h: List[float] = Field(default_factory=lambda: [0.0625], min_length=1)
    p: List[float] = Field(default_factory=lambda: [2.0], min_length=1)
    t: List[float] = Field(default_factory=list)
    r: List[float] = Field(default_factory=list)
    centers: List[List[float]] = Field(default_factory=list)
    y: Optional[List[float]] = None
    seed: int = 0
    out: Optional[str] = None
    threads: int = Field(1, ge=1)

    # solver / estimator overrides of utils/config.toml
    cg_tol: Optional[float] = Field(None, gt=0, lt=1)
    quad_nodes: Optional[int] = Field(None, ge=4)
    dense_cap: Optional[int] = Field(None, ge=1)
    restarts: Optional[int] = Field(None, ge=8)
    norm_max_iter: Optional[int] = Field(None, ge=1)
    gd_resolution: Optional[int] = Field(None, ge=8)
    gd_field: Optional[str] = None
    strip_field: Optional[str] = None
    strip_centers: List[List[float]] = Field(default_factory=list)

    # experiment parameters
    beta: float = -0.5
    trace: Literal["harmonic", "affine"] = "harmonic"
    p_critical: Optional[float] = None
    decay_L: Optional[float] = None
    decay_h: Optional[float] = None
    eps: Optional[float] = None
    p0: Optional[float] = None
    split_pieces: bool = False
    invalid_radii: List[float] = Field(default_factory=lambda: [2.0, 50.0])
    rescale_s: float = Field(100.0, gt=0)
    annulus: List[float] = Field(default_factory=lambda: [0.7071067811865476, 2.0], min_length=2, max_length=2)
    samples: int = Field(200, ge=1)

    # thresholds
    growth_min: float = 0.10
    ratio_max: float = 1.5
    rh_tol: float = 0.10
    rh_ratio_max: float = 1.3
    eps_expected: Optional[float] = None
    eps_tol: float = 0.15
    strip_eps_expected: Optional[float] = 1.0
    tiled_tol: float = 0.05
    eig_slack: float = 0.05
    decay_min: float = 0.5
    residual_max: float = 0.2
    bare_slack: float = 0.05
    a1_tol: float = 1e-8
    nu_expected: Optional[float] = 0.5
    nu_tol: float = 0.05
    nu_slack: float = 0.05
    c_range: List[float] = Field(default_factory=lambda: [0.20, 0.26], min_length=2, max_length=2)
    c_factor: float = 4.0
    mass_tol: float = 1e-6
    pi_range: List[float] = Field(default_factory=lambda: [0.45, 0.60], min_length=2, max_length=2)
    pi_max: float = 2.0
    pi_spread: float = 1.6


class Verdict(BaseModel):
    name: str
    value: Optional[float] = None
    threshold: str
    passed: bool


class ExperimentReport(BaseModel):
    experiment: str
    config: dict
    rows: List[dict]
    fits: Dict[str, dict]
    verdicts: List[Verdict]
    passed: bool
    wall_clock_seconds: float
    solver_iters: int
    warnings: List[str] = Field(default_factory=list)


# -----------------------------
# RUN CONTEXT
# -----------------------------

@dataclass
class RunContext:
    cfg: ExperimentConfig
    solver: SolverConfig
    norm: NormConfig
    rows: List[dict] = dc_field(default_factory=list)
    fits: Dict[str, dict] = dc_field(default_factory=dict)
    verdicts: List[Verdict] = dc_field(default_factory=list)
    warnings: List[str] = dc_field(default_factory=list)
    failed: bool = False
    _fields: Dict[str, MatrixField] = dc_field(default_factory=dict)
    _ops: Dict[tuple, DiscreteOperator] = dc_field(default_factory=dict)

    def field(self, spec: str) -> MatrixField:
        if spec not in self._fields:
            self._fields[spec] = build_field(spec, self.cfg.n)
        return self._fields[spec]

    def weight(self, reference: bool = False):
        spec = self.cfg.weight0 if reference and self.cfg.weight0 is not None else self.cfg.weight
        return build_weight(spec, self.cfg.n)

    def operator(self, spec: str, L: float, h: float, reference: bool = False) -> DiscreteOperator:
        key = (spec, reference, L, h)
        if key not in self._ops:
            self._ops[key] = assemble(Grid(self.cfg.n, L, h), self.field(spec), self.weight(reference))
        return self._ops[key]

    def meshes(self) -> List[Tuple[float, float]]:
        Ls, hs = self.cfg.L, self.cfg.h
        if len(Ls) == 1:
            return [(Ls[0], h) for h in hs]
        if len(hs) == 1:
            return [(L, hs[0]) for L in Ls]
        if len(Ls) != len(hs):
            raise ConfigError("L and h lists must have equal length when both have several entries")
        return list(zip(Ls, hs))

    def row(self, quantity: str, value, field_id: str = "", L="", h="", p="", t="", r="",
            witness_norm="", solver_iters="") -> None:
        self.rows.append({
            "experiment": self.cfg.experiment, "field_id": field_id, "n": self.cfg.n,
            "L": L, "h": h, "p": p, "t": t, "r": r, "quantity": quantity,
            "value": "" if value is None else value,
            "witness_norm": witness_norm, "solver_iters": solver_iters,
        })

    def verdict(self, name: str, value: Optional[float], threshold: str, passed: bool) -> None:
        ok = bool(passed) and value is not None and not (isinstance(value, float) and math.isnan(value))
        self.verdicts.append(Verdict(name=name, value=value, threshold=threshold, passed=ok))

    def attempt(self, name: str, fn: Callable, **dims):
        """Run one sample; failures become a '<name>_failed' row and fail the experiment."""
        try:
            return fn()
        except Exception as exc:
            logger.error(f"SAMPLE_FAIL | experiment={self.cfg.experiment} | sample={name} | err={exc}")
            self.warnings.append(f"{name}: {exc}")
            self.row(f"{name}_failed", None, **dims)
            self.failed = True
            return None


# -----------------------------
# REGISTRY
# -----------------------------

REGISTRY: Dict[str, Callable[[RunContext], None]] = {}


def experiment(name: str):
    def register(fn):
        if name in REGISTRY:
            raise ValueError(f"duplicate experiment id {name!r}")
        REGISTRY[name] = fn
        return fn
    return register


def registry() -> List[str]:
    return list(REGISTRY)


# -----------------------------
# SHARED EXPERIMENT BODIES
# -----------------------------

def _riesz_curves(ctx: RunContext, spec: str, ps: Sequence[float]) -> Dict[float, List[Optional[float]]]:
    A, w = ctx.field(spec), ctx.weight()
    curves = {}
    for p in ps:
        norms = []
        for L, h in ctx.meshes():
            dims = dict(field_id=spec, L=L, h=h, p=p)
            s = ctx.attempt(
                "riesz_norm",
                lambda: riesz_norm_samples(A, w, p, [(L, h)], ctx.solver, ctx.norm)[0],
                **dims,
            )
            if s is not None:
                ctx.row("riesz_norm", s.estimate.norm, witness_norm=s.estimate.witness_norm,
                        solver_iters=s.solver_iters, **dims)
                print(f"   📊 p={p} L={L} h={h}: ||grad L^-1/2|| >= {s.estimate.norm:.5g}")
            norms.append(None if s is None else s.estimate.norm)
        curves[p] = norms
    return curves


def _riesz_verdicts(ctx: RunContext, spec: str, curves: Dict[float, List[Optional[float]]]) -> None:
    x, axis = mesh_axis(ctx.meshes())
    p_crit = ctx.cfg.p_critical
    for p, norms in curves.items():
        if any(v is None for v in norms):
            ctx.verdict(f"riesz_p{p}_complete", None, "all mesh samples succeed", False)
            continue
        fit = fit_power_law(x, norms)
        ratio = norms[-1] / norms[0]
        ctx.fits[f"riesz_p{p}"] = fit.as_dict()
        ctx.row("growth_exponent", fit.growth, field_id=spec, p=p)
        ctx.row("last_first_ratio", ratio, field_id=spec, p=p)
        if p_crit is not None and p > p_crit:
            ctx.verdict(f"riesz_p{p}_growth", fit.growth, f">= {ctx.cfg.growth_min} vs {axis}",
                        fit.growth >= ctx.cfg.growth_min)
        else:
            ctx.verdict(f"riesz_p{p}_ratio", ratio, f"<= {ctx.cfg.ratio_max}", ratio <= ctx.cfg.ratio_max)


def _gd_body(
    ctx: RunContext,
    weighted: bool,
    spec: Optional[str] = None,
    centers: Optional[List[List[float]]] = None,
    expected: Optional[float] = None,
    label: str = "gd",
) -> None:
    cfg = ctx.cfg
    spec = spec or cfg.gd_field or cfg.field
    expected = cfg.eps_expected if label == "gd" else expected
    A, A0 = ctx.field(spec), ctx.field(cfg.field0)
    centers = centers or cfg.centers or [[0.0] * cfg.n]
    if weighted:
        w, w0 = ctx.weight(), ctx.weight(reference=True)
        fits = ctx.attempt(
            f"{label}_weighted",
            lambda: weighted_gd_decay(A, A0, w, w0, centers, cfg.r, cfg.gd_resolution, cfg.threads),
            field_id=spec,
        )
        if fits is None:
            return
        for key, fit in fits.items():
            ctx.fits[f"{label}_{key}"] = fit.as_dict()
        fit = fits["joint"]
    else:
        fit = ctx.attempt(
            label,
            lambda: gd_decay(A, A0, centers, cfg.r, ctx.weight(reference=True), cfg.gd_resolution, cfg.threads),
            field_id=spec,
        )
        if fit is None:
            return
        ctx.fits[label] = fit.as_dict()

    for r, D in fit.samples:
        ctx.row(f"{label}_average", D, field_id=spec, r=r)
    ctx.row(f"{label}_exponent", fit.exponent, field_id=spec)
    ctx.row(f"{label}_residual", fit.residual, field_id=spec)
    if expected is not None:
        ctx.verdict(f"{label}_exponent", fit.exponent, f"{expected} +/- {cfg.eps_tol}",
                    abs(fit.exponent - expected) <= cfg.eps_tol)
    if label != "gd":
        return

    same = ctx.attempt("gd_identical", lambda: gd_decay(A0, A0, centers, cfg.r, None, 16), field_id=cfg.field0)
    if same is not None:
        ctx.row("gd_identical_infinite", float(same.infinite_decay), field_id=cfg.field0)
        ctx.verdict("gd_identical_infinite", float(same.infinite_decay), "infinite-decay flag", same.infinite_decay)


def _resolvent_body(ctx: RunContext, ps: Sequence[float]) -> None:
    cfg = ctx.cfg
    L = cfg.decay_L if cfg.decay_L is not None else cfg.L[0]
    h = cfg.decay_h if cfg.decay_h is not None else cfg.h[0]
    op = ctx.operator(cfg.field, L, h)
    op0 = ctx.operator(cfg.field0, L, h, reference=True)
    for p in ps:
        dims = dict(field_id=cfg.field, L=L, h=h, p=p)
        bare = ctx.attempt("bare_decay", lambda: resolvent_gradient_decay(op0, p, cfg.t, ctx.solver, ctx.norm), **dims)
        pert = ctx.attempt(
            "perturbation_decay",
            lambda: perturbation_decay(op, op0, p, cfg.t, ctx.solver, ctx.norm, cfg.eps, cfg.p0),
            **dims,
        )
        if bare is not None:
            ctx.fits[f"bare_p{p}"] = bare.as_dict()
            for t, v in bare.samples:
                ctx.row("bare_norm", v, t=t, **dict(dims, field_id=cfg.field0))
        if pert is None:
            continue
        ctx.fits[f"perturbation_p{p}"] = pert.fit.as_dict()
        for t, v in zip(cfg.t, pert.norms):
            ctx.row("perturbation_norm", v, t=t, solver_iters=solver_iterations(op), **dims)
        ctx.row("perturbation_exponent", pert.fit.exponent, **dims)
        if pert.predicted_alpha is not None:
            ctx.row("predicted_alpha", pert.predicted_alpha, **dims)
        ctx.verdict(f"perturbation_p{p}_exponent", pert.fit.exponent, f">= {cfg.decay_min}",
                    pert.fit.exponent >= cfg.decay_min)
        ctx.verdict(f"perturbation_p{p}_residual", pert.fit.residual, f"<= {cfg.residual_max}",
                    pert.fit.residual <= cfg.residual_max)
        if bare is not None:
            ctx.verdict(f"perturbation_p{p}_beats_bare", pert.fit.exponent,
                        f"> bare {bare.exponent:.4f} - {cfg.bare_slack}",
                        pert.fit.exponent > bare.exponent - cfg.bare_slack)

        if cfg.split_pieces:
            pieces = ctx.attempt("split_pieces", lambda: split_piece_decay(op, op0, p, cfg.t, ctx.solver, ctx.norm), **dims)
            for name, fit in (pieces or {}).items():
                if fit is not None:
                    ctx.fits[f"split_{name}_p{p}"] = fit.as_dict()
                    ctx.row(f"split_{name}_exponent", fit.exponent, **dims)


# -----------------------------
# EXPERIMENTS
# -----------------------------

@experiment("conic-unbounded")
def conic_unbounded(ctx: RunContext) -> None:
    _riesz_verdicts(ctx, ctx.cfg.field, _riesz_curves(ctx, ctx.cfg.field, ctx.cfg.p))


@experiment("partial-conic-unbounded")
def partial_conic_unbounded(ctx: RunContext) -> None:
    _riesz_verdicts(ctx, ctx.cfg.field, _riesz_curves(ctx, ctx.cfg.field, ctx.cfg.p))


@experiment("smooth-tiled")
def smooth_tiled(ctx: RunContext) -> None:
    cfg = ctx.cfg
    tiled, base = ctx.field(cfg.field), ctx.field(cfg.field0)
    ctx.row("schedule_valid", 1.0, field_id=cfg.field)

    try:
        RadiiSchedule(tuple(cfg.invalid_radii))
        rejected = False
    except ValueError as exc:
        rejected = True
        logger.info(f"SCHEDULE_REJECTED | radii={cfg.invalid_radii} | reason={exc}")
    ctx.row("invalid_schedule_rejected", float(rejected), field_id=cfg.field)
    ctx.verdict("invalid_schedule_rejected", float(rejected), f"{cfg.invalid_radii} raises", rejected)

    unit = qmc.Halton(d=2, scramble=False).random(cfg.samples)
    r_lo, r_hi = cfg.annulus
    radius = r_lo + (r_hi - r_lo) * unit[:, 0]
    angle = 2.0 * math.pi * unit[:, 1]
    pts = np.zeros((cfg.samples, cfg.n))
    pts[:, 0], pts[:, 1] = radius * np.cos(angle), radius * np.sin(angle)

    diff = float(np.abs(rescale(tiled, cfg.rescale_s)(pts) - base(pts)).max())
    ctx.row("rescale_max_diff", diff, field_id=cfg.field, r=cfg.rescale_s)
    ctx.verdict("rescale_max_diff", diff, f"<= {cfg.tiled_tol}", diff <= cfg.tiled_tol)

    # eigenvalues over the whole construction, annuli included
    scales = (1.0, 4.0, 10.0, cfg.rescale_s, cfg.rescale_s ** 2)
    scaled_pts = np.concatenate([pts * s for s in scales])
    eig = np.linalg.eigvalsh(tiled(scaled_pts))
    lo, hi = float(eig.min()), float(eig.max())
    ctx.row("eig_min", lo, field_id=cfg.field)
    ctx.row("eig_max", hi, field_id=cfg.field)
    ctx.verdict("eig_range", lo, f"[{base.c_ell} - {cfg.eig_slack}, {base.C_ell} + {cfg.eig_slack}]",
                lo >= base.c_ell - cfg.eig_slack and hi <= base.C_ell + cfg.eig_slack)


@experiment("gd-stability")
def gd_stability(ctx: RunContext) -> None:
    _riesz_verdicts(ctx, ctx.cfg.field, _riesz_curves(ctx, ctx.cfg.field, ctx.cfg.p))


@experiment("strip-gd")
def strip_gd(ctx: RunContext) -> None:
    _gd_body(ctx, weighted=False)


@experiment("compact-gd")
def compact_gd(ctx: RunContext) -> None:
    _gd_body(ctx, weighted=False)


@experiment("resolvent-decay")
def resolvent_decay(ctx: RunContext) -> None:
    _resolvent_body(ctx, ctx.cfg.p)


@experiment("appendix-lemmas")
def appendix_lemmas(ctx: RunContext) -> None:
    cfg = ctx.cfg
    L, h = ctx.meshes()[0]
    t_list = cfg.t or [2.0, 4.0, 8.0, 16.0]
    for spec, reference in ((cfg.field0, True), (cfg.field, False)):
        if not reference and spec == cfg.field0:
            continue
        op = ctx.operator(spec, L, h, reference)
        for p in cfg.p:
            dims = dict(field_id=spec, L=L, h=h, p=p)
            rep = ctx.attempt(
                "appendix",
                lambda: appendix_suite(op, p, ctx.solver, ctx.norm, t_list, cfg.nu_slack, cfg.a1_tol),
                **dims,
            )
            if rep is None:
                continue
            for check in rep.checks:
                ctx.row(check.name, check.value, **dims)
                if check.asserted:
                    ctx.verdict(f"{spec}:{check.name}", check.value, f"threshold {check.threshold:.6g}", check.passed)
            ctx.row("lemma_integral", rep.integral[1], **dims)
            ctx.row("nu", rep.nu.exponent, **dims)
            ctx.row("nu_half", rep.nu_half.exponent, **dims)
            ctx.fits[f"{spec}:nu_p{p}"] = rep.nu.as_dict()
            ctx.fits[f"{spec}:nu_half_p{p}"] = rep.nu_half.as_dict()
            if reference and cfg.nu_expected is not None:
                for name, fit in (("nu", rep.nu), ("nu_half", rep.nu_half)):
                    ctx.verdict(f"{spec}:{name}_p{p}", fit.exponent, f"{cfg.nu_expected} +/- {cfg.nu_tol}",
                                abs(fit.exponent - cfg.nu_expected) <= cfg.nu_tol)


@experiment("heat-kernel-bounds")
def heat_kernel_bounds(ctx: RunContext) -> None:
    cfg = ctx.cfg
    L, h = ctx.meshes()[0]
    y = cfg.y or [0.0] * cfg.n
    for spec, reference in ((cfg.field0, True), (cfg.field, False)):
        op = ctx.operator(spec, L, h, reference)
        dims = dict(field_id=spec, L=L, h=h)
        fit = ctx.attempt("heat_kernel", lambda: heat_kernel_probe(op, y, cfg.t, ctx.solver), **dims)
        if fit is None:
            continue
        ctx.warnings.extend(fit.warnings)
        ctx.fits[f"kernel:{spec}"] = {
            "C": fit.C, "c": fit.c, "C_lower": fit.C_lower, "c_lower": fit.c_lower,
            "residual_upper": fit.residual_upper, "residual_lower": fit.residual_lower, "gamma": fit.gamma,
        }
        for name in ("C", "c", "C_lower", "c_lower"):
            ctx.row(name, getattr(fit, name), **dims)
        for t, mass, gly in zip(fit.times, fit.masses, fit.gly_constants):
            ctx.row("kernel_mass", mass, t=t, **dims)
            ctx.row("gly_constant", gly, t=t, **dims)

        spread = max(fit.c, fit.c_lower) / min(fit.c, fit.c_lower)
        ctx.verdict(f"{spec}:c_spread", spread, f"<= {cfg.c_factor}", spread <= cfg.c_factor)
        if reference:
            lo, hi = cfg.c_range
            ctx.verdict(f"{spec}:c", fit.c, f"in [{lo}, {hi}]", lo <= fit.c <= hi)
        for t, leak in zip(fit.times, fit.leaks):
            ctx.row("boundary_leak", leak, t=t, **dims)
        if op.is_m_matrix:
            # mass leaves only through the Dirichlet boundary
            excess = max(abs(m - 1.0) - leak for m, leak in zip(fit.masses, fit.leaks))
            ctx.verdict(f"{spec}:mass", excess, f"|mass - 1| - boundary leak <= {cfg.mass_tol}", excess <= cfg.mass_tol)


def _trace_function(cfg: ExperimentConfig) -> Callable[[np.ndarray], np.ndarray]:
    if cfg.trace == "affine":
        return lambda x: x[:, 0].copy()
    beta = cfg.beta

    def harmonic(x):
        r = np.linalg.norm(x, axis=1)
        out = np.zeros(x.shape[0])
        nz = r > 0
        out[nz] = r[nz] ** beta * x[nz, 0]
        return out

    return harmonic


@experiment("rh-probe")
def reverse_hoelder(ctx: RunContext) -> None:
    cfg = ctx.cfg
    center = cfg.centers[0] if cfg.centers else [0.0] * cfg.n
    radius = cfg.r[0] if cfg.r else 0.5
    trace = _trace_function(cfg)
    meshes = ctx.meshes()
    x, axis = mesh_axis(meshes)
    for p in cfg.p:
        rhos = []
        for L, h in meshes:
            op = ctx.operator(cfg.field, L, h)
            dims = dict(field_id=cfg.field, L=L, h=h, p=p, r=radius)
            rho = ctx.attempt("rh_ratio", lambda: rh_ratio(op, center, radius, sample(op.grid, trace), p, ctx.solver), **dims)
            if rho is not None:
                ctx.row("rh_ratio", rho, **dims)
            rhos.append(rho)
        if any(v is None for v in rhos):
            ctx.verdict(f"rh_p{p}_complete", None, "all mesh samples succeed", False)
            continue
        fit = fit_power_law(x, rhos)
        ctx.fits[f"rh_p{p}"] = fit.as_dict()
        ctx.row("rh_growth", fit.growth, field_id=cfg.field, p=p)
        if cfg.p_critical is not None and p > cfg.p_critical:
            expected = abs(cfg.beta) - 2.0 / p
            ctx.verdict(f"rh_p{p}_growth", fit.growth, f"{expected:.4f} +/- {cfg.rh_tol} vs {axis}",
                        abs(fit.growth - expected) <= cfg.rh_tol)
        else:
            worst = max(b / a for a, b in zip(rhos[:-1], rhos[1:]))
            ctx.verdict(f"rh_p{p}_bounded", worst, f"successive ratio <= {cfg.rh_ratio_max}",
                        worst <= cfg.rh_ratio_max)


@experiment("weighted-degenerate")
def weighted_degenerate(ctx: RunContext) -> None:
    _gd_body(ctx, weighted=True)
    if ctx.cfg.strip_field is not None:
        _gd_body(ctx, weighted=True, spec=ctx.cfg.strip_field, centers=ctx.cfg.strip_centers,
                 expected=ctx.cfg.strip_eps_expected, label="gd_strip")
    _riesz_verdicts(ctx, ctx.cfg.field, _riesz_curves(ctx, ctx.cfg.field, ctx.cfg.p))
    _resolvent_body(ctx, ctx.cfg.p[:1])


@experiment("poincare-balls")
def poincare_balls(ctx: RunContext) -> None:
    cfg = ctx.cfg
    L, h = ctx.meshes()[0]
    centers = cfg.centers or [[0.0] * cfg.n]
    radii = cfg.r or [1.0, 2.0]
    cases = [(cfg.field0, "unit"), (cfg.field, "unit")]
    if cfg.weight != "unit":
        cases.append((cfg.field0, cfg.weight))
    for spec, wspec in dict.fromkeys(cases):
        key = (spec, wspec, L, h)
        if key not in ctx._ops:
            ctx._ops[key] = assemble(Grid(cfg.n, L, h), ctx.field(spec), build_weight(wspec, cfg.n))
        op = ctx._ops[key]
        label = spec if wspec == "unit" else f"{spec}+{wspec}"
        found = []
        for c in centers:
            per_center = []
            for r in radii:
                C = ctx.attempt("poincare", lambda: poincare_constant(op, c, r), field_id=label, L=L, h=h, r=r)
                if C is None:
                    continue
                ctx.row("poincare_constant", C, field_id=label, L=L, h=h, r=r)
                per_center.append(C)
                if spec == cfg.field0 and wspec == "unit":
                    lo, hi = cfg.pi_range
                    ctx.verdict(f"{label}:pi_r{r}_c{tuple(c)}", C, f"in [{lo}, {hi}]", lo <= C <= hi)
            if len(per_center) > 1:
                spread = max(per_center) / min(per_center)
                ctx.row("poincare_spread", spread, field_id=label, L=L, h=h)
                ctx.verdict(f"{label}:pi_spread_c{tuple(c)}", spread, f"<= {cfg.pi_spread}", spread <= cfg.pi_spread)
            found.extend(per_center)
        if found:
            print(f"   📊 {label}: Poincare constants in [{min(found):.4g}, {max(found):.4g}]")
            ctx.verdict(f"{label}:pi_max", max(found), f"<= {cfg.pi_max}", max(found) <= cfg.pi_max)


# -----------------------------
# RUNNER
# -----------------------------

def load_config(path: Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = toml.load(path)
    except toml.TomlDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    nested = [k for k, v in raw.items() if isinstance(v, dict)]
    if nested:
        raise ConfigError(f"{path}: config must be flat, found tables {nested}")
    try:
        cfg = ExperimentConfig(**raw)
    except ValidationError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    if cfg.experiment not in REGISTRY:
        raise ConfigError(f"unknown experiment id {cfg.experiment!r}; known: {', '.join(registry())}")
    for spec in {cfg.field, cfg.field0, cfg.gd_field or cfg.field, cfg.strip_field or cfg.field}:
        try:
            build_field(spec, cfg.n)
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"unresolvable field spec {spec!r}: {exc}") from exc
    for spec in {cfg.weight, cfg.weight0 or cfg.weight}:
        try:
            build_weight(spec, cfg.n)
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"unresolvable weight spec {spec!r}: {exc}") from exc
    for L in cfg.L:
        for h in cfg.h:
            try:
                Grid(cfg.n, L, h)
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc


def _contexts(cfg: ExperimentConfig, settings: dict) -> RunContext:
    solver = dict(settings.get("solver", {}))
    solver["threads"] = cfg.threads
    for key in ("cg_tol", "quad_nodes", "dense_cap"):
        if getattr(cfg, key) is not None:
            solver[key] = getattr(cfg, key)
    norm = dict(settings.get("norm", {}))
    norm.update(seed=cfg.seed, threads=cfg.threads)
    if cfg.restarts is not None:
        norm["restarts"] = cfg.restarts
    if cfg.norm_max_iter is not None:
        norm["max_iter"] = cfg.norm_max_iter
    return RunContext(cfg=cfg, solver=SolverConfig(**solver), norm=NormConfig(**norm))


def write_outputs(report: ExperimentReport, out_dir: Path) -> Tuple[Path, Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = report.experiment
    csv_path = out_dir / f"{stem}.csv"
    json_path = out_dir / f"{stem}.json"
    pd.DataFrame(report.rows, columns=CSV_COLUMNS).to_csv(csv_path, index=False)
    json_path.write_text(report.model_dump_json(indent=2), encoding="utf-8")
    return csv_path, json_path


def run(cfg: ExperimentConfig, settings: Optional[dict] = None, out_dir: Optional[Path] = None) -> ExperimentReport:
    settings = settings if settings is not None else load_settings()
    validate(cfg)
    ctx = _contexts(cfg, settings)
    logger.info(f"EXPERIMENT_START | id={cfg.experiment} | field={cfg.field} | seed={cfg.seed}")
    start = time.time()
    REGISTRY[cfg.experiment](ctx)
    duration = time.time() - start

    iters = sum(solver_iterations(op) for op in ctx._ops.values())
    passed = (not ctx.failed) and bool(ctx.verdicts) and all(v.passed for v in ctx.verdicts)
    report = ExperimentReport(
        experiment=cfg.experiment,
        config=cfg.model_dump(),
        rows=ctx.rows,
        fits=ctx.fits,
        verdicts=ctx.verdicts,
        passed=passed,
        wall_clock_seconds=round(duration, 4),
        solver_iters=iters,
        warnings=ctx.warnings,
    )
    out = Path(out_dir or cfg.out or settings["output"]["dir"])
    csv_path, json_path = write_outputs(report, out)
    logger.info(
        f"EXPERIMENT_END | id={cfg.experiment} | passed={passed} | time={duration:.2f}s "
        f"| csv={csv_path} | json={json_path}"
    )
    return report


def _print_report(report: ExperimentReport) -> None:
    print(f"\n📊 {report.experiment} ({report.wall_clock_seconds:.1f}s, {report.solver_iters} CG iterations)")
    for v in report.verdicts:
        value = "n/a" if v.value is None else f"{v.value:.6g}"
        print(("✅" if v.passed else "❌"), v.name, "|", value, "|", v.threshold)
    for w in report.warnings:
        print("⚠️ ", w)
    print("\nRESULT:", "PASS ✅" if report.passed else "FAIL ❌")


def main(argv: Optional[Sequence[str]] = None) -> int:
    configure_logging()
    parser = argparse.ArgumentParser(prog="harness", description="RieszLab experiment runner")
    sub = parser.add_subparsers(dest="command", required=True)
    run_p = sub.add_parser("run", help="run one experiment config")
    run_p.add_argument("config")
    run_p.add_argument("--out", default=None)
    run_p.add_argument("--threads", type=int, default=None)
    run_p.add_argument("--seed", type=int, default=None)
    sub.add_parser("list", help="print the experiment registry")
    val_p = sub.add_parser("validate", help="check a config without running it")
    val_p.add_argument("config")
    args = parser.parse_args(argv)

    if args.command == "list":
        for name in registry():
            print(name)
        return 0

    try:
        settings = load_settings()
        cfg = load_config(Path(args.config))
        if args.command == "validate":
            print(f"✅ {args.config}: valid ({cfg.experiment})")
            return 0
        updates = {k: v for k, v in (("threads", args.threads), ("seed", args.seed)) if v is not None}
        if updates:
            cfg = cfg.model_copy(update=updates)
        print(f"🔧 Running {cfg.experiment} ...", flush=True)
        report = run(cfg, settings, Path(args.out) if args.out else None)
    except ConfigError as exc:
        logger.error(f"CONFIG_ERROR | err={exc}")
        print(f"❌ Config error: {exc}")
        return 2
    except Exception as exc:
        logger.exception(f"INTERNAL_ERROR | err={exc}")
        print(f"❌ Internal error: {exc}")
        return 3

    _print_report(report)
    return 0 if report.passed else 1


if __name__ == "__main__":
    sys.exit(main())
