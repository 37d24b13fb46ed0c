import numpy as np

from coeffs import compact_perturbation, identity_field, meyer_conic, scaled_identity
from discretize import apply_coefficient, assemble, dense_spectral, divergence_w, gradient
from funcalc import SolverConfig, inv_sqrt, resolvent, resolvent_diff_grad, riesz, split_difference
from grid import Grid, GridFunction

GRID = Grid(2, 1.0, 1.0 / 16)
CFG = SolverConfig()
RNG = np.random.default_rng(0)

A_CONIC = meyer_conic(-0.5)
A_PERT = compact_perturbation(identity_field(2), scaled_identity(2, 2.0), 0.5)
OP_CONIC = assemble(GRID, A_CONIC)
OP_ID = assemble(GRID, identity_field(2))
OP_PERT = assemble(GRID, A_PERT)


def _random(k=20):
    return [GridFunction(GRID, RNG.standard_normal(GRID.size)) for _ in range(k)]


def resolvent_identity():
    worst = 0.0
    for f in _random(5):
        for t in (0.5, 4.0, 32.0):
            factored = resolvent_diff_grad(OP_PERT, OP_ID, t, f, CFG).values
            u0 = resolvent(OP_ID, 1.0, t, f, CFG)
            u = resolvent(OP_PERT, 1.0, t, f, CFG)
            direct = gradient(OP_PERT, GridFunction(GRID, u0.values - u.values)).values
            scale = max(np.linalg.norm(gradient(OP_PERT, u0).values), 1e-300)
            worst = max(worst, np.linalg.norm(direct - factored) / scale)
    return worst


def split_sum():
    worst = 0.0
    for f in _random():
        a, b = split_difference(OP_PERT, OP_ID, f)
        target = OP_ID.apply(f.values) - OP_PERT.apply(f.values)
        worst = max(worst, np.linalg.norm(a.values + b.values - target) / np.linalg.norm(target))
    return worst


def riesz_isometry():
    worst = 0.0
    for f in _random():
        R = riesz(OP_CONIC, f, CFG)
        flux = apply_coefficient(OP_CONIC, R).values
        weighted = float(np.sum(R.measure * np.sum(R.values * flux, axis=1)))
        worst = max(worst, abs(weighted / OP_CONIC.inner(f.values, f.values) - 1.0))
    return worst


def divergence_of_gradient():
    worst = 0.0
    for f in _random():
        lhs = -divergence_w(OP_ID, gradient(OP_ID, f)).values
        target = OP_ID.apply(f.values)
        worst = max(worst, np.linalg.norm(lhs - target) / np.linalg.norm(target))
    return worst


def quadrature_vs_oracle():
    spec = dense_spectral(OP_CONIC)
    quad_cfg = CFG.model_copy(update={"prefer_dense": False})
    worst = 0.0
    for f in _random(5):
        quad = inv_sqrt(OP_CONIC, f, 0.0, quad_cfg).values
        coeffs = spec.vectors.T @ (OP_CONIC.mass * f.values)
        exact = spec.vectors @ (coeffs / np.sqrt(spec.eigenvalues))
        worst = max(worst, OP_CONIC.norm(quad - exact) / OP_CONIC.norm(f.values))
    return worst


CHECKS = [
    ("Resolvent-difference factored identity (dense) <= 1e-8", resolvent_identity, lambda v: v <= 1e-8),
    ("Split-difference sum residual <= 1e-9", split_sum, lambda v: v <= 1e-9),
    ("p = 2 Riesz isometry defect <= 1e-4", riesz_isometry, lambda v: v <= 1e-4),
    ("-div_w grad = L_I residual <= 1e-10", divergence_of_gradient, lambda v: v <= 1e-10),
    ("Quadrature vs oracle L^-1/2 <= 1e-5", quadrature_vs_oracle, lambda v: v <= 1e-5),
]


def main():
    print("🔎 Discrete identity validation")
    ok_all = True
    for name, check, rule in CHECKS:
        try:
            value = check()
            ok = rule(value)
        except Exception as e:
            value, ok = e, False
        print(("✅" if ok else "❌"), name, "|", value)
        ok_all = ok_all and ok
    print("\nRESULT:", "PASS ✅" if ok_all else "FAIL ❌")
    raise SystemExit(0 if ok_all else 1)


if __name__ == "__main__":
    main()
