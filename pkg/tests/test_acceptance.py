"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest -v tests/test_acceptance.py`` or directly with
``python3 tests/test_acceptance.py``.  Every criterion also checks its
wall-clock budget.
"""

import math
import time

import numpy as np
import pytest

from levyspde.coefficients import (Affine, CoefficientSet, SeparableTimeSpace, Spatial, TimeProfile,
                                   check_coercivity, check_partial_moment, random_admissible_set)
from levyspde.field import Field, TorusGrid
from levyspde.levy_noise import (DensityCompoundPoisson, FiniteAtoms, LevyTriplet, NoiseFamily, TimeGrid,
                                 TruncatedStableLike, first_large_jump_time, replica_seed, sample_path)
from levyspde.solver import (SolverConfig, fractional_forcing, homotopy_demo, mild_solution_oracle, picard_ratio,
                             solve_linear, solve_linear_batch, solve_localized, solve_picard)
from levyspde.verify import (check_apriori, check_levy_system, check_quadratic_variation, check_t_independence,
                             convergence_study)

MASTER_SEED = 0

# shared by the convergence and homotopy criteria
ATOMS = FiniteAtoms(((0.25, 15.0), (-0.25, 15.0)))
TRIPLET = LevyTriplet(ATOMS, beta=0.5)


def _grid(M):
    return TorusGrid(1, 2 * math.pi, M)


def _trig(grid, fn):
    return Field(grid, fn(grid.coordinates()[0]))


def _paths(source, tg, count, master=None):
    master = MASTER_SEED if master is None else master
    return [sample_path(source, tg, replica_seed(master, r)) for r in range(count)]


def _emit(number, title, ok, detail, elapsed, budget):
    verdict = "PASS" if ok and elapsed < budget else "FAIL"
    return f"[{verdict}] criterion {number:>2} {title}: {detail} ({elapsed:.1f}s of {budget:.0f}s)"


# ---------------------------------------------------------------------------
# criteria; each returns (ok, detail)


def quadratic_variation_law():
    tg = TimeGrid(1.0, 64)
    triplets = {
        "brownian": LevyTriplet(beta=1.0),
        "one-atom": LevyTriplet(FiniteAtoms(((2.0, 0.25),))),
        "two-atom": LevyTriplet(FiniteAtoms(((1.0, 2.0), (-0.5, 4.0)))),
        "cp-normal": LevyTriplet(DensityCompoundPoisson(3.0, "normal")),
        "brownian+atoms": LevyTriplet(FiniteAtoms(((0.5, 2.0), (-1.5, 1.0))), beta=0.7),
    }
    seeds = [replica_seed(MASTER_SEED, r) for r in range(10_000)]
    parts, ok = [], True
    for name, trip in triplets.items():
        rep = check_quadratic_variation(trip, tg, seeds)
        z = (rep.lhs.value - rep.rhs.value) / rep.lhs.stderr
        parts.append(f"{name} z={z:+.2f}")
        ok &= rep.verdict == "pass"
    return ok, "; ".join(parts)


def levy_system_identity():
    grid = _grid(32)
    tg = TimeGrid(1.0, 32)
    profiles = {
        "constant": Field.constant(grid, 1.0),
        "mode": _trig(grid, lambda x: np.cos(x) + 0.5 * np.sin(3 * x)),
        "time-varying": lambda t: _trig(grid, lambda x: (1.0 + t) * np.sin(2 * x) + math.cos(3 * t)),
    }
    triplets = {
        "one-atom": LevyTriplet(FiniteAtoms(((2.0, 0.25),))),
        "two-atom": LevyTriplet(FiniteAtoms(((1.0, 2.0), (-0.5, 4.0))), beta=0.5),
        "cp-normal": LevyTriplet(DensityCompoundPoisson(3.0, "normal")),
    }
    parts, ok = [], True
    for tname, trip in triplets.items():
        paths = _paths(trip, tg, 10_000)
        for gname, g in profiles.items():
            rep = check_levy_system(g, paths, 0, grid)
            z = rep.extra["mean_difference"] / rep.extra["stderr_difference"]
            parts.append(f"{tname}/{gname} z={z:+.2f}")
            ok &= rep.verdict == "pass"
    return ok, "; ".join(parts)


def _convergence_data(grid):
    u0 = _trig(grid, lambda x: np.cos(x) + 0.5 * np.sin(2 * x))
    f = _trig(grid, np.cos)
    return u0, f


def oracle_convergence():
    grid = _grid(64)
    fine = TimeGrid(1.0, 4096)
    u0, f = _convergence_data(grid)
    g = [_trig(grid, lambda x: np.sin(2 * x) + np.cos(3 * x) + 0.5 * np.sin(4 * x))]
    heat = CoefficientSet.heat(1, 1)
    paths = _paths(TRIPLET, fine, 8)
    reference = [mild_solution_oracle(u0, g, p, grid, f) for p in paths]

    def solve(coarse):
        return solve_linear_batch(SolverConfig(grid, coarse[0].grid), heat, f, g, u0, coarse)

    table = convergence_study(solve, reference, paths, [64, 128, 256])
    ok = table.order >= 0.9 and table.r_squared >= 0.98
    errs = ", ".join(f"{e:.3e}" for e in table.errors)
    return ok, f"order={table.order:.3f} (>= 0.9) R2={table.r_squared:.4f} (>= 0.98) errors=[{errs}]"


def multiplicative_self_convergence():
    grid = _grid(64)
    ladder = [64, 128, 256]
    fine = TimeGrid(1.0, 16 * ladder[-1])
    u0, f = _convergence_data(grid)
    g = [_trig(grid, lambda x: np.sin(2 * x))]
    a = Affine(Spatial(_trig(grid, np.cos)), 0.3, 1.5)
    coeffs = CoefficientSet([[a]], [0.0], [0.0], 0.0, [[0.5]], [0.2])
    admissible = check_coercivity(coeffs, [TRIPLET.weight], 0.5, 5.0, grid, fine).passed
    paths = _paths(TRIPLET, fine, 256)
    reference = solve_linear_batch(SolverConfig(grid, fine), coeffs, f, g, u0, paths)

    def solve(coarse):
        return solve_linear_batch(SolverConfig(grid, coarse[0].grid), coeffs, f, g, u0, coarse)

    table = convergence_study(solve, reference, paths, ladder)
    ok = admissible and table.order >= 0.45
    return ok, (f"order={table.order:.3f} (>= 0.45) R2={table.r_squared:.4f} admissible={admissible} "
                f"realizations=256")


def apriori_estimate():
    grid = _grid(32)
    tg = TimeGrid(1.0, 64)
    fam = NoiseFamily([LevyTriplet(beta=0.5), LevyTriplet(FiniteAtoms(((0.5, 2.0), (-0.5, 2.0))), beta=0.3)])
    w = fam.weights
    u0, f = _convergence_data(grid)
    g = [_trig(grid, lambda x: np.sin(2 * x)), _trig(grid, lambda x: 0.5 * np.cos(3 * x))]
    config = SolverConfig(grid, tg)

    # exact scale invariance on fixed noise
    rng = np.random.default_rng(2024)
    sets = [random_admissible_set(rng, grid, w, delta=0.5, K=5.0) for _ in range(20)]
    paths = _paths(fam, tg, 16)
    ratios = []
    for s in (1.0, 2.0, 4.0, 8.0):
        sols = solve_linear_batch(config, sets[0], f * s, [gk * s for gk in g], u0 * s, paths)
        ratios.append(check_apriori(sols, f * s, [gk * s for gk in g], u0 * s, w).ratio)
    spread = max(abs(r / ratios[0] - 1.0) for r in ratios)

    # fitted constant over 20 random admissible sets, two master seeds
    maxima = []
    for master in (1, 2):
        paths = _paths(fam, tg, 256, master)
        per_set = [check_apriori(solve_linear_batch(config, cs, f, g, u0, paths), f, g, u0, w).ratio for cs in sets]
        if not all(math.isfinite(r) for r in per_set):
            return False, "non-finite ratio"
        maxima.append(max(per_set))
    drift = abs(maxima[1] / maxima[0] - 1.0)
    ok = spread <= 1e-10 and drift <= 0.10
    return ok, (f"scale spread={spread:.1e} (<= 1e-10); max ratio {maxima[0]:.4f} vs {maxima[1]:.4f} "
                f"(rel. diff {drift:.3f} <= 0.10)")


def picard_contraction():
    grid = _grid(64)
    tg = TimeGrid(1.0, 128)
    trip = LevyTriplet(FiniteAtoms(((0.3, 2.0), (-0.3, 2.0))), beta=0.5)
    weights = [trip.weight]
    forcing = fractional_forcing(grid, 1.5, 0.5, weights)
    cert = forcing.check_certificate(grid, weights, np.random.default_rng(MASTER_SEED))
    u0, _ = _convergence_data(grid)
    path = sample_path(trip, tg, replica_seed(MASTER_SEED, 0))
    config = SolverConfig(grid, tg)
    heat = CoefficientSet.heat(1, 1)
    sol = solve_picard(config, heat, forcing, u0, path, tol=1e-12)
    shrink = [picard_ratio(config, heat, forcing, u0, path, W) for W in (128, 64, 32)]
    m = sol.meta
    ok = cert <= 1.0 and m["max_ratio"] <= 0.9 and m["final_distance"] <= 1e-8
    return ok, (f"max ratio={m['max_ratio']:.3f} (<= 0.9) final distance={m['final_distance']:.1e} (<= 1e-8) "
                f"window={m['picard_window']:g} K1={forcing.K1:.3f} certificate={cert:.2f} "
                f"probe ratios by window={[round(r, 3) for r in shrink]}")


def localization_consistency():
    grid = _grid(32)
    tg = TimeGrid(1.0, 64)
    fam = NoiseFamily([LevyTriplet(TruncatedStableLike(1.5, 1.0)), LevyTriplet(beta=1.0)])
    a = Affine(Spatial(_trig(grid, np.cos)), 0.3, 1.5)
    coeffs = CoefficientSet([[a]], [0.1], [0.0], -0.2, [[0.0, 0.5]], [0.0, 0.1])
    admissible = check_partial_moment(fam, coeffs, 0.5, 1, grid, tg, 5.0).passed
    u0, g = _trig(grid, np.cos), [_trig(grid, np.sin), None]
    config = SolverConfig(grid, tg)
    level = 3.0
    same_inf = quiet_same = prefix_same = 0
    quiet = jumped = 0
    differs_after = 0
    for path in _paths(fam, tg, 100):
        direct = solve_linear(config, coeffs, None, g, u0, path).values
        same_inf += np.array_equal(solve_localized(config, coeffs, None, g, u0, path, 1, math.inf).values, direct)
        local = solve_localized(config, coeffs, None, g, u0, path, 1, level).values
        T1 = first_large_jump_time(path, level, 1)
        if math.isinf(T1):
            quiet += 1
            quiet_same += np.array_equal(local, direct)
        else:
            jumped += 1
            b = tg.bin_of(T1)  # nodes 0..b lie strictly before T1
            prefix_same += np.array_equal(local[:b + 1], direct[:b + 1])
            differs_after += not np.array_equal(local[b + 1:], direct[b + 1:])
    ok = (admissible and same_inf == 100 and quiet_same == quiet and prefix_same == jumped
          and quiet > 0 and jumped > 0)
    return ok, (f"n=inf identical {same_inf}/100; no large jump identical {quiet_same}/{quiet}; "
                f"large jump prefix identical {prefix_same}/{jumped} (differ afterwards {differs_after}/{jumped})")


def coercivity_validator():
    g1, g2 = _grid(16), TorusGrid(2, 2 * math.pi, 8)
    tg = TimeGrid(1.0, 4)
    s = math.sqrt(2.0)
    cases = [
        # (name, coefficients, weights, grid, analytic delta_min, expected pass)
        ("a=2, alpha=1", CoefficientSet.from_constants([[2.0]], sigma=[[1.0]], mu=[0.0]), [2.0], g1, 1.0, True),
        ("a=alpha=1 boundary", CoefficientSet.from_constants([[1.0]], sigma=[[s]], mu=[0.0]), [1.0], g1, 0.0, False),
        ("anisotropic a", CoefficientSet.from_constants([[2.0, 0.5], [0.5, 1.0]], n_channels=0), [], g2,
         1.5 - math.sqrt(0.5), True),
        ("rank-one alpha boundary", CoefficientSet.from_constants(np.eye(2) * 2, sigma=[[1.0], [1.0]], mu=[0.0]),
         [2.0], g2, 0.0, False),
        ("a=1.5+0.6cos x, alpha=0.25",
         CoefficientSet([[Affine(Spatial(_trig(g1, np.cos)), 0.6, 1.5)]], [0], [0], 0, [[0.5]], [0]), [2.0], g1,
         0.9 - 0.25, True),
        ("a=1+0.5sin(2 pi t), alpha=0.125",
         CoefficientSet([[SeparableTimeSpace(TimeProfile(1.0, 0.5, 1.0), Field.constant(g1, 1.0))]], [0], [0], 0,
                        [[0.5]], [0]), [1.0], g1, 0.5 - 0.125, False),
    ]
    parts, ok = [], True
    for name, coeffs, w, grid, expected, should_pass in cases:
        rep = check_coercivity(coeffs, w, 0.5, 5.0, grid, tg)
        good = rep.passed is should_pass and abs(rep.delta_min - expected) <= 1e-10
        ok &= good
        parts.append(f"{name}: delta_min={rep.delta_min:.12f} {'pass' if rep.passed else 'fail'}"
                     f"{'' if good else ' WRONG'}")
    return ok, "; ".join(parts)


def horizon_independence():
    grid = _grid(32)
    fam = NoiseFamily([LevyTriplet(FiniteAtoms(((0.5, 2.0), (-0.5, 2.0))), beta=0.5)])
    coeffs = CoefficientSet.from_constants([[1.0]], sigma=[[0.5]], mu=[0.0])
    f = _trig(grid, lambda x: np.cos(2 * x))
    g = [_trig(grid, lambda x: np.sin(3 * x))]
    u0 = _trig(grid, lambda x: np.cos(2 * x) + 0.5 * np.sin(3 * x))
    runs = {}
    for T in (1.0, 2.0, 4.0):
        tg = TimeGrid(T, int(32 * T))
        sols = solve_linear_batch(SolverConfig(grid, tg), coeffs, f, g, u0, _paths(fam, tg, 200))
        runs[T] = (sols, f, g, u0)
    rep = check_t_independence(coeffs, runs, fam.weights)
    bands = ", ".join(f"T={T:g}: {r.ratio:.4f}±{r.ratio_stderr:.4f}" for T, r in rep.extra["per_T"].items())
    return rep.verdict == "pass", f"growth T=4/T=1 = {rep.ratio:.3f} (<= 1.25); {bands}"


def homotopy_contraction():
    grid = _grid(32)
    tg = TimeGrid(1.0, 64)
    a = Affine(Spatial(_trig(grid, np.cos)), 0.4, 1.6)
    coeffs = CoefficientSet([[a]], [0.2], [0.3], -0.5, [[0.4]], [0.3])
    u0, f = _convergence_data(grid)
    g = [_trig(grid, lambda x: np.sin(2 * x))]
    config = SolverConfig(grid, tg)
    path = sample_path(TRIPLET, tg, replica_seed(MASTER_SEED, 0))
    out = homotopy_demo(config, coeffs, f, g, u0, path, lam=0.1, lam0=0.0)
    ok = out["contraction"] <= 0.5 and out["direct_distance"] <= 10 * config.tol
    return ok, (f"ratio={out['contraction']:.3f} (<= 0.5) distance to direct solve={out['direct_distance']:.1e} "
                f"(<= {10 * config.tol:.0e}) iterations={out['iterations']} fitted c={out['fitted_c']:.2f}")


CRITERIA = [
    (1, "quadratic-variation law", quadratic_variation_law, 60),
    (2, "Levy-system identity", levy_system_identity, 60),
    (3, "solver vs mild-solution oracle", oracle_convergence, 60),
    (4, "multiplicative-noise self-convergence", multiplicative_self_convergence, 120),
    (5, "a priori estimate", apriori_estimate, 300),
    (6, "Picard contraction", picard_contraction, 120),
    (7, "localization consistency", localization_consistency, 120),
    (8, "coercivity validator", coercivity_validator, 10),
    (9, "horizon independence", horizon_independence, 180),
    (10, "homotopy demo", homotopy_contraction, 60),
]


def run(entry):
    number, title, fn, budget = entry
    start = time.perf_counter()
    ok, detail = fn()
    elapsed = time.perf_counter() - start
    return ok and elapsed < budget, _emit(number, title, ok, detail, elapsed, budget)


@pytest.mark.parametrize("entry", CRITERIA, ids=[f"criterion{c[0]:02d}" for c in CRITERIA])
def test_criterion(entry, capsys):
    ok, line = run(entry)
    with capsys.disabled():
        print("\n" + line)
    assert ok, line


if __name__ == "__main__":
    results = [run(entry) for entry in CRITERIA]
    for _, line in results:
        print(line)
    raise SystemExit(0 if all(ok for ok, _ in results) else 1)
