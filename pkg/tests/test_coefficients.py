import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from levyspde.coefficients import (Affine, CoefficientSet, Constant, GridSampled, LinearCombination, NoiseAdapted,
                                   SeparableTimeSpace, Spatial, TimeProfile, absorb_drift, alpha_matrix,
                                   check_boundedness, check_coercivity, check_partial_moment, lambda_homotopy,
                                   random_admissible_set, sigma_vanishes)
from levyspde.exceptions import HypothesisViolation
from levyspde.field import Field, TorusGrid
from levyspde.levy_noise import (FiniteAtoms, LevyTriplet, NoiseFamily, PathRealization, TimeGrid,
                                 TruncatedStableLike)

TG = TimeGrid(1.0, 4)


def test_alpha_single_channel():
    # beta = 1, c_hat = 1, sigma = 1
    assert alpha_matrix(np.ones((1, 1)), [2.0])[0, 0] == pytest.approx(1.0)
    assert not np.any(alpha_matrix(np.zeros((1, 1)), [2.0]))


def test_alpha_rank_one():
    np.testing.assert_allclose(alpha_matrix(np.array([[1.0], [1.0]]), [2.0]), [[1.0, 1.0], [1.0, 1.0]])


def test_alpha_infinite_weight():
    assert alpha_matrix(np.zeros((1, 1)), [math.inf])[0, 0] == 0.0
    assert math.isinf(alpha_matrix(np.ones((1, 1)), [math.inf])[0, 0])


@pytest.mark.parametrize("a, sigma, delta, delta_min, passed", [
    (2.0, 1.0, 0.5, 1.0, True),
    (1.0, 1.0, 0.5, 0.0, False),
    (1.0, 1.0, 1e-12, 0.0, False),
])
def test_coercivity_examples(grid1, a, sigma, delta, delta_min, passed):
    coeffs = CoefficientSet.from_constants([[a]], sigma=[[sigma]], n_channels=1)
    rep = check_coercivity(coeffs, [2.0], delta, 5.0, grid1, TG)
    assert rep.delta_min == pytest.approx(delta_min, abs=1e-12)
    assert rep.passed is passed


def test_coercivity_against_dense_eigenvalues(rng):
    grid = TorusGrid(2, 2 * math.pi, 8)
    # random SPD a(x) with spectrum in [1, 3]
    theta = 2 * np.pi * rng.random(grid.shape)
    lam1, lam2 = 1 + 2 * rng.random(grid.shape), 1 + 2 * rng.random(grid.shape)
    c, s = np.cos(theta), np.sin(theta)
    a = np.array([[lam1 * c * c + lam2 * s * s, (lam1 - lam2) * c * s],
                  [(lam1 - lam2) * c * s, lam1 * s * s + lam2 * c * c]])
    sigma = np.array([[0.4, 0.1], [0.2, -0.3]])
    w = np.array([1.0, 2.0])
    coeffs = CoefficientSet([[Spatial(Field(grid, a[i, j])) for j in range(2)] for i in range(2)],
                            [0, 0], [0, 0], 0, sigma.tolist(), [0, 0])
    alpha = 0.5 * (sigma * w) @ sigma.T
    assert np.linalg.norm(alpha, 2) <= 0.5
    expected = min(np.linalg.eigvalsh(a[:, :, i, j] - alpha)[0] for i in range(8) for j in range(8))
    rep = check_coercivity(coeffs, w, 0.5, 5.0, grid, TG)
    assert rep.delta_min == pytest.approx(expected, abs=1e-12)
    assert rep.delta_min >= 0.5 and rep.passed


def test_coercivity_reports_worst_time_for_time_dependent_a(grid1):
    prof = TimeProfile(2.0, 1.0, 1.0)  # 2 + sin(2 pi t)
    coeffs = CoefficientSet([[SeparableTimeSpace(prof, Field.constant(grid1, 1.0))]], [0], [0], 0, [[0]], [0])
    tg = TimeGrid(1.0, 4)
    rep = check_coercivity(coeffs, [1.0], 0.5, 5.0, grid1, tg)
    assert rep.delta_min == pytest.approx(1.0)
    assert rep.worst_time == pytest.approx(0.75)


def test_nonsymmetric_a_uses_symmetric_part(grid2, caplog):
    coeffs = CoefficientSet.from_constants([[1.0, 2.0], [0.0, 1.0]], n_channels=0)
    rep = check_coercivity(coeffs, [], 0.1, 5.0, grid2, TG)
    assert rep.delta_min == pytest.approx(0.0, abs=1e-12)
    assert "not symmetric" in caplog.text


def test_boundedness_examples(grid1):
    zero = CoefficientSet.from_constants([[0.0]], n_channels=1)
    rep = check_boundedness(zero, [1.0], 1.0, grid1, TG)
    assert rep.passed and rep.margin == pytest.approx(1.0)
    big = CoefficientSet.from_constants([[0.0]], c=2.0, n_channels=1)
    assert not check_boundedness(big, [1.0], 1.0, grid1, TG).passed


@given(st.integers(0, 2 ** 32 - 1))
def test_boundedness_matches_lattice_scan(seed):
    rng = np.random.default_rng(seed)
    grid = TorusGrid(1, 2 * math.pi, 8)
    a = 1 + rng.random(8)
    c = rng.normal(size=8)
    sig, mu = rng.normal(), rng.normal()
    coeffs = CoefficientSet([[Spatial(Field(grid, a))]], [0.3], [-0.2], Spatial(Field(grid, c)), [[sig]], [mu])
    w = 1.5
    expected = np.max(np.abs(a) + 0.3 + 0.2 + np.abs(c) + math.sqrt(w * (sig ** 2 + mu ** 2)))
    K = float(rng.uniform(1, 6))
    rep = check_boundedness(coeffs, [w], K, grid, TG)
    assert rep.max_value == pytest.approx(expected, rel=1e-14)
    assert rep.passed is bool(expected <= K)


def test_partial_moment(grid1):
    heavy = LevyTriplet(TruncatedStableLike(1.5, 1.0))
    noise = NoiseFamily([heavy, LevyTriplet(beta=1.0)])
    ok = CoefficientSet.from_constants([[2.0]], sigma=[[0.0, 1.0]], mu=[0.3, 0.1])
    assert check_partial_moment(noise, ok, 0.5, 1, grid1, TG).passed
    bad = CoefficientSet.from_constants([[2.0]], sigma=[[0.1, 1.0]], mu=[0.0, 0.0])
    with pytest.raises(HypothesisViolation):
        check_partial_moment(noise, bad, 0.5, 1, grid1, TG)
    assert not sigma_vanishes(bad, 1, grid1, TG)


def test_partial_moment_with_no_exemptions_is_coercivity(grid1):
    noise = NoiseFamily([LevyTriplet(FiniteAtoms(((1.0, 1.0),)), beta=1.0)])
    coeffs = CoefficientSet.from_constants([[1.5]], sigma=[[0.5]], mu=[0.0])
    a = check_partial_moment(noise, coeffs, 0.5, 0, grid1, TG)
    b = check_coercivity(coeffs, noise.weights, 0.5, math.inf, grid1, TG)
    assert a.delta_min == b.delta_min and a.passed == b.passed


def test_homotopy_endpoints(grid2):
    coeffs = CoefficientSet.from_constants([[2.0, 0.1], [0.1, 3.0]], bbar=[1, 2], b=[3, 4], c=5,
                                           sigma=[[1.0], [0.5]], mu=[0.7])
    assert lambda_homotopy(coeffs, 1.0) is coeffs
    ev = lambda_homotopy(coeffs, 0.0).evaluate(grid2)
    np.testing.assert_array_equal(ev.a[:, :, 0, 0], np.eye(2))
    for arr in (ev.bbar, ev.b, ev.c, ev.sigma, ev.mu):
        assert not np.any(arr)
    with pytest.raises(ValueError):
        lambda_homotopy(coeffs, 1.5)


@given(st.floats(0.01, 0.99))
def test_homotopy_is_affine_in_lambda(lam):
    grid = TorusGrid(1, 2 * math.pi, 8)
    coeffs = CoefficientSet.from_constants([[2.0]], bbar=[1.0], b=[3.0], c=5.0, sigma=[[1.0]], mu=[0.7])
    ev, full = lambda_homotopy(coeffs, lam).evaluate(grid), coeffs.evaluate(grid)
    np.testing.assert_allclose(ev.a, lam * full.a + (1 - lam), rtol=1e-15)
    np.testing.assert_allclose(ev.sigma, lam * full.sigma, rtol=1e-15)
    np.testing.assert_allclose(ev.c, lam * full.c, rtol=1e-15)


def test_noise_adapted_sees_only_the_past(grid1):
    tg = TimeGrid(1.0, 4)
    p = PathRealization.from_events(tg, [LevyTriplet()], jumps=[(0.6, 0.5, 0)])
    coef = NoiseAdapted("clipped-noise-level", {"base": 1.0, "scale": 1.0, "clip": 0.3})
    vals = [float(np.asarray(coef.evaluate(grid1, n, n * tg.dt, p))) for n in range(5)]
    # the jump lies in bin 2 = (0.5, 0.75]; it is visible from node 3 on
    assert vals == [1.0, 1.0, 1.0, 1.3, 1.3]
    assert coef.bounds() == (0.7, 1.3)
    assert coef.path_dependent and not coef.time_invariant
    with pytest.raises(ValueError):
        coef.evaluate(grid1, 0, 0.0, None)
    with pytest.raises(ValueError):
        NoiseAdapted("no-such-functional", {})


def test_grid_sampled_is_indexed_by_time_node(grid1):
    vals = np.stack([np.full(grid1.shape, float(n)) for n in range(3)])
    coef = GridSampled(vals)
    assert float(coef.evaluate(grid1, 2, 0.5)[0]) == 2.0
    with pytest.raises(ValueError):
        GridSampled(np.ones(grid1.shape)).evaluate(grid1, 0, 0.0)


def test_composite_fields(grid1):
    prof = Spatial(Field.mode(grid1, [1]))
    aff = Affine(prof, 0.5, 2.0)
    np.testing.assert_allclose(aff.evaluate(grid1, 0, 0.0), 2.0 + 0.5 * Field.mode(grid1, [1]).values)
    comb = LinearCombination(((2.0, Constant(1.0)), (3.0, prof)))
    np.testing.assert_allclose(comb.evaluate(grid1, 0, 0.0), 2.0 + 3.0 * Field.mode(grid1, [1]).values)
    assert LinearCombination(((1.0, Constant(0.0)), (2.0, Constant(0.0)))).is_zero()
    assert not comb.is_zero()


def test_absorb_drift_moves_noise_coupling_into_dt(grid1):
    coeffs = CoefficientSet.from_constants([[1.0]], b=[0.5], c=0.1, sigma=[[2.0, 1.0]], mu=[3.0, 0.0])
    out = absorb_drift(coeffs, [0.5, 0.0]).evaluate(grid1)
    assert float(out.b[0, 0]) == pytest.approx(0.5 + 0.5 * 2.0)
    assert float(out.c[0]) == pytest.approx(0.1 + 0.5 * 3.0)
    assert absorb_drift(coeffs, [0.0, 0.0]) is coeffs


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_random_admissible_sets_pass_both_checks(seed):
    grid = TorusGrid(1, 2 * math.pi, 16)
    w = np.array([1.0, 0.5])
    coeffs = random_admissible_set(np.random.default_rng(seed), grid, w)
    assert check_coercivity(coeffs, w, 0.5, 5.0, grid, TG).passed
    assert check_boundedness(coeffs, w, 5.0, grid, TG).passed
    assert any(f.path_dependent is False for row in coeffs.a for f in row)


def test_shape_validation():
    with pytest.raises(ValueError):
        CoefficientSet([[1.0]], [0.0], [0.0], 0.0, [[0.0, 0.0]], [0.0])
