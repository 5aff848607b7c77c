import math

import numpy as np
import pytest

from refine_rd.errors import (
    DegenerateMarginal,
    InsufficientSlopes,
    NotConverged,
    OutOfRange,
    ValidationError,
)
from refine_rd.oracles import (
    binary_entropy,
    binary_hamming_dual,
    binary_hamming_marginal,
)
from refine_rd.probability import Pmf, relative_entropy
from refine_rd.single_stage import (
    DualPoint,
    RdProblem,
    blahut_step,
    initial_state,
    rd_envelope,
    run_blahut,
    sigma_bar,
    slope_for_distortion,
    tilted_information,
    verify_optimality,
)

from conftest import random_distortion, random_pmf

HAMMING = [[0.0, 1.0], [1.0, 0.0]]
LN9 = math.log(9.0)


def binary_problem(p):
    return RdProblem(Pmf([p, 1 - p]), HAMMING)


def gaussian_problem(n=200, lo=-5.0, hi=5.0):
    from math import erf, sqrt

    edges = np.linspace(lo, hi, n + 1)
    x = 0.5 * (edges[:-1] + edges[1:])
    cdf = lambda z: 0.5 * (1 + erf(z / sqrt(2)))
    px = np.array([cdf(edges[i + 1]) - cdf(edges[i]) for i in range(n)])
    return RdProblem(Pmf(px / px.sum()), (x[:, None] - x[None, :]) ** 2)


class TestProblem:
    def test_rejects_negative_distortion(self):
        with pytest.raises(ValidationError):
            RdProblem(Pmf([0.5, 0.5]), [[0.0, -1.0], [1.0, 0.0]])

    def test_rejects_infinite_distortion(self):
        with pytest.raises(ValidationError):
            RdProblem(Pmf([0.5, 0.5]), [[0.0, math.inf], [1.0, 0.0]])

    def test_distortion_extremes(self):
        prob = binary_problem(0.2)
        assert prob.d_min() == 0.0
        assert prob.d_max() == pytest.approx(0.2)


class TestSigmaBar:
    def test_zero_slope(self):
        prob = binary_problem(0.3)
        assert np.allclose(sigma_bar(prob, 0.0, Pmf.uniform(2)), 1.0)

    def test_zero_distortion(self):
        prob = RdProblem(Pmf([0.4, 0.6]), np.zeros((2, 3)))
        assert np.allclose(sigma_bar(prob, 2.5, Pmf.uniform(3)), 1.0)

    def test_binary_hamming_value(self):
        prob = binary_problem(0.5)
        sig = sigma_bar(prob, LN9, Pmf.uniform(2))
        assert np.allclose(sig, 5.0 / 9.0)

    def test_range(self, rng):
        prob = RdProblem(random_pmf(rng, 3), random_distortion(rng, 3, 3))
        sig = sigma_bar(prob, 1.7, random_pmf(rng, 3))
        assert np.all(sig > 0) and np.all(sig <= 1)


class TestBlahutStep:
    def test_one_step_symmetric(self):
        prob = binary_problem(0.5)
        s1 = blahut_step(prob, initial_state(prob, LN9))
        assert s1.f_value == pytest.approx(math.log(2) - math.log(10 / 9), abs=1e-12)
        assert np.allclose(s1.py.probs, 0.5)

    def test_fixed_point(self):
        prob = binary_problem(0.5)
        s1 = blahut_step(prob, initial_state(prob, LN9))
        s2 = blahut_step(prob, s1)
        assert s2.f_value == pytest.approx(s1.f_value, abs=1e-15)
        assert np.allclose(s2.py.probs, s1.py.probs, atol=1e-15)
        assert np.allclose(s2.kernel.rows, s1.kernel.rows, atol=1e-15)

    def test_zero_slope(self, rng):
        prob = RdProblem(random_pmf(rng, 3), random_distortion(rng, 3, 4))
        init = random_pmf(rng, 4)
        s1 = blahut_step(prob, initial_state(prob, 0.0, init))
        assert s1.f_value == 0.0
        assert np.allclose(s1.kernel.rows, init.probs[None, :], atol=1e-12)

    def test_degenerate_marginal(self):
        # slope so large that lam * d overflows for every reproduction of x=1
        prob = RdProblem(Pmf([0.5, 0.5]), [[0.0, 1.0], [2.5, 3.0]])
        state = initial_state(prob, 1e308)
        with pytest.raises(DegenerateMarginal):
            blahut_step(prob, state)
        with pytest.raises(DegenerateMarginal):
            run_blahut(prob, 1e308, keep_trace=False)


class TestRunBlahut:
    def test_symmetric_binary_exact(self):
        prob = binary_problem(0.5)
        dual, trace = run_blahut(prob, LN9, delta=1e-10)
        assert dual.converged
        assert dual.f_value == pytest.approx(math.log(2) - math.log(10 / 9), abs=1e-12)
        r = dual.f_value - LN9 * 0.1
        assert r == pytest.approx(math.log(2) - binary_entropy(0.1), abs=1e-10)

    def test_zero_slope_single_step(self):
        prob = binary_problem(0.3)
        dual, trace = run_blahut(prob, 0.0)
        assert dual.converged and dual.iterations_used == 1
        assert dual.f_value == 0.0

    def test_asymmetric_envelope_point(self):
        prob = binary_problem(0.2)
        lams = np.geomspace(0.5, 6.0, 21).tolist() + [LN9]
        duals = [run_blahut(prob, l, delta=1e-10, keep_trace=False)[0] for l in lams]
        curve = rd_envelope(duals, d_grid=np.array([0.1]))
        expected = binary_entropy(0.2) - binary_entropy(0.1)
        assert curve.rates[0] == pytest.approx(expected, abs=1e-6)
        assert expected == pytest.approx(0.50040 - 0.32508, abs=1e-4)

    def test_monotone_dual_values(self, rng):
        for _ in range(10):
            nx, ny = rng.integers(2, 5), rng.integers(2, 5)
            prob = RdProblem(random_pmf(rng, nx), random_distortion(rng, nx, ny))
            lam = rng.uniform(0.1, 4.0)
            _, trace = run_blahut(prob, lam, max_iters=60, delta=1e-13)
            fs = [s.f_value for s in trace]
            assert all(b <= a + 1e-12 for a, b in zip(fs, fs[1:]))

    def test_convergence_rate_bound(self, rng):
        # F_k - F <= D(Y* || Y0) / k on instances with a known optimum
        for _ in range(5):
            p = rng.uniform(0.15, 0.45)
            d = rng.uniform(0.2, 0.8) * min(p, 1 - p)
            lam = math.log((1 - d) / d)
            prob = binary_problem(p)
            f_true = binary_hamming_dual(p, lam)
            y_star = binary_hamming_marginal(p, d)
            bound = relative_entropy(y_star, Pmf.uniform(2))
            _, trace = run_blahut(prob, lam, max_iters=100, delta=1e-15)
            for state in trace:
                assert state.f_value - f_true <= bound / state.iteration + 1e-12

    def test_stopping_soundness(self, rng):
        # stopped-by-delta runs overshoot the true dual value by at most delta
        for _ in range(5):
            p = rng.uniform(0.15, 0.45)
            lam = rng.uniform(0.5, 3.0)
            delta = 10.0 ** rng.uniform(-10, -6)
            dual, _ = run_blahut(binary_problem(p), lam, delta=delta, keep_trace=False)
            assert dual.converged
            f_true = binary_hamming_dual(p, lam)
            assert f_true - 1e-12 <= dual.f_value <= f_true + delta + 1e-12

    def test_full_support_init_required(self):
        with pytest.raises(ValidationError):
            run_blahut(binary_problem(0.5), 1.0, init=Pmf([1.0, 0.0]))


class TestEnvelope:
    def test_zero_slope_only(self):
        duals = [DualPoint(0.0, 0.0, True, 1, 0.0)]
        curve = rd_envelope(duals, d_grid=np.linspace(0.0, 2.0, 7))
        assert np.allclose(curve.rates, 0.0)

    def test_two_slopes_active_line(self):
        prob = binary_problem(0.5)
        duals = [
            run_blahut(prob, l, delta=1e-10, keep_trace=False)[0]
            for l in (LN9, math.log(4.0))
        ]
        curve = rd_envelope(duals, d_grid=np.array([0.1]))
        assert curve.rates[0] == pytest.approx(
            math.log(2) - binary_entropy(0.1), abs=1e-6
        )

    def test_gaussian_grid_point(self):
        prob = gaussian_problem()
        duals = [
            run_blahut(prob, l, delta=1e-9, max_iters=1200, keep_trace=False)[0]
            for l in np.geomspace(1.0, 4.0, 5)
        ]
        curve = rd_envelope(duals, d_grid=np.array([0.25]))
        assert curve.rates[0] == pytest.approx(0.6931, abs=2e-2)

    def test_empty_raises(self):
        with pytest.raises(InsufficientSlopes):
            rd_envelope([])

    def test_default_grid_spans_tangency_range(self):
        prob = binary_problem(0.5)
        duals = [
            run_blahut(prob, l, delta=1e-10, keep_trace=False)[0]
            for l in np.geomspace(0.5, 5.0, 9)
        ]
        curve = rd_envelope(duals)
        assert curve.ds.size == 101
        assert curve.is_convex_nonincreasing()
        assert 0.0 <= curve.d_min < curve.d_max <= 0.55

    def test_single_nonzero_slope_without_zero_line(self):
        with pytest.raises(InsufficientSlopes):
            rd_envelope(
                [DualPoint(1.0, 0.3, True, 5, 0.0)], include_zero_line=False
            )

    def test_convex_nonincreasing_for_arbitrary_dual_sets(self, rng):
        for _ in range(20):
            k = rng.integers(2, 8)
            duals = [
                DualPoint(rng.uniform(0.0, 5.0), rng.uniform(0.0, 2.0), True, 1, 0.0)
                for _ in range(k)
            ]
            curve = rd_envelope(duals, d_grid=np.linspace(0.0, 1.5, 41))
            assert curve.is_convex_nonincreasing(tol=1e-9)


class TestTiltedInformation:
    def test_zero_slope_regime(self):
        prob = binary_problem(0.3)
        dual, trace = run_blahut(prob, 0.0)
        info = tilted_information(prob, dual, trace[-1], 0.5)
        assert np.allclose(info.alpha_star, 1.0)
        assert np.allclose(info.values, 0.0)

    def test_symmetric_deterministic(self):
        prob = binary_problem(0.5)
        dual, trace = run_blahut(prob, LN9, delta=1e-10)
        info = tilted_information(prob, dual, trace[-1], 0.1)
        expected = math.log(2) - binary_entropy(0.1)
        assert np.allclose(info.values, expected, atol=1e-9)
        assert info.variance == pytest.approx(0.0, abs=1e-15)

    def test_asymmetric_mean_and_variance(self):
        prob = binary_problem(0.2)
        dual, trace = run_blahut(prob, LN9, delta=1e-10)
        info = tilted_information(prob, dual, trace[-1], 0.1)
        expected = binary_entropy(0.2) - binary_entropy(0.1)
        assert info.mean == pytest.approx(expected, abs=1e-6)
        assert info.variance > 0.01

    def test_mean_matches_envelope_value_within_two_delta(self, rng):
        for _ in range(5):
            nx, ny = rng.integers(2, 4), rng.integers(2, 4)
            prob = RdProblem(random_pmf(rng, nx), random_distortion(rng, nx, ny))
            lam = rng.uniform(0.3, 2.5)
            delta = 1e-10
            dual, trace = run_blahut(prob, lam, delta=delta, keep_trace=False)
            if not verify_optimality(prob, dual, trace[-1], tol=10 * delta).passes:
                continue
            d = prob.expected_distortion(trace[-1].kernel)
            info = tilted_information(prob, dual, trace[-1], d)
            assert abs(info.mean - (dual.f_value - lam * d)) <= 2 * delta

    def test_not_converged(self):
        prob = binary_problem(0.2)
        dual, trace = run_blahut(prob, LN9, max_iters=1, delta=1e-16)
        assert not dual.converged
        with pytest.raises(NotConverged):
            tilted_information(prob, dual, trace[-1], 0.1)


class TestVerifyOptimality:
    def test_converged_symmetric(self):
        prob = binary_problem(0.5)
        dual, trace = run_blahut(prob, LN9, delta=1e-10)
        report = verify_optimality(prob, dual, trace[-1], tol=1e-9)
        assert report.passes
        assert np.allclose(report.constraint_values, 1.0, atol=1e-9)

    def test_zero_slope(self):
        prob = binary_problem(0.3)
        dual, trace = run_blahut(prob, 0.0)
        report = verify_optimality(prob, dual, trace[-1], tol=1e-10)
        assert report.passes
        assert np.allclose(report.constraint_values, 1.0, atol=1e-12)

    def test_early_stop_flags_failure(self):
        prob = binary_problem(0.5)
        bad_init = Pmf([1.0 - 1e-6, 1e-6])
        dual, trace = run_blahut(prob, LN9, init=bad_init, max_iters=1)
        report = verify_optimality(prob, dual, trace[-1], tol=1e-8)
        assert not report.passes


class TestSlopeForDistortion:
    def test_recovers_known_slope(self):
        lam, dual, state = slope_for_distortion(binary_problem(0.2), 0.1)
        assert lam == pytest.approx(LN9, abs=1e-6)
        assert dual.f_value == pytest.approx(binary_hamming_dual(0.2, LN9), abs=1e-8)

    def test_out_of_range(self):
        with pytest.raises(OutOfRange):
            slope_for_distortion(binary_problem(0.2), 0.25)
        with pytest.raises(OutOfRange):
            slope_for_distortion(binary_problem(0.2), 0.0)


class TestRawPathConsistency:
    def test_trace_and_raw_agree(self, rng):
        prob = RdProblem(random_pmf(rng, 3), random_distortion(rng, 3, 3))
        lam = 1.3
        d1, t1 = run_blahut(prob, lam, delta=1e-11)
        d2, t2 = run_blahut(prob, lam, delta=1e-11, keep_trace=False)
        assert d1.iterations_used == d2.iterations_used
        assert d1.f_value == pytest.approx(d2.f_value, abs=1e-13)
        assert np.allclose(t1[-1].py.probs, t2[-1].py.probs, atol=1e-13)
