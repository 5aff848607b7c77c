import math

import numpy as np
import pytest

from refine_rd.errors import ConstraintViolated, NotConverged, ValidationError
from refine_rd.oracles import binary_entropy
from refine_rd.probability import Pmf
from refine_rd.single_stage import RdProblem, run_blahut, slope_for_distortion, tilted_information
from refine_rd.successive import (
    LagrangeTriple,
    SrProblem,
    initial_sr_state,
    refinable_construction,
    run_sr_blahut,
    sr_envelope,
    sr_tilted_information,
    tangency_coordinates,
    update_betas,
    update_kernels,
    verify_sr_optimality,
)

from conftest import random_distortion, random_pmf

HAMMING = np.array([[0.0, 1.0], [1.0, 0.0]])
LN9 = math.log(9.0)
NON_REFINABLE = dict(px=[0.4, 0.6], d1=HAMMING, d2=np.array([[0.0, 1.0], [2.0, 0.0]]))


def sym_binary(d2_matrix=HAMMING):
    return SrProblem(Pmf([0.5, 0.5]), HAMMING, d2_matrix)


class TestUpdateBetas:
    def test_zero_slopes(self, rng):
        prob = SrProblem(
            random_pmf(rng, 3), random_distortion(rng, 3, 2), random_distortion(rng, 3, 4)
        )
        b1, b2 = update_betas(prob, LagrangeTriple(0.7, 0.0, 0.0), initial_sr_state(prob))
        assert np.allclose(b1, 1.0) and np.allclose(b2, 1.0)

    def test_nu1_zero_exponent_collapse(self, rng):
        prob = SrProblem(
            random_pmf(rng, 2), random_distortion(rng, 2, 2), random_distortion(rng, 2, 3)
        )
        triple = LagrangeTriple(0.0, 0.8, 1.1)
        state = initial_sr_state(prob)
        b1, b2 = update_betas(prob, triple, state)
        direct = np.array(
            [
                sum(
                    state.py1.probs[y1]
                    * b2[x, y1]
                    * math.exp(-triple.lambda1 * prob.d1_matrix[x, y1])
                    for y1 in range(prob.n_first)
                )
                for x in range(prob.n_source)
            ]
        )
        assert np.allclose(b1, direct, atol=1e-14)

    def test_binary_hamming_value(self):
        prob = sym_binary()
        b1, b2 = update_betas(prob, LagrangeTriple(1.0, 0.0, LN9), initial_sr_state(prob))
        assert np.allclose(b2, 5.0 / 9.0)
        assert np.allclose(b1, math.sqrt(5.0 / 9.0))

    def test_range(self, rng):
        prob = SrProblem(
            random_pmf(rng, 3), random_distortion(rng, 3, 3), random_distortion(rng, 3, 2)
        )
        b1, b2 = update_betas(prob, LagrangeTriple(0.5, 1.0, 2.0), initial_sr_state(prob))
        assert np.all(b1 > 0) and np.all(b1 <= 1)
        assert np.all(b2 > 0) and np.all(b2 <= 1)


class TestUpdateKernels:
    def test_symmetric_first_step(self):
        prob = sym_binary()
        triple = LagrangeTriple(1.0, 0.0, LN9)
        state = initial_sr_state(prob)
        new = update_kernels(prob, triple, state, update_betas(prob, triple, state))
        assert new.f_value == pytest.approx(math.log(9.0 / 5.0), abs=1e-14)
        assert np.allclose(new.py1.probs, 0.5)
        assert np.allclose(new.py2_given_y1.rows, 0.5)

    def test_zero_slopes(self, rng):
        prob = SrProblem(
            random_pmf(rng, 2), random_distortion(rng, 2, 3), random_distortion(rng, 2, 2)
        )
        triple = LagrangeTriple(0.4, 0.0, 0.0)
        state = initial_sr_state(prob)
        new = update_kernels(prob, triple, state, update_betas(prob, triple, state))
        assert new.f_value == 0.0
        assert np.allclose(new.k1.rows, state.py1.probs[None, :], atol=1e-14)
        assert np.allclose(new.k2, state.py2_given_y1.rows[None, :, :], atol=1e-14)

    def test_fixed_point(self):
        prob = sym_binary()
        triple = LagrangeTriple(1.0, 0.3, 1.5)
        _, trace = run_sr_blahut(prob, triple, delta=1e-13)
        state = trace[-1]
        again = update_kernels(prob, triple, state, update_betas(prob, triple, state))
        assert again.f_value == pytest.approx(state.f_value, abs=1e-13)
        assert np.allclose(again.py1.probs, state.py1.probs, atol=1e-12)
        assert np.allclose(again.py2_given_y1.rows, state.py2_given_y1.rows, atol=1e-12)
        assert np.allclose(again.k1.rows, state.k1.rows, atol=1e-12)


class TestRunSrBlahut:
    def test_zero_triple(self):
        prob = sym_binary()
        dual, _ = run_sr_blahut(prob, LagrangeTriple(0.0, 0.0, 0.0))
        assert dual.converged and dual.iterations_used == 1
        assert dual.f_value == 0.0

    def test_symmetric_free_first_stage(self):
        prob = sym_binary()
        dual, trace = run_sr_blahut(prob, LagrangeTriple(1.0, 0.0, LN9), delta=1e-10)
        assert dual.f_value == pytest.approx(math.log(9.0 / 5.0), abs=1e-12)
        surface = sr_envelope([dual])
        d1, d2, r1 = tangency_coordinates(prob, trace[-1])
        assert r1 == pytest.approx(0.0, abs=1e-12)
        value = surface.evaluate(d1, 0.1, 0.0)
        assert value == pytest.approx(math.log(2) - binary_entropy(0.1), abs=1e-10)

    def test_reduction_to_single_stage(self, rng):
        for _ in range(5):
            nx = rng.integers(2, 4)
            d2m = random_distortion(rng, nx, 3)
            prob = SrProblem(random_pmf(rng, nx), random_distortion(rng, nx, 2), d2m)
            lam2 = rng.uniform(0.3, 2.5)
            sr_dual, _ = run_sr_blahut(
                prob, LagrangeTriple(0.0, 0.0, lam2), delta=1e-12, keep_trace=False
            )
            ss_dual, _ = run_blahut(
                RdProblem(prob.px, d2m), lam2, delta=1e-12, keep_trace=False
            )
            assert abs(sr_dual.f_value - ss_dual.f_value) <= 1e-9

    def test_monotone_trace(self, rng):
        for _ in range(8):
            prob = SrProblem(
                random_pmf(rng, 3), random_distortion(rng, 3, 2), random_distortion(rng, 3, 3)
            )
            triple = LagrangeTriple(
                rng.uniform(0, 1.5), rng.uniform(0, 2), rng.uniform(0, 2)
            )
            _, trace = run_sr_blahut(prob, triple, max_iters=50, delta=1e-14)
            fs = [s.f_value for s in trace]
            assert all(b <= a + 1e-12 for a, b in zip(fs, fs[1:]))

    def test_beta_range_at_convergence(self, rng):
        prob = SrProblem(
            random_pmf(rng, 3), random_distortion(rng, 3, 3), random_distortion(rng, 3, 2)
        )
        _, trace = run_sr_blahut(prob, LagrangeTriple(0.8, 0.7, 1.2), delta=1e-11)
        state = trace[-1]
        for arr in (state.beta1, state.beta2):
            assert np.all(arr > 0) and np.all(arr <= 1 + 1e-12)

    def test_raw_path_matches_trace_path(self, rng):
        prob = SrProblem(
            random_pmf(rng, 3), random_distortion(rng, 3, 2), random_distortion(rng, 3, 2)
        )
        triple = LagrangeTriple(0.6, 0.4, 1.1)
        d1, t1 = run_sr_blahut(prob, triple, delta=1e-11)
        d2, t2 = run_sr_blahut(prob, triple, delta=1e-11, keep_trace=False)
        assert d1.iterations_used == d2.iterations_used
        assert d1.f_value == pytest.approx(d2.f_value, abs=1e-12)
        assert np.allclose(t1[-1].py1.probs, t2[-1].py1.probs, atol=1e-11)
        assert np.allclose(t1[-1].beta1, t2[-1].beta1, atol=1e-11)

    def test_convergence_rate_bound(self):
        # known optimum via the refinable structure of the symmetric source
        nu1, d1, d2 = 1.0, 0.2, 0.1
        lam1s = math.log((1 - d1) / d1)
        lam2s = math.log((1 - d2) / d2)
        triple = LagrangeTriple(nu1, nu1 * lam1s, lam2s)
        f_true = (
            nu1 * (math.log(2) - binary_entropy(d1))
            + triple.lambda1 * d1
            + (math.log(2) - binary_entropy(d2))
            + triple.lambda2 * d2
        )
        delta_flip = (d1 - d2) / (1 - 2 * d2)
        bound = math.log(2) - binary_entropy(delta_flip)
        prob = sym_binary()
        _, trace = run_sr_blahut(prob, triple, max_iters=100, delta=1e-15)
        for state in trace:
            assert state.f_value - f_true <= bound / state.iteration + 1e-10


class TestSrEnvelope:
    def test_empty_raises(self):
        from refine_rd.errors import InsufficientSlopes

        with pytest.raises(InsufficientSlopes):
            sr_envelope([])

    def test_zero_surface(self):
        dual, _ = run_sr_blahut(sym_binary(), LagrangeTriple(0.0, 0.0, 0.0))
        surface = sr_envelope([dual])
        for d1, d2, r1 in [(0.1, 0.1, 0.0), (0.5, 0.2, 1.0)]:
            assert surface.evaluate(d1, d2, r1) == 0.0

    def test_same_distortion_refinable_slice(self):
        prob = sym_binary()
        d1, d2 = 0.1, 0.05
        lam2s = math.log((1 - d2) / d2)
        duals = []
        for nu1 in (0.0, 0.5, 1.0):
            lam1 = nu1 * math.log((1 - d1) / d1)
            dual, _ = run_sr_blahut(
                prob, LagrangeTriple(nu1, lam1, lam2s), delta=1e-11, keep_trace=False
            )
            duals.append(dual)
        surface = sr_envelope(duals)
        r_d2 = math.log(2) - binary_entropy(d2)
        r_d1 = math.log(2) - binary_entropy(d1)
        for r1 in (r_d1, r_d1 + 0.1, r_d1 + 0.3):
            assert surface.evaluate(d1, d2, r1) == pytest.approx(r_d2, abs=1e-4)

    def test_convex_nonincreasing_on_grid(self, rng):
        prob = SrProblem(
            random_pmf(rng, 2), random_distortion(rng, 2, 2), random_distortion(rng, 2, 2)
        )
        duals = []
        for _ in range(6):
            triple = LagrangeTriple(
                rng.uniform(0, 1.5), rng.uniform(0, 1.5), rng.uniform(0.2, 2.5)
            )
            dual, _ = run_sr_blahut(prob, triple, delta=1e-9, keep_trace=False)
            duals.append(dual)
        surface = sr_envelope(duals)
        grid = np.linspace(0.02, 0.6, 9)
        for d2 in (0.05, 0.2):
            vals = [surface.evaluate(d, d2, 0.1) for d in grid]
            diffs = np.diff(vals)
            assert np.all(diffs <= 1e-12)
            assert np.all(np.diff(diffs) >= -1e-9)
        vals = [surface.evaluate(0.2, d2, 0.1) for d2 in grid]
        assert np.all(np.diff(vals) <= 1e-12)
        vals = [surface.evaluate(0.2, 0.1, r1) for r1 in grid]
        assert np.all(np.diff(vals) <= 1e-12)

    def test_omega_membership(self):
        prob = sym_binary()
        d1, d2 = 0.2, 0.1
        lam2s = math.log((1 - d2) / d2)
        duals = []
        for nu1 in (0.0, 1.0):
            lam1 = nu1 * math.log((1 - d1) / d1)
            dual, _ = run_sr_blahut(
                prob, LagrangeTriple(nu1, lam1, lam2s), delta=1e-11, keep_trace=False
            )
            duals.append(dual)
        surface = sr_envelope(duals)
        r_d1 = math.log(2) - binary_entropy(d1)
        inside = surface.in_omega(d1, d2, 0.9 * r_d1)
        assert inside.in_omega
        outside = surface.in_omega(d1, d2, r_d1 + 0.5)
        assert not outside.in_omega
        assert not outside.decreasing_in_r1


class TestVerifySrOptimality:
    def test_zero_triple(self):
        prob = sym_binary()
        _, trace = run_sr_blahut(prob, LagrangeTriple(0.0, 0.0, 0.0))
        report = verify_sr_optimality(prob, LagrangeTriple(0.0, 0.0, 0.0), trace[-1])
        assert report.passes
        assert np.allclose(report.sigma1, 1.0, atol=1e-12)
        assert np.allclose(report.sigma2, 1.0, atol=1e-12)

    def test_converged_symmetric(self):
        prob = sym_binary()
        triple = LagrangeTriple(1.0, 0.6, 1.8)
        _, trace = run_sr_blahut(prob, triple, delta=1e-10)
        report = verify_sr_optimality(prob, triple, trace[-1], tol=1e-8)
        assert report.passes
        assert np.allclose(report.sigma1, 1.0, atol=1e-8)
        assert np.allclose(report.sigma2, 1.0, atol=1e-8)

    def test_early_stop_flags_failure(self):
        prob = SrProblem(Pmf([0.2, 0.8]), HAMMING, HAMMING)
        init1 = Pmf([1 - 1e-6, 1e-6])
        triple = LagrangeTriple(1.0, 0.8, 1.9)
        _, trace = run_sr_blahut(prob, triple, init1=init1, max_iters=1)
        report = verify_sr_optimality(prob, triple, trace[-1], tol=1e-8)
        assert not report.passes


class TestSrTiltedInformation:
    def test_zero_triple(self):
        prob = sym_binary()
        triple = LagrangeTriple(0.0, 0.0, 0.0)
        _, trace = run_sr_blahut(prob, triple)
        info = sr_tilted_information(prob, trace[-1], triple, 0.3, 0.3, 0.0)
        assert np.allclose(info.values, 0.0, atol=1e-12)

    def test_refinable_pointwise_identity_nu1_zero(self):
        # with a free first stage the values reduce to the stage-two
        # single-stage tilted information, for any source bias
        px = Pmf([0.2, 0.8])
        prob = SrProblem(px, HAMMING, HAMMING)
        d2 = 0.1
        stage2 = RdProblem(px, HAMMING)
        lam2, dual2, state2 = slope_for_distortion(stage2, d2, delta=1e-11)
        j2 = tilted_information(stage2, dual2, state2, d2)
        triple = LagrangeTriple(0.0, 0.0, lam2)
        _, trace = run_sr_blahut(prob, triple, delta=1e-11)
        d1t, d2t, r1t = tangency_coordinates(prob, trace[-1])
        info = sr_tilted_information(prob, trace[-1], triple, d1t, d2, r1t)
        assert np.allclose(info.values, j2.values, atol=1e-6)

    def test_mean_matches_surface_value(self):
        prob = SrProblem(Pmf([0.3, 0.7]), HAMMING, HAMMING)
        triple = LagrangeTriple(0.8, 0.5, 2.0)
        dual, trace = run_sr_blahut(prob, triple, delta=1e-11)
        d1, d2, r1 = tangency_coordinates(prob, trace[-1])
        info = sr_tilted_information(prob, trace[-1], triple, d1, d2, r1)
        surface = sr_envelope([dual])
        assert info.mean == pytest.approx(surface.evaluate(d1, d2, r1), abs=1e-6)

    def test_rejects_unconverged(self):
        prob = SrProblem(Pmf([0.2, 0.8]), HAMMING, HAMMING)
        triple = LagrangeTriple(1.0, 0.8, 1.9)
        _, trace = run_sr_blahut(
            prob, triple, init1=Pmf([1 - 1e-6, 1e-6]), max_iters=1
        )
        with pytest.raises(NotConverged):
            sr_tilted_information(prob, trace[-1], triple, 0.1, 0.1, 0.1)


class TestRefinableConstruction:
    def test_symmetric_binary_certificate_value(self):
        prob = sym_binary()
        d1, d2 = 0.2, 0.1
        rc = refinable_construction(prob, d1, d2, 1.0)
        r1 = math.log(2) - binary_entropy(d1)
        r2 = math.log(2) - binary_entropy(d2)
        assert rc.certificate_value(r1) == pytest.approx(r2, abs=1e-6)
        assert rc.markov_report.passes
        assert rc.triple.lambda1 == pytest.approx(math.log((1 - d1) / d1), abs=1e-5)
        assert rc.triple.lambda2 == pytest.approx(math.log((1 - d2) / d2), abs=1e-5)

    def test_equal_distortions_degenerate(self):
        prob = sym_binary()
        d = 0.15
        rc = refinable_construction(prob, d, d, 1.0)
        r = math.log(2) - binary_entropy(d)
        assert rc.certificate_value(r) == pytest.approx(r, abs=1e-6)
        assert rc.markov_report.passes

    def test_non_refinable_raises(self):
        prob = SrProblem(Pmf(NON_REFINABLE["px"]), NON_REFINABLE["d1"], NON_REFINABLE["d2"])
        with pytest.raises(ConstraintViolated) as exc:
            refinable_construction(prob, 0.2, 0.2, 1.0, tol=1e-4)
        diag = exc.value.diagnostics
        assert diag["markov_deviation"] > 1e-3 or diag["value_gap"] > 1e-4

    def test_nu1_must_be_positive(self):
        with pytest.raises(ValidationError):
            refinable_construction(sym_binary(), 0.2, 0.1, 0.0)


class TestCertificateWeakDuality:
    def test_feasible_certificates_stay_below_dual(self, rng):
        from refine_rd.converse import check_certificate
        from refine_rd.errors import CertificateInvalid
        from refine_rd.oracles import brute_force_sr_dual
        from refine_rd.probability import safe_log

        checked = 0
        for _ in range(12):
            prob = SrProblem(
                random_pmf(rng, 2), random_distortion(rng, 2, 2), random_distortion(rng, 2, 2)
            )
            triple = LagrangeTriple(
                rng.uniform(0, 1.2), rng.uniform(0, 1.2), rng.uniform(0.3, 2.0)
            )
            _, trace = run_sr_blahut(prob, triple, delta=1e-11, keep_trace=False)
            b1, b2 = update_betas(prob, triple, trace[-1])
            b1 = b1 * rng.uniform(1.0, 1.3)
            b2 = b2 * rng.uniform(0.85, 1.0, size=b2.shape)
            try:
                check_certificate(prob, (b1, b2, triple), tol=1e-9)
            except CertificateInvalid:
                continue
            checked += 1
            value = float(
                (1 + triple.nu1) * -(prob.px.probs @ safe_log(np.minimum(b1, 1.0)))
            )
            oracle = brute_force_sr_dual(prob, triple, 60)
            assert value <= oracle.value + 2e-3
        assert checked >= 5
