from __future__ import annotations

import numpy as np
import pytest

from anchorkl import bench
from anchorkl import estimators as est
from anchorkl.bench import (
    CALIBRATION_TOP_K,
    RelRmseRecord,
    SynthTaskSpec,
    calibrate_scale,
    critical_sample_size,
    loglog_slope,
    run_sweep,
    scale_for_mass,
    top_mass,
)
from anchorkl.categorical import TopkIndexSet, make_pair, topk_indices
from anchorkl.estimators import EstimatorVariant
from anchorkl.rng import stream
from anchorkl.tape import Tape

SMALL = SynthTaskSpec(
    vocab=200,
    target_mass=0.8,
    k_list=(4, 8, 32, 200),
    b_list=(1, 4, 16, 64, 256, 1024),
    trials=60,
    seed=99,
)


class TestCalibration:
    def test_zero_scale_is_uniform(self):
        z = stream(500, 0, "c").standard_normal(1000)
        assert top_mass(np.full(1000, 1.0 / 1000)) == pytest.approx(32 / 1000, abs=1e-12)
        s0 = 0.0
        probs = np.full(1000, 1.0 / 1000)
        assert top_mass(probs, CALIBRATION_TOP_K) == pytest.approx(0.032, abs=1e-12)

    def test_reaches_target_mass(self):
        rng = stream(500, 1, "c")
        s = calibrate_scale(0.8, 2000, rng)
        # recreate the same draw to audit the post-condition
        z = stream(500, 1, "c").standard_normal(2000)
        probs = np.exp(z * s - np.max(z * s))
        probs /= np.sum(probs)
        assert abs(top_mass(probs) - 0.8) <= 1e-3
        assert s > 0.0

    def test_mass_monotone_in_scale(self):
        z = stream(500, 2, "c").standard_normal(1500)
        masses = []
        for s in np.linspace(0.0, 6.0, 13):
            e = np.exp(s * z - np.max(s * z))
            masses.append(top_mass(e / np.sum(e)))
        assert np.all(np.diff(masses) >= -1e-12)

    def test_unreachable_mass_rejected(self):
        rng = stream(500, 3, "c")
        with pytest.raises(ValueError):
            calibrate_scale(0.01, 2000, rng)  # below the uniform floor
        with pytest.raises(ValueError):
            calibrate_scale(1.0, 2000, rng)


class TestClosedFormGradients:
    """The vectorized per-sample forms must match the tape expressions."""

    def _setup(self, v: int = 10):
        rng = stream(501, 0, "g")
        tape = Tape()
        theta = rng.standard_normal(v)
        ref = rng.standard_normal(v)
        pair = make_pair(tape, theta, ref)
        pi = pair.theta.probs
        ell = pair.theta.log_probs - pair.ref.log_probs
        return tape, pair, pi, ell

    def test_exact_gradient(self):
        tape, pair, pi, ell = self._setup()
        from anchorkl.categorical import KLDirection, exact_divergence_grad

        assert np.max(
            np.abs(bench.exact_reverse_grad(pi, ell) - exact_divergence_grad(pair, KLDirection.REVERSE))
        ) < 1e-14

    def test_sampled_per_token_gradient(self):
        tape, pair, pi, ell = self._setup()
        for p in range(pair.size):
            expr = est.canonical_reverse_tail(pair, p, est.NO_CORRECTION).expr
            g_tape = tape.backward(expr, pair.params)
            counts = np.zeros(pair.size)
            counts[p] = 1.0
            g_np = bench._sampled_grad_sum(pi, ell, counts, ell + 1.0)
            assert np.max(np.abs(g_tape - g_np)) < 1e-12

    def test_truncated_gradient(self):
        tape, pair, pi, ell = self._setup()
        q = topk_indices(pair.sampling, 4)
        trunc = est.truncated_reverse_sum(pair, q)
        g_tape = tape.backward(trunc, pair.params)
        g_np = bench.truncated_grad(pi, ell, np.array(q.indices))
        assert np.max(np.abs(g_tape - g_np)) < 1e-12

    def test_topk_per_token_gradient(self):
        tape, pair, pi, ell = self._setup()
        q = topk_indices(pair.sampling, 4)
        head = np.array(q.indices)
        mask = np.ones(pair.size)
        mask[head] = 0.0
        for p in range(pair.size):
            expr = est.topk_reverse_kl(pair, p, q, est.ClipRange(1.0, 1.0)).expr
            g_tape = tape.backward(expr, pair.params)
            counts = np.zeros(pair.size)
            counts[p] = 1.0
            g_np = bench.truncated_grad(pi, ell, head) + bench._sampled_grad_sum(
                pi, ell, counts * mask, ell + 1.0
            )
            assert np.max(np.abs(g_tape - g_np)) < 1e-12


@pytest.fixture(scope="module")
def records():
    return run_sweep(SMALL)


class TestSweep:

    def test_exact_arm_is_zero_error(self, records):
        for r in records:
            if r.estimator == "topk" and r.k == SMALL.vocab:
                assert r.rel_rmse < 1e-12

    def test_truncated_floor_is_flat(self, records):
        for k in SMALL.k_list:
            errs = [r.rel_rmse for r in records if r.estimator == "truncated" and r.k == k]
            assert max(errs) - min(errs) < 1e-15

    def test_topk_error_decreases_with_b(self, records):
        # nonincreasing within Monte Carlo noise (10% slack between adjacent B)
        by_b = sorted((r.b, r.rel_rmse) for r in records if r.estimator == "topk" and r.k == 8)
        for (b0, e0), (b1, e1) in zip(by_b, by_b[1:]):
            assert e1 <= e0 * 1.1, f"B {b0}->{b1}: {e0} -> {e1}"

    def test_row_order_and_schema(self, records):
        keys = [(r.estimator, r.k, r.b) for r in records]
        assert keys == sorted(keys)
        assert all(r.m == SMALL.target_mass and r.vocab == SMALL.vocab for r in records)

    def test_determinism(self, records):
        again = run_sweep(SMALL)
        assert [(r.estimator, r.k, r.b, r.rel_rmse) for r in again] == [
            (r.estimator, r.k, r.b, r.rel_rmse) for r in records
        ]

    def test_sampled_slope_near_half(self, records):
        slope = loglog_slope(records, "sampled", 0)
        assert -0.6 <= slope <= -0.4


class TestCriticalSampleSize:
    def _recs(self, pairs):
        out = []
        for (estimator, b), err in pairs.items():
            out.append(RelRmseRecord(estimator, 8, b, 0.8, 100, 1, err))
        return out

    def test_immediate_dominance(self):
        recs = self._recs(
            {("topk", 1): 0.1, ("topk", 2): 0.05, ("truncated", 1): 0.5, ("truncated", 2): 0.5}
        )
        assert critical_sample_size(recs, 8) == 1

    def test_no_crossover(self):
        recs = self._recs(
            {("topk", 1): 0.9, ("topk", 2): 0.8, ("truncated", 1): 0.5, ("truncated", 2): 0.5}
        )
        assert critical_sample_size(recs, 8) is None

    def test_incomplete_sweep_rejected(self):
        recs = self._recs({("topk", 1): 0.9, ("truncated", 2): 0.5})
        with pytest.raises(ValueError):
            critical_sample_size(recs, 8)

    def test_finite_at_desk_scale(self):
        records = run_sweep(SMALL)
        for k in (4, 8):
            assert critical_sample_size(records, k) is not None


class TestSpecValidation:
    def test_bad_mass(self):
        with pytest.raises(ValueError):
            SynthTaskSpec(vocab=100, target_mass=0.2)  # 32/100 = 0.32 floor

    def test_k_exceeds_vocab(self):
        with pytest.raises(ValueError):
            SynthTaskSpec(vocab=100, target_mass=0.9, k_list=(128,))

    def test_negative_rmse_rejected(self):
        with pytest.raises(ValueError):
            RelRmseRecord("topk", 8, 1, 0.8, 100, 1, -0.1)
