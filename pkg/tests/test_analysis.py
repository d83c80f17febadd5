import numpy as np
import pytest

from patchnet.analysis import (
    ConvergencePoint, FeatureCounts, SyntheticSpec, centered_pure_counts, class1_image,
    class1_mask, converged_probs, count_pure_patches, generate_synthetic,
    grid_feature_counts, loss_landscape, probe_outputs, verify_convergence,
)
from patchnet.nn import kaiming_init
from patchnet.patchcore import PatchConfig
from patchnet.tensor import Rng


class TestConvergedProbs:
    def test_worked_example_3_1(self):
        point = converged_probs(FeatureCounts(a=3, b=1))
        assert abs(point.p0 - 1.0 / 3.0) < 1e-12
        assert point.p1 == 1.0

    def test_large_counts(self):
        point = converged_probs(FeatureCounts(a=12288, b=4096))
        assert abs(point.p0 - 1.0 / 3.0) < 1e-12
        assert point.p1 == 1.0

    def test_b_dominates(self):
        for a, b in ((2, 5), (3, 3), (0, 1)):
            point = converged_probs(FeatureCounts(a=a, b=b))
            assert point.p0 == 0.0 and point.p1 == 1.0

    def test_b_zero_rejected(self):
        with pytest.raises(ValueError, match="unconstrained"):
            converged_probs(FeatureCounts(a=4, b=0))

    def test_monotone_decreasing_in_b(self):
        for a in (10, 100, 1000):
            values = [converged_probs(FeatureCounts(a=a, b=b)).p0 for b in range(1, a)]
            assert all(x > y for x, y in zip(values, values[1:]))

    def test_limit_toward_half_as_b_vanishes(self):
        # p0 = (a-b)/(2a) = 1/2 - b/(2a); at b=1 the gap to 1/2 is exactly 1/(2a).
        for a in (10, 10**6, 10**9):
            p0 = converged_probs(FeatureCounts(a=a, b=1)).p0
            assert abs((0.5 - p0) - 1.0 / (2 * a)) < 1e-15
        assert abs(converged_probs(FeatureCounts(a=10**9, b=1)).p0 - 0.5) < 1e-8

    def test_invalid_counts(self):
        with pytest.raises(ValueError):
            FeatureCounts(a=-1, b=2)
        with pytest.raises(ValueError):
            FeatureCounts(a=0, b=0)


class TestLossLandscape:
    def test_dp1_always_negative(self):
        rng = Rng(1)
        for _ in range(200):
            a = 1 + rng.randint(50)
            b = 1 + rng.randint(50)
            p0 = 0.01 + 0.98 * rng.uniform01(1)[0]
            p1 = 0.01 + 0.98 * rng.uniform01(1)[0]
            _, _, dp1 = loss_landscape(FeatureCounts(a=a, b=b), p0, p1)
            assert dp1 < 0

    def test_stationary_point_one_sided(self):
        _, dp0, _ = loss_landscape(FeatureCounts(a=3, b=1), 1.0 / 3.0, 1.0 - 1e-6)
        assert abs(dp0) < 1e-5

    def test_partials_match_finite_differences(self):
        h = 1e-6
        fc = FeatureCounts(a=7, b=2)
        for p0, p1 in ((0.3, 0.8), (0.5, 0.5), (0.12, 0.9)):
            loss, dp0, dp1 = loss_landscape(fc, p0, p1)
            n0 = (loss_landscape(fc, p0 + h, p1)[0] - loss_landscape(fc, p0 - h, p1)[0]) / (2 * h)
            n1 = (loss_landscape(fc, p0, p1 + h)[0] - loss_landscape(fc, p0, p1 - h)[0]) / (2 * h)
            assert abs(dp0 - n0) < 1e-8
            assert abs(dp1 - n1) < 1e-8

    def test_domain_enforced(self):
        for p0, p1 in ((0.0, 0.5), (0.5, 1.0), (-0.1, 0.5), (0.5, 1.1)):
            with pytest.raises(ValueError):
                loss_landscape(FeatureCounts(a=3, b=1), p0, p1)

    def test_descent_reaches_closed_form(self):
        """Projected gradient descent on the landscape lands on converged_probs."""
        fc = FeatureCounts(a=9, b=4)
        target = converged_probs(fc)
        p0, p1 = 0.5, 0.5
        lr = 0.01
        for _ in range(20000):
            _, d0, d1 = loss_landscape(fc, p0, p1)
            p0 = min(max(p0 - lr * d0, 1e-9), 1 - 1e-9)
            p1 = min(max(p1 - lr * d1, 1e-9), 1 - 1e-9)
        assert abs(p0 - target.p0) < 1e-3
        assert abs(p1 - target.p1) < 1e-3


class TestSyntheticData:
    def test_quarter_square_pixel_count(self):
        spec = SyntheticSpec(height=16, width=20, square_h=8, square_w=10)
        data = generate_synthetic(spec)
        assert [y for _, y in data] == [0, 1]
        assert int((data[1][0] > 0).sum()) == 16 * 20 // 4

    def test_class0_all_zero(self):
        spec = SyntheticSpec(height=8, width=8, square_h=4, square_w=4, copies_per_class=3)
        data = generate_synthetic(spec)
        for img, y in data[:3]:
            assert y == 0 and not img.any()

    def test_zero_size_square_rejected(self):
        with pytest.raises(ValueError):
            SyntheticSpec(height=8, width=8, square_h=0, square_w=4)

    def test_square_must_fit(self):
        with pytest.raises(ValueError):
            SyntheticSpec(height=8, width=8, square_h=9, square_w=4)

    def test_deterministic(self):
        spec = SyntheticSpec(height=8, width=8, square_h=4, square_w=4)
        a = generate_synthetic(spec)
        b = generate_synthetic(spec)
        for (ia, ya), (ib, yb) in zip(a, b):
            assert ya == yb
            np.testing.assert_array_equal(ia, ib)

    def test_mask_matches_square(self):
        spec = SyntheticSpec(height=8, width=9, square_h=3, square_w=4,
                             square_top=2, square_left=1)
        mask = class1_mask(spec)
        assert int((mask > 0).sum()) == 12
        assert mask[2, 1, 0] == 255 and mask[0, 0, 0] == 0


class TestPatchCounting:
    def test_exact_interior_count_128(self):
        """Stride-1 centered all-ones patches of the 64x64 square: (64-16)^2."""
        spec = SyntheticSpec(height=128, width=128, square_h=64, square_w=64)
        n_zero, n_one, n_mixed = centered_pure_counts(class1_image(spec), 17, 17)
        assert n_one == (64 - 16) ** 2 == 2304
        assert n_zero + n_one + n_mixed == 128 * 128

    def test_training_grid_counts_reduced_square(self):
        spec = SyntheticSpec(height=32, width=32, square_h=16, square_w=16)
        cfg = PatchConfig(5, 5, 5, 5, "clamp_to_edge")
        n_zero, n_one, n_mixed = count_pure_patches(class1_image(spec), cfg)
        assert (n_zero, n_one, n_mixed) == (33, 9, 7)
        fc = grid_feature_counts(class1_image(spec), cfg)
        assert (fc.a, fc.b) == (33, 16)

    def test_disjoint_quarters_counts(self):
        spec = SyntheticSpec(height=64, width=64, square_h=32, square_w=32)
        cfg = PatchConfig(32, 32, 32, 32)
        fc = grid_feature_counts(class1_image(spec), cfg)
        assert (fc.a, fc.b) == (3, 1)


class TestVerifyConvergence:
    def test_untrained_head_zero_fails_with_half_probes(self):
        params = kaiming_init(Rng(2), (4, 4, 1))
        params.head.weights[:] = 0
        params.head.bias = np.zeros((), np.float32)
        q0, q1 = probe_outputs(params)
        assert q0 == 0.5 and q1 == 0.5
        spec = SyntheticSpec(height=8, width=8, square_h=4, square_w=4)
        report = verify_convergence(params, spec, PatchConfig(4, 4, 4, 4), 0.05)
        assert not report.passed
        assert report.predicted == ConvergencePoint(p0=1.0 / 3.0, p1=1.0)

    def test_report_fields(self):
        params = kaiming_init(Rng(3), (4, 4, 1))
        spec = SyntheticSpec(height=8, width=8, square_h=4, square_w=4)
        report = verify_convergence(params, spec, PatchConfig(4, 4, 4, 4), 0.1)
        assert 0 < report.empirical_p0 < 1
        assert 0 < report.empirical_p1 < 1
        assert report.tolerance == 0.1
