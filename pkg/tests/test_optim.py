import math

import numpy as np
import pytest

from patchnet import optim
from patchnet.nn import kaiming_init, param_arrays
from patchnet.optim import (
    TrainConfig, TrainingDiverged, adam_update_arrays, bce_loss, init_adam_arrays,
    select_epoch_indices, train,
)
from patchnet.tensor import Rng


def square_dataset(size=8, square=4, high=255):
    """Two-image set: all black vs upper-left bright square."""
    zero = np.zeros((size, size, 1), np.uint8)
    one = zero.copy()
    one[:square, :square] = high
    return [(zero, 0), (one, 1)]


class TestBceLoss:
    def test_half_prob(self):
        for y in (0, 1):
            loss, _ = bce_loss(0.5, y)
            assert abs(loss - math.log(2)) < 1e-12

    def test_perfect_prediction_clamped(self):
        loss1, _ = bce_loss(1.0, 1)
        loss0, _ = bce_loss(0.0, 0)
        bound = -math.log(1.0 - 1e-7)
        assert 0 <= loss1 <= bound + 1e-15
        assert 0 <= loss0 <= bound + 1e-15

    def test_one_third_class_zero(self):
        loss, _ = bce_loss(1.0 / 3.0, 0)
        assert abs(loss - (-math.log(2.0 / 3.0))) < 1e-12
        assert abs(loss - 0.405465) < 1e-6

    def test_bad_label(self):
        with pytest.raises(ValueError):
            bce_loss(0.5, 2)

    def test_derivative_matches_finite_difference(self):
        h = 1e-7
        for p in (0.1, 0.33, 0.5, 0.77, 0.9):
            for y in (0, 1):
                _, d = bce_loss(p, y)
                numeric = (bce_loss(p + h, y)[0] - bce_loss(p - h, y)[0]) / (2 * h)
                assert abs(d - numeric) < 1e-6

    def test_nonnegative(self):
        for p in np.linspace(0.01, 0.99, 23):
            assert bce_loss(float(p), 0)[0] >= 0
            assert bce_loss(float(p), 1)[0] >= 0


class TestAdam:
    def test_zero_gradient_fixed_point(self):
        w = np.array([1.0, -2.0, 3.0])
        state = init_adam_arrays([w], lr=0.1)
        adam_update_arrays(state, [w], [np.zeros(3)])
        np.testing.assert_array_equal(w, [1.0, -2.0, 3.0])

    def test_first_step_is_signed_lr(self):
        for g in (0.003, -7.0, 42.0):
            w = np.array([1.0])
            state = init_adam_arrays([w], lr=0.05)
            adam_update_arrays(state, [w], [np.array([g])])
            assert abs((w[0] - 1.0) - (-0.05 * math.copysign(1.0, g))) < 0.05 * 1e-4

    def test_descends_quadratic(self):
        w = np.array([1.0])
        state = init_adam_arrays([w], lr=0.1)
        for _ in range(100):
            adam_update_arrays(state, [w], [2.0 * w])
        assert abs(w[0]) < 0.1

    def test_shape_mismatch(self):
        w = np.zeros(3)
        state = init_adam_arrays([w], lr=0.1)
        with pytest.raises(ValueError):
            adam_update_arrays(state, [w], [np.zeros(4)])


class TestEpochSelection:
    def test_balanced_counts_exactly_equal(self):
        labels = [0, 0, 0, 0, 0, 1, 1]
        chosen = select_epoch_indices(labels, True, Rng(1))
        assert len(chosen) == 4
        assert sum(labels[i] for i in chosen) == 2

    def test_balanced_property_random_labels(self):
        rng = Rng(2)
        for trial in range(20):
            n0 = 1 + rng.randint(10)
            n1 = 1 + rng.randint(10)
            labels = [0] * n0 + [1] * n1
            chosen = select_epoch_indices(labels, True, rng.derive(trial))
            k = min(n0, n1)
            got = [labels[i] for i in chosen]
            assert got.count(0) == k and got.count(1) == k
            assert len(set(chosen)) == len(chosen)

    def test_unbalanced_uses_everything(self):
        labels = [0, 1, 1, 1]
        chosen = select_epoch_indices(labels, False, Rng(3))
        assert sorted(chosen) == [0, 1, 2, 3]

    def test_deterministic_per_rng(self):
        labels = [0, 1] * 8
        assert select_epoch_indices(labels, True, Rng(4)) == \
            select_epoch_indices(labels, True, Rng(4))


def small_cfg(**kw):
    base = dict(patch_size=4, train_stride=4, lr=1e-3, batch_size_images=4,
                patience_epochs=1000, max_epochs=5, seed=1, verbose=False)
    base.update(kw)
    return TrainConfig(**base)


class TestTrain:
    def test_single_class_rejected(self):
        data = [(np.zeros((8, 8, 1), np.uint8), 0)] * 2
        params = kaiming_init(Rng(1), (4, 4, 1))
        with pytest.raises(ValueError, match="both classes"):
            train(params, data, data, small_cfg())

    def test_empty_rejected(self):
        params = kaiming_init(Rng(1), (4, 4, 1))
        with pytest.raises(ValueError):
            train(params, [], square_dataset(), small_cfg())

    def test_patience_zero_stops_at_first_flat_epoch(self):
        data = square_dataset()
        params = kaiming_init(Rng(2), (4, 4, 1))
        # lr=0 never changes params, so epoch 1 improves over inf and epoch 2
        # is the first epoch without improvement.
        _, report = train(params, data, data,
                          small_cfg(lr=0.0, patience_epochs=0, max_epochs=50,
                                    stop_on_train_acc=False))
        assert report.stop_reason == "patience"
        assert report.epochs_run == 2

    def test_max_epochs_stop(self):
        data = square_dataset()
        params = kaiming_init(Rng(3), (4, 4, 1))
        _, report = train(params, data, data,
                          small_cfg(max_epochs=3, stop_on_train_acc=False))
        assert report.stop_reason == "max_epochs"
        assert report.epochs_run == 3

    def test_curves_deterministic_across_runs(self):
        data = square_dataset()
        r = []
        for _ in range(2):
            params = kaiming_init(Rng(5), (4, 4, 1))
            _, report = train(params, data, data,
                              small_cfg(max_epochs=4, stop_on_train_acc=False))
            r.append(report)
        assert r[0].train_loss == r[1].train_loss
        assert r[0].val_loss == r[1].val_loss

    def test_best_val_loss_is_minimum(self):
        data = square_dataset()
        params = kaiming_init(Rng(6), (4, 4, 1))
        _, report = train(params, data, data,
                          small_cfg(max_epochs=6, stop_on_train_acc=False))
        assert report.best_val_loss == min(report.val_loss)
        assert report.val_loss[report.best_epoch - 1] == report.best_val_loss

    def test_train_acc_stop_reason_consistent(self):
        data = square_dataset()
        params = kaiming_init(Rng(7), (4, 4, 1))
        _, report = train(params, data, data, small_cfg(max_epochs=400))
        if report.stop_reason == "train_acc_100":
            assert report.train_acc[-1] == 1.0

    def test_loss_decreases_smoothed_after_burn_in(self):
        """10-epoch window means are non-increasing beyond epoch 50."""
        data = square_dataset()
        params = kaiming_init(Rng(8), (4, 4, 1))
        _, report = train(params, data, data,
                          small_cfg(max_epochs=120, stop_on_train_acc=False))
        losses = report.train_loss
        windows = [sum(losses[s:s + 10]) / 10 for s in range(50, 110, 10)]
        for earlier, later in zip(windows, windows[1:]):
            assert later <= earlier + 1e-9

    def test_divergence_detected(self):
        data = square_dataset()
        params = kaiming_init(Rng(9), (4, 4, 1))
        with pytest.raises(TrainingDiverged), np.errstate(all="ignore"):
            train(params, data, data, small_cfg(lr=1e30, max_epochs=50,
                                                stop_on_train_acc=False))

    def test_returns_best_snapshot_not_alias(self):
        data = square_dataset()
        params = kaiming_init(Rng(10), (4, 4, 1))
        best, _ = train(params, data, data,
                        small_cfg(max_epochs=2, stop_on_train_acc=False))
        assert all(b is not p for b, p in zip(param_arrays(best), param_arrays(params)))


class TestAugmentedTraining:
    def test_expanded_mode_grows_dataset(self):
        data = square_dataset()
        expanded = optim._expand_dataset(data, ("rotate180", "hflip"))
        assert len(expanded) == 6

    def test_stochastic_augment_still_trains(self):
        data = square_dataset()
        params = kaiming_init(Rng(11), (4, 4, 1))
        _, report = train(params, data, data,
                          small_cfg(max_epochs=3, augment=("rotate180", "hflip", "vflip"),
                                    stop_on_train_acc=False))
        assert report.epochs_run == 3

    def test_bad_augment_op_rejected(self):
        with pytest.raises(ValueError):
            small_cfg(augment=("sharpen",))
