import numpy as np
import pytest

from ozsl import openset as om
from ozsl.errors import DomainError, FlatTailError, ValidationError


class TestFitWeibull:
    def test_recovers_known_shape(self):
        # sampling oracle: draw from Weibull(k=2, lambda=1), fit the full sample
        rng = np.random.default_rng(0)
        d = 1.0 * rng.weibull(2.0, size=1000)
        model = om.fit_weibull(d, tail_size=1000)
        assert abs(model.shape - 2.0) / 2.0 < 0.10

    def test_two_distinct_tail_points_finite_positive(self):
        model = om.fit_weibull([0.5, 1.0, 1.5, 2.0], tail_size=2)
        assert np.isfinite(model.shape) and model.shape > 0
        assert np.isfinite(model.scale) and model.scale > 0

    def test_cdf_axioms(self):
        rng = np.random.default_rng(1)
        model = om.fit_weibull(rng.weibull(1.5, 200), tail_size=50)
        assert model.cdf(model.tau) == 0.0
        grid = np.linspace(model.tau - 1.0, model.tau + 5.0, 200)
        values = [model.cdf(g) for g in grid]
        assert all(b >= a for a, b in zip(values, values[1:]))
        assert 0.0 <= min(values) and max(values) <= 1.0

    def test_flat_tail_rejected(self):
        with pytest.raises(FlatTailError):
            om.fit_weibull([3.0] * 10, tail_size=5)

    def test_zero_distances_flat_tail(self):
        with pytest.raises(FlatTailError):
            om.fit_weibull([0.0, 0.0, 0.0], tail_size=3)

    def test_validation(self):
        with pytest.raises(ValidationError):
            om.fit_weibull([1.0, 2.0, 3.0], tail_size=1)
        with pytest.raises(ValidationError):
            om.fit_weibull([1.0], tail_size=2)
        with pytest.raises(DomainError):
            om.fit_weibull([-1.0, 1.0, 2.0], tail_size=2)

    def test_unshifted_fit_recovers_both_parameters(self):
        # heavy tail (k = 0.5) has noisy single-sample estimates; check medians
        rng = np.random.default_rng(2)
        shapes, scales = [], []
        for _ in range(5):
            d = 2.0 * rng.weibull(0.5, size=1000)
            model = om.fit_weibull(d, tail_size=1000, shift="none")
            assert model.tau == 0.0
            shapes.append(model.shape)
            scales.append(model.scale)
        assert abs(np.median(shapes) - 0.5) / 0.5 < 0.10
        assert abs(np.median(scales) - 2.0) / 2.0 < 0.10


class TestCalibrations:
    def gaussians(self, seed=3, n=200, centers=((0.0, 0.0), (10.0, 10.0))):
        rng = np.random.default_rng(seed)
        return {
            f"c{i}": np.asarray(c) + rng.normal(size=(n, 2))
            for i, c in enumerate(centers)
        }

    def test_cardinality_and_mav_centers(self):
        data = self.gaussians()
        cals = om.compute_calibrations(data, tail_size=20)
        assert len(cals) == 2
        # known-center oracle: MAV within 3 standard errors of the true mean
        for cal, center in zip(cals, ((0.0, 0.0), (10.0, 10.0))):
            se = 1.0 / np.sqrt(200)
            assert np.all(np.abs(cal.mav.ravel() - center) < 3 * se + 1e-9)

    def test_identical_activations_hit_flat_tail(self):
        with pytest.raises(FlatTailError):
            om.compute_calibrations({"a": np.ones((10, 3))}, tail_size=5)

    def test_small_class_falls_back_with_warning(self):
        data = self.gaussians()
        data["tiny"] = np.random.default_rng(4).normal(size=(5, 2)) + 20.0
        with pytest.warns(UserWarning, match="tiny"):
            cals = om.compute_calibrations(data, tail_size=50)
        assert all(c.weibull.tail_size == 5 for c in cals)


def far_probe_calibrations():
    rng = np.random.default_rng(5)
    data = {
        "a": rng.normal(size=(100, 2)) * 0.5,
        "b": rng.normal(size=(100, 2)) * 0.5 + np.array([6.0, 0.0]),
    }
    return om.compute_calibrations(data, tail_size=20)


class TestPredictHeads:
    def test_softmax_one_hot_and_ties(self):
        assert om.softmax_predict([0.0, 3.0, 0.0]) == 1
        assert om.softmax_predict([1.0, 1.0, 1.0]) == 0  # tie -> lowest id
        assert om.softmax_predict([0.5, 0.5, 0.1]) == 0

    def test_zero_cdf_matches_softmax(self):
        cals = far_probe_calibrations()
        # probe exactly at class a's MAV with alpha_top=1: the only relevant
        # CDF is zero, so no mass is rejected and the decision is the argmax
        probe = cals[0].mav.ravel()
        pred = om.openmax_predict(probe, cals, alpha_top=1)
        assert pred.probs[-1] == 0.0
        assert pred.decision == "a"
        assert om.softmax_predict(probe) == 0

    def test_far_probe_rejected(self):
        cals = far_probe_calibrations()
        probe = np.array([300.0, -440.0])
        pred = om.openmax_predict(probe, cals, alpha_top=2)
        assert pred.decision == om.REJECT
        assert pred.probs[-1] == max(pred.probs)

    def test_probabilities_form_simplex(self):
        cals = far_probe_calibrations()
        rng = np.random.default_rng(6)
        for _ in range(50):
            probe = rng.normal(size=2) * rng.uniform(0.5, 50)
            pred = om.openmax_predict(probe, cals, alpha_top=2)
            assert pred.probs.shape == (3,)
            assert np.all(pred.probs >= 0)
            assert pred.probs.sum() == pytest.approx(1.0, abs=1e-9)

    def test_rejection_monotone_in_distance(self):
        # same activation vector handed to calibrations whose MAVs recede
        rng = np.random.default_rng(7)
        base = rng.normal(size=(150, 3))
        probe = np.array([2.0, -1.0, 0.5])
        prev = -1.0
        for pull in np.linspace(0.0, 40.0, 15):
            shifted = {
                "a": base + pull,
                "b": base + np.array([5.0, 0.0, 0.0]) + pull,
                "c": base + np.array([0.0, 5.0, 0.0]) + pull,
            }
            cals = om.compute_calibrations(shifted, tail_size=30)
            pred = om.openmax_predict(probe, cals, alpha_top=3)
            assert pred.probs[-1] >= prev - 1e-12
            prev = pred.probs[-1]

    def test_validation(self):
        cals = far_probe_calibrations()
        with pytest.raises(ValidationError):
            om.openmax_predict([1.0, 2.0, 3.0], cals)
        with pytest.raises(ValidationError):
            om.openmax_predict([1.0, 2.0], cals, alpha_top=5)


def test_unknown_cluster_recall_beats_softmax():
    """Simulation oracle: a far third cluster is rejected by the calibrated
    head while plain softmax, by construction, never rejects."""
    rng = np.random.default_rng(8)
    known = {
        "a": rng.normal(size=(150, 2)) + np.array([0.0, 0.0]),
        "b": rng.normal(size=(150, 2)) + np.array([8.0, 0.0]),
    }
    cals = om.compute_calibrations(known, tail_size=10)
    unknown_probes = rng.normal(size=(100, 2)) * 0.8 + np.array([4.0, 60.0])

    def activations(x):
        # toy 2-class activation: negative squared distance to each center
        return np.array([
            -np.sum((x - np.array([0.0, 0.0])) ** 2),
            -np.sum((x - np.array([8.0, 0.0])) ** 2),
        ]) / 10.0

    openmax_rejects = 0
    for x in unknown_probes:
        a = activations(x)
        if om.openmax_predict(a, cals, alpha_top=2).decision == om.REJECT:
            openmax_rejects += 1
        assert om.softmax_predict(a) in (0, 1)  # softmax cannot reject
    assert openmax_rejects > 0


def test_tail_size_range():
    assert om.tail_size_range() == [2, 3, 4, 5, 6, 7, 8, 9, 10]
    with pytest.raises(ValidationError):
        om.tail_size_range(1, 5)


def test_calibration_file_round_trip(tmp_path):
    cals = far_probe_calibrations()
    path = tmp_path / "calibrations.bin"
    om.save_calibrations(path, cals)
    back = om.load_calibrations(path)
    assert [c.class_id for c in back] == [c.class_id for c in cals]
    for a, b in zip(cals, back):
        np.testing.assert_array_equal(a.mav, b.mav)
        assert a.weibull == b.weibull
