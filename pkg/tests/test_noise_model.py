import numpy as np
import pytest

from ctofdot.core_types import TransientSet
from ctofdot.noise_model import (AcquisitionModel, expected_counts,
                                 pattern_scales, sample_counts)


def test_linear_scaling_below_cap():
    m = TransientSet(np.array([[100.0, 200.0, 700.0]]))  # 1000 counts/s total
    acq1 = AcquisitionModel(integration_time_ms=10.0, dark_count_rate=0.0)
    acq2 = AcquisitionModel(integration_time_ms=20.0, dark_count_rate=0.0)
    e1 = expected_counts(m, acq1).values
    e2 = expected_counts(m, acq2).values
    assert np.allclose(e2, 2.0 * e1, rtol=1e-14)
    assert e1.sum() == pytest.approx(1000.0 * 0.010)


def test_cap_renormalizes_to_exact_rate():
    m = TransientSet(np.array([[4e6, 4e6]]))  # 8 Mcounts/s, over the 5 M cap
    acq = AcquisitionModel(integration_time_ms=1000.0, dark_count_rate=0.0)
    e = expected_counts(m, acq).values
    assert e.sum() == pytest.approx(5e6, rel=1e-12)
    scales = pattern_scales(m, acq)
    assert scales[0, 0] == pytest.approx(5.0 / 8.0)


def test_zero_signal_dark_floor():
    n_t = 8
    m = TransientSet(np.zeros((3, n_t)))
    acq = AcquisitionModel(integration_time_ms=500.0)
    e = expected_counts(m, acq).values
    assert np.allclose(e, 200.0 * 0.5 / n_t, rtol=1e-14)


def test_per_detector_cap_scope():
    m = TransientSet(np.array([[[6e6], [1e6]]]))  # 2 detectors, one over cap
    acq = AcquisitionModel(integration_time_ms=1000.0, dark_count_rate=0.0,
                           cap_scope="detector")
    e = expected_counts(m, acq).values
    assert e[0, 0, 0] == pytest.approx(5e6)
    assert e[0, 1, 0] == pytest.approx(1e6)


class TestSampleCounts:
    def test_zero_expectation_always_zero(self):
        e = TransientSet(np.zeros((4, 16)))
        for seed in (0, 1, 99):
            c = sample_counts(e, seed)
            assert not c.values.any()

    def test_deterministic_per_seed(self):
        e = TransientSet(np.full((5, 20), 7.0))
        a = sample_counts(e, 42).values
        b = sample_counts(e, 42).values
        c = sample_counts(e, 43).values
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_mean_at_50(self):
        # 10^4 draws at expectation 50: mean within 3 sigma = 3*sqrt(50/1e4)
        e = TransientSet(np.full((100, 100), 50.0))
        c = sample_counts(e, 7).values
        assert abs(c.mean() - 50.0) < 3.0 * np.sqrt(50.0 / c.size)

    def test_variance_matches_mean(self):
        e = TransientSet(np.full((100, 100), 100.0))
        c = sample_counts(e, 8).values.astype(float)
        assert abs(c.var() - 100.0) / 100.0 < 0.10

    def test_integer_output(self):
        e = TransientSet(np.full((2, 3), 2.5))
        c = sample_counts(e, 1)
        assert c.values.dtype == np.int64

    def test_unbiasedness_through_pipeline(self):
        # law of large numbers at 3 sigma through expected_counts + sampling
        rng = np.random.default_rng(0)
        rates = TransientSet(rng.uniform(50, 150, size=(6, 10)))
        acq = AcquisitionModel(integration_time_ms=100.0, dark_count_rate=200.0)
        expd = expected_counts(rates, acq)
        total = np.zeros_like(expd.values)
        n_rep = 400
        for k in range(n_rep):
            total += sample_counts(expd, 1000 + k).values
        mean = total / n_rep
        sigma = np.sqrt(expd.values / n_rep)
        assert (np.abs(mean - expd.values) <= 3.5 * sigma + 1e-9).mean() > 0.99


def test_validation():
    with pytest.raises(ValueError):
        AcquisitionModel(integration_time_ms=0.0)
    with pytest.raises(ValueError):
        AcquisitionModel(integration_time_ms=1.0, dark_count_rate=-1.0)
    with pytest.raises(ValueError):
        expected_counts(TransientSet(np.array([[-1.0]]), signed=True),
                        AcquisitionModel(integration_time_ms=1.0))
