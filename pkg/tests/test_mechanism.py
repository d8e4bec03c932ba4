import numpy as np
import pytest

from dropbp.mechanism import (
    DropRates,
    WarmupSchedule,
    on_grid,
    sample_decisions,
    snap_to_grid,
    uniform_rates,
    warmup_rates,
)
from dropbp.tensor import Rng


def test_uniform_rates_examples():
    assert uniform_rates(4, 0.5).rates == (0.5,) * 4
    assert uniform_rates(2, 0.0).rates == (0.0, 0.0)


def test_uniform_rates_rejects_off_grid():
    with pytest.raises(ValueError, match="grid"):
        uniform_rates(64, 0.875)
    assert uniform_rates(64, 0.875, grid=None).rates == (0.875,) * 64


def test_drop_rates_validation():
    with pytest.raises(ValueError):
        DropRates((0.05,), 0.05)
    with pytest.raises(ValueError):
        DropRates((1.2,), 0.5, grid=None)
    assert DropRates((0.3, 0.7), 0.5).mean == pytest.approx(0.5)


def test_grid_helpers():
    assert on_grid(0.3) and not on_grid(0.875)
    assert snap_to_grid(0.875) == 0.9
    assert snap_to_grid(0.75) == 0.8
    assert snap_to_grid(0.5) == 0.5


def test_warmup_rates_round_and_record():
    rates, note = warmup_rates(4, 0.875)
    assert rates.rates == (0.9,) * 4 and rates.target_avg == 0.875
    assert note["rounded"] and not note["override"]
    rates, note = warmup_rates(4, 0.875, override=0.875)
    assert rates.rates == (0.875,) * 4 and note["override"]


def test_sampling_extremes():
    rng = Rng(0)
    for it in range(50):
        assert not sample_decisions(uniform_rates(6, 0.0), it, rng).dropped.any()
        assert sample_decisions(uniform_rates(6, 1.0), it, rng).dropped.all()


def test_sampling_deterministic_per_iteration():
    rates = uniform_rates(8, 0.5)
    a = sample_decisions(rates, 17, Rng(3))
    b = sample_decisions(rates, 17, Rng(3))
    np.testing.assert_array_equal(a.dropped, b.dropped)
    assert a.iteration == 17


def test_law_of_large_numbers():
    rates = DropRates((0.0, 0.2, 0.5, 0.9), 0.4)
    rng = Rng(11)
    hits = np.array([sample_decisions(rates, it, rng).dropped for it in range(10000)])
    freq = hits.mean(axis=0)
    np.testing.assert_allclose(freq, rates.rates, atol=0.02)
    kept = (~hits).sum(axis=1).mean()
    expected = sum(1 - p for p in rates.rates)
    assert abs(kept - expected) / expected < 0.02


def test_p_half_frequency_window():
    rng = Rng(0)
    hits = np.array([sample_decisions(uniform_rates(4, 0.5), it, rng).dropped for it in range(10000)])
    assert np.all((hits.mean(0) >= 0.48) & (hits.mean(0) <= 0.52))


def test_warmup_schedule():
    s = WarmupSchedule(1000)
    assert s.boundary == 100
    assert s.phase(99) == "uniform" and s.phase(100) == "sensitivity"
    assert not s.due(99) and s.due(100)
    s.reallocated = True
    assert not s.due(100)
    with pytest.raises(ValueError):
        WarmupSchedule(0)
