import numpy as np
import pytest
from scipy import stats

from dtgap.gapworld import (
    FACTORS,
    GapInjectionSpec,
    draw_gaps,
    observe,
    observe_array,
    total_gap_distribution,
)
from dtgap.truss import simulate

from conftest import config, random_configs


def spec_with(mean=0.0, std=0.0, seed=0):
    return GapInjectionSpec(np.broadcast_to(np.asarray(mean, float).reshape(-1, 1), (3, 42)),
                            np.broadcast_to(np.asarray(std, float).reshape(-1, 1), (3, 42)), seed)


def test_zero_spec_physical_equals_virtual(truss):
    inst = observe(truss, config(), GapInjectionSpec.zeros(), np.random.default_rng(0))
    assert np.array_equal(inst.physical.values, inst.virtual.values)
    assert inst.physical.domain == "physical"


def test_deterministic_shift(truss):
    inst = observe(truss, config(), spec_with(mean=[1e-4, 0, 0]), np.random.default_rng(0))
    assert np.array_equal(inst.physical.values, inst.virtual.values + 1e-4)


def test_physical_is_virtual_plus_draws_exactly(truss):
    spec = GapInjectionSpec.random(3)
    inst = observe(truss, config(), spec, np.random.default_rng(1))
    d = inst.draws
    assert np.array_equal(inst.physical.values, inst.virtual.values + d[0] + d[1] + d[2])
    assert np.array_equal(inst.virtual.values, simulate(truss, config()).values)


def test_same_seed_same_instance(truss):
    spec = GapInjectionSpec.random(5)
    a = observe(truss, config(), spec, np.random.default_rng(9))
    b = observe(truss, config(), spec, np.random.default_rng(9))
    assert a.physical.values.tobytes() == b.physical.values.tobytes()
    assert a.draws.tobytes() == b.draws.tobytes()


def test_observe_array_matches_sequential_observe(truss):
    spec = GapInjectionSpec.random(4)
    configs = random_configs(truss, 6, seed=2)
    rng = np.random.default_rng(17)
    seq = [observe(truss, c, spec, rng).physical.values for c in configs]
    _, batch = observe_array(truss, configs, spec, np.random.default_rng(17))
    assert np.array_equal(batch, np.stack(seq))


def test_total_gap_closed_form():
    spec = spec_with(mean=[1, 2, 3], std=[2, 3, 4])
    mean, var = total_gap_distribution(spec)
    assert np.all(mean == 6) and np.all(var == 29)
    mean, var = total_gap_distribution(GapInjectionSpec.zeros())
    assert np.all(mean == 0) and np.all(var == 0)


def test_total_variance_monte_carlo(truss):
    spec = GapInjectionSpec.random(11)
    configs = [config()] * 10_000
    virtual, physical = observe_array(truss, configs, spec, np.random.default_rng(0))
    _, var = total_gap_distribution(spec)
    emp = (physical - virtual).var(axis=0, ddof=1)
    assert np.all(np.abs(emp / var - 1) < 0.05)


def test_pooled_moments_match_closed_form():
    spec = GapInjectionSpec.random(12)
    total = draw_gaps(spec, np.random.default_rng(1), 1_000_000).sum(axis=1)
    mean, var = total_gap_distribution(spec)
    # Mean tolerance: 1% of the mean scale, floored by a Monte-Carlo SE allowance.
    se = np.sqrt(var / 1_000_000)
    assert np.all(np.abs(total.mean(axis=0) - mean) <= np.maximum(0.01 * np.abs(mean), 5 * se))
    assert np.all(np.abs(total.var(axis=0) / var - 1) < 0.01)


def test_draws_are_normal_and_independent():
    spec = GapInjectionSpec.random(13)
    d = draw_gaps(spec, np.random.default_rng(2), 100_000)
    z = (d - spec.mean) / spec.std
    assert np.max(np.abs(stats.skew(z, axis=0))) < 0.1
    assert np.max(np.abs(stats.kurtosis(z, axis=0))) < 0.2
    flat = z.reshape(len(z), -1)[:, ::7]  # subsample of (factor, sensor) columns
    corr = np.corrcoef(flat, rowvar=False)
    assert np.max(np.abs(corr - np.eye(len(corr)))) < 0.05
    # Every factor pair at one sensor.
    for j in (0, 20, 41):
        c = np.corrcoef(z[:, :, j], rowvar=False)
        assert np.max(np.abs(c - np.eye(3))) < 0.05


def test_default_magnitudes():
    spec = GapInjectionSpec.random(7)
    assert np.all(np.abs(spec.mean) <= 5e-4)
    assert np.all((spec.std >= 1e-4) & (spec.std <= 5e-4))
    assert GapInjectionSpec.random(7).mean.tobytes() == spec.mean.tobytes()


def test_json_round_trip(tmp_path):
    spec = GapInjectionSpec.random(2**63 + 5)
    spec.save(tmp_path / "spec.json")
    back = GapInjectionSpec.load(tmp_path / "spec.json")
    assert np.array_equal(back.mean, spec.mean) and np.array_equal(back.std, spec.std)
    assert back.seed == spec.seed
    assert set(spec.to_dict()["factors"]) == set(FACTORS)


@pytest.mark.parametrize("mean,std", [(np.zeros((3, 41)), np.zeros((3, 41))), (np.zeros((3, 42)), -np.ones((3, 42)))])
def test_invalid_spec(mean, std):
    with pytest.raises(ValueError):
        GapInjectionSpec(mean, std)
