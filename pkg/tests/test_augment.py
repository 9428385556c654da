import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from perfnn.augment import (
    AugmentConfig,
    augment_batch,
    augment_sample,
    expand_dataset,
    shift_curve,
)
from perfnn.simulate import (
    AcquisitionGrid,
    ConfigError,
    GammaParams,
    SimConfig,
    generate_dataset,
    synthesize_sample,
)

GRID = AcquisitionGrid()


def test_shift_examples():
    c = np.array([1.0, 2.0, 3.0, 4.0])
    np.testing.assert_array_equal(shift_curve(c, 1), [0, 1, 2, 3])
    np.testing.assert_array_equal(shift_curve(c, 2), [0, 0, 1, 2])
    np.testing.assert_array_equal(shift_curve(c, -1), [2, 3, 4, 4])
    np.testing.assert_array_equal(shift_curve(c, 0), c)
    with pytest.raises(ConfigError):
        shift_curve(c, 4)


def test_shift_rowwise():
    rows = np.arange(8.0).reshape(2, 4)
    np.testing.assert_array_equal(shift_curve(rows, 1), [[0, 0, 1, 2], [0, 4, 5, 6]])


def test_config_validation():
    with pytest.raises(ConfigError):
        AugmentConfig(shift_range=(2, -1))
    with pytest.raises(ConfigError):
        AugmentConfig(scale_range=(0.0, 1.0))
    with pytest.raises(ConfigError):
        AugmentConfig(factor=0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=4, max_size=30), st.integers(1, 3))
def test_round_trip_on_interior(values, k):
    c = np.array(values)
    n = len(c)
    if k >= n - 1:
        return
    back = shift_curve(shift_curve(c, k), -k)
    np.testing.assert_array_equal(back[: n - k], c[: n - k])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=5, max_size=30), st.integers(-2, 2),
       st.floats(0.1, 10))
def test_shift_commutes_with_scale(values, k, c):
    x = np.array(values)
    np.testing.assert_allclose(shift_curve(c * x, k), c * shift_curve(x, k), rtol=1e-15)


def test_labels_unchanged():
    ds = generate_dataset(SimConfig(noise_sigma=1.0), 1000, 10, seed=1)
    cfg = AugmentConfig(factor=1, rng_seed=3)
    out = expand_dataset(ds, cfg)
    np.testing.assert_array_equal(out.cbf, ds.cbf)
    np.testing.assert_array_equal(out.tmax, ds.tmax)
    np.testing.assert_array_equal(out.cbv, ds.cbv)
    np.testing.assert_array_equal(out.aif_id, ds.aif_id)


def test_scale_and_shift_statistics():
    rng = np.random.default_rng(0)
    # ramp curves make the shift and scale identifiable
    base = np.tile(np.arange(1.0, 20.0), (10_000, 1))
    aif, _ = augment_batch(base, base, rng)
    # row j of the ramp becomes c * (j + 1 - k) away from the edges
    c = aif[:, 5] - aif[:, 4]
    k = np.rint(5 + 1 - aif[:, 5] / c).astype(int)
    assert set(k) == {-1, 0, 1, 2}
    counts = np.bincount(k + 1)
    assert np.all(np.abs(counts / 10_000 - 0.25) < 0.02)
    assert c.min() >= 0.7 and c.max() <= 1.3
    assert abs(c.mean() - 1.0) < 0.01


def test_expand_layout_and_determinism():
    ds = generate_dataset(SimConfig(noise_sigma=1.0), 20, 1, seed=2)
    cfg = AugmentConfig(factor=4, rng_seed=9)
    a = expand_dataset(ds, cfg)
    b = expand_dataset(ds, cfg)
    assert len(a) == 80
    np.testing.assert_array_equal(a.aif, b.aif)
    np.testing.assert_array_equal(a.cbf[4:8], np.full(4, ds.cbf[1]))
    with pytest.raises(ConfigError):
        expand_dataset(ds.subset([]), cfg)


def test_augment_sample_keeps_labels():
    ds = generate_dataset(SimConfig(noise_sigma=1.0), 1, 1, seed=4)
    s = ds[0]
    out = augment_sample(s, AugmentConfig(), np.random.default_rng(0))
    assert (out.cbf_true, out.tmax_true, out.cbv_true) == (s.cbf_true, s.tmax_true, s.cbv_true)
    assert out.aif.shape == s.aif.shape


@pytest.mark.parametrize("k, c", [(-1, 0.8), (1, 1.2), (2, 0.7), (0, 1.3)])
def test_augmented_curves_match_resimulation(k, c):
    """Shifting the bolus arrival and scaling the dose reproduces the augmented pair."""
    cfg = SimConfig(noise_sigma=0.0)
    aif = GammaParams(4.0, 3.0, 1.5, 1.0)
    aif = GammaParams(aif.t0, aif.alpha, aif.beta, 300.0 / (aif.alpha * aif.beta) ** aif.alpha / np.exp(-aif.alpha))
    irf = GammaParams(1.0, 0.5, 2.5, 0.004)
    base = synthesize_sample(aif, irf, cfg)
    moved = GammaParams(aif.t0 + k * GRID.dt, aif.alpha, aif.beta, c * aif.amp)
    ref = synthesize_sample(moved, irf, cfg)
    a_aug = c * shift_curve(base.aif, k)
    t_aug = c * shift_curve(base.tcc, k)
    interior = slice(max(k, 0) + 1, GRID.n_samples - max(-k, 0) - 1)
    assert np.max(np.abs(a_aug[interior] - ref.aif[interior])) <= 0.01 * ref.aif.max()
    assert np.max(np.abs(t_aug[interior] - ref.tcc[interior])) <= 0.01 * ref.tcc.max()
