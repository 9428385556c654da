import numpy as np
import pytest

from perfnn import deconv
from perfnn.deconv import (
    LAMBDA_GRID,
    DegenerateInputError,
    Irf,
    build_volterra_matrix,
    estimate_cbf,
    estimate_tmax,
    tikhonov_filter,
    tikhonov_svd_solve,
    tune_lambda,
)
from perfnn.simulate import (
    AcquisitionGrid,
    ConfigError,
    GammaParams,
    SimConfig,
    aif_with_peak,
    gamma_variate,
    generate_dataset,
    irf_with_cbv,
)

GRID = AcquisitionGrid()


def test_volterra_hand_example():
    g = AcquisitionGrid(3, 2.0)  # dt = 1
    m = build_volterra_matrix([1.0, 1.0, 1.0], g)
    np.testing.assert_array_equal(m, [[0.5, 0, 0], [0.5, 0.5, 0], [0.5, 1.0, 0.5]])


def test_volterra_lower_triangular_and_delta_column():
    aif = np.random.default_rng(0).uniform(0, 300, 19)
    m = build_volterra_matrix(aif, GRID)
    assert np.all(np.triu(m, 1) == 0)
    h = np.zeros(19)
    h[0] = 1.0
    np.testing.assert_allclose(m @ h, GRID.dt * 0.5 * aif, rtol=1e-15)


def test_volterra_length_mismatch():
    with pytest.raises(ConfigError):
        build_volterra_matrix(np.ones(5), GRID)


def _volterra_error(n):
    # smooth gamma-variate AIF and IRF; exact convolution by high-accuracy quadrature
    from scipy import integrate

    g = AcquisitionGrid(n, 40.0)
    aif_p = GammaParams(2.0, 3.0, 2.0, 1.0)
    irf_p = GammaParams(0.0, 2.0, 3.0, 0.01)
    t = g.times
    m = build_volterra_matrix(gamma_variate(t, aif_p), g)
    approx = m @ gamma_variate(t, irf_p)
    exact = np.array([integrate.quad(lambda s: gamma_variate(ti - s, aif_p) * gamma_variate(s, irf_p),
                                     0, ti, epsabs=1e-14, limit=200)[0] if ti > 0 else 0.0 for ti in t])
    return np.max(np.abs(approx - exact))


def test_volterra_second_order_convergence():
    coarse = _volterra_error(19)
    fine = _volterra_error(37)  # half the step
    assert coarse / fine >= 3.0


def test_tikhonov_filter_units():
    assert tikhonov_filter(2.0, 0.0) == 1.0
    assert tikhonov_filter(3.0, 3.0) == 0.5
    np.testing.assert_array_equal(tikhonov_filter(np.array([1.0, 5.0]), 0.0), [1.0, 1.0])


def test_exact_solve_in_small_lambda_limit():
    rng = np.random.default_rng(1)
    aif = 100 + rng.uniform(0, 50, 19)  # well-conditioned
    m = build_volterra_matrix(aif, GRID)
    tcc = m @ rng.uniform(0, 0.01, 19)
    h = tikhonov_svd_solve(m, tcc, 1e-12, GRID).values
    assert np.linalg.norm(m @ h - tcc) / np.linalg.norm(tcc) < 1e-6


def test_zero_aif_is_degenerate():
    with pytest.raises(DegenerateInputError):
        tikhonov_svd_solve(np.zeros((19, 19)), np.ones(19), 0.1)
    with pytest.raises(DegenerateInputError):
        deconv.deconvolve(np.zeros((2, 19)), np.ones((2, 19)), GRID, [0.1])


def test_batch_matches_single_solve():
    ds = generate_dataset(SimConfig(noise_sigma=1.0), 5, 1, seed=3)
    batch = deconv.deconvolve(ds.aif, ds.tcc, GRID, [0.02, 0.3])
    for k in range(5):
        for j, lam in enumerate([0.02, 0.3]):
            single = tikhonov_svd_solve(build_volterra_matrix(ds.aif[k], GRID), ds.tcc[k], lam, GRID).values
            np.testing.assert_allclose(batch[k, j], single, rtol=1e-10, atol=1e-14)


def test_solution_invariant_under_svd_sign_flips():
    ds = generate_dataset(SimConfig(noise_sigma=1.0), 1, 1, seed=5)
    m = build_volterra_matrix(ds.aif[0], GRID)
    u, s, vt = np.linalg.svd(m)
    flips = np.where(np.random.default_rng(0).random(19) < 0.5, -1.0, 1.0)
    h1 = deconv._filtered_inverse(u, s, vt, ds.tcc[0], 0.05)
    h2 = deconv._filtered_inverse(u * flips, s, flips[:, None] * vt, ds.tcc[0], 0.05)
    np.testing.assert_allclose(h1, h2, rtol=0, atol=1e-10 * np.abs(h1).max())


def test_linearity_and_scale_equivariance():
    ds = generate_dataset(SimConfig(noise_sigma=1.0), 2, 1, seed=7)
    m = build_volterra_matrix(ds.aif[0], GRID)
    t1, t2 = ds.tcc[0], ds.tcc[1]
    h1 = tikhonov_svd_solve(m, t1, 0.08, GRID).values
    h2 = tikhonov_svd_solve(m, t2, 0.08, GRID).values
    h12 = tikhonov_svd_solve(m, 2.5 * t1 - 0.7 * t2, 0.08, GRID).values
    np.testing.assert_allclose(h12, 2.5 * h1 - 0.7 * h2, rtol=1e-9, atol=1e-9 * np.abs(h12).max())
    hc = deconv.deconvolve(3.7 * ds.aif[:1], 3.7 * ds.tcc[:1], GRID, [0.08])[0, 0]
    np.testing.assert_allclose(hc, h1, rtol=1e-9, atol=1e-9 * np.abs(h1).max())


def test_noiseless_peak_index_recovered():
    cfg = SimConfig(noise_sigma=0.0)
    aif = aif_with_peak(2.0, 2.5, 2.0, 300.0)
    # Tmax on grid point 6 (t = 13.33 s)
    irf = irf_with_cbv(6 * GRID.dt - 0.4 * 3.0, 0.4, 3.0, 0.05)
    from perfnn.simulate import synthesize_sample

    s = synthesize_sample(aif, irf, cfg)
    h = tikhonov_svd_solve(build_volterra_matrix(s.aif, GRID), s.tcc, 0.01, GRID).values
    assert np.argmax(h) == 6


# --- CBF / Tmax readout -------------------------------------------------------

def test_estimate_cbf_examples():
    v = np.zeros(19)
    v[4] = 0.01
    assert estimate_cbf(Irf(v, GRID), 1.04) == pytest.approx(0.01 / 1.04 * 6000)
    assert estimate_cbf(Irf(v, GRID)) == pytest.approx(57.6923, abs=1e-4)
    assert estimate_cbf(Irf(np.zeros(19), GRID)) == 0.0
    assert estimate_cbf(Irf(-np.ones(19), GRID)) == 0.0


def test_estimate_tmax_examples():
    g = AcquisitionGrid(21, 20.0)  # dt = 1
    v = np.zeros(21)
    v[9:12] = [1, 2, 1]
    assert estimate_tmax(Irf(v, g)) == 10.0
    v = np.zeros(21)
    v[9:12] = [1, 2, 2]
    # vertex = t_i + dt/2 * (v- - v+) / (v- - 2 v0 + v+) = 10 + 0.5 * (-1) / (-1) = 10.5
    assert estimate_tmax(Irf(v, g)) == pytest.approx(10.5)
    v = np.linspace(1, 0, 21)
    assert estimate_tmax(Irf(v, g)) == 0.0
    assert estimate_tmax(Irf(v[::-1], g)) == 20.0


def test_estimate_tmax_without_refinement():
    v = np.zeros(19)
    v[5:8] = [1, 2, 2]
    assert estimate_tmax(Irf(v, GRID), spline_refine=False) == pytest.approx(6 * GRID.dt)


@pytest.mark.parametrize("seed", range(20))
def test_parabola_vertex_exact(seed):
    rng = np.random.default_rng(seed)
    t = GRID.times
    vertex = rng.uniform(t[1] + 0.01, t[-2] - 0.01)
    v = -rng.uniform(0.1, 3) * (t - vertex) ** 2 + rng.uniform(0, 5)
    assert estimate_tmax(Irf(v, GRID)) == pytest.approx(vertex, abs=1e-12)


def test_batch_tmax_shapes():
    vals = np.random.default_rng(0).random((4, 3, 19))
    out = estimate_tmax(vals, GRID)
    assert out.shape == (4, 3)
    assert out[2, 1] == estimate_tmax(vals[2, 1], GRID)


# --- lambda tuning --------------------------------------------------------------

def test_tune_lambda_single_candidate():
    ds = generate_dataset(SimConfig(noise_sigma=1.0), 50, 1, seed=2)
    assert tune_lambda(ds, "cbf", [0.16]) == 0.16


def test_tune_lambda_ties_pick_smaller(monkeypatch):
    ds = generate_dataset(SimConfig(noise_sigma=1.0), 20, 1, seed=2)
    monkeypatch.setattr(deconv, "score", lambda e, t, target: 1.0)
    assert tune_lambda(ds, "tmax", [0.32, 0.08]) == 0.08


def test_tune_lambda_empty():
    ds = generate_dataset(SimConfig(), 1, 1, seed=0).subset([])
    with pytest.raises(ConfigError):
        tune_lambda(ds, "cbf")


def test_lambda_grid_values():
    assert LAMBDA_GRID[0] == 0.01 and LAMBDA_GRID[-1] == pytest.approx(5.12)
    assert len(LAMBDA_GRID) == 10


@pytest.mark.parametrize("target", ["cbf", "tmax"])
def test_tuned_lambda_grows_with_noise(target):
    cfg = SimConfig(cbv_range=(0.02, 0.06) if target == "tmax" else (0.001, 0.06))
    low = tune_lambda(generate_dataset(cfg.replace(noise_sigma=0.1), 2000, 1, seed=11), target)
    high = tune_lambda(generate_dataset(cfg.replace(noise_sigma=3.2), 2000, 1, seed=11), target)
    assert high >= low
    assert low in LAMBDA_GRID and high in LAMBDA_GRID
