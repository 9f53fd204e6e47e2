import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bayesid.model import (Criterion, FirRegression, Handling, IODataset, ImpulseResponse, build_fir_regression,
                           convolve, devectorize, fit_metrics, least_squares, order_selection_baseline, simulate_oe,
                           vectorize)


def brute_force_output(coeffs, u):
    """y(t) = sum_{k=1}^{T} g_k u(t-k), written as explicit loops."""
    T, p, m = coeffs.shape
    N = u.shape[0]
    y = np.zeros((N, p))
    for t in range(N):
        for k in range(1, T + 1):
            if t - k >= 0:
                for i in range(p):
                    for j in range(m):
                        y[t, i] += coeffs[k - 1, i, j] * u[t - k, j]
    return y


def test_zeropad_regressor_unit_input():
    data = IODataset(np.array([[1.0], [0.0], [0.0]]), np.zeros((3, 1)))
    prob = build_fir_regression(data, 2, Handling.ZERO_PAD)
    np.testing.assert_array_equal(prob.Phi, [[0, 0], [1, 0], [0, 1]])


def test_trim_regressor_unit_input():
    data = IODataset(np.array([[1.0], [0.0], [0.0]]), np.array([[5.0], [6.0], [7.0]]))
    prob = build_fir_regression(data, 2, Handling.TRIM)
    np.testing.assert_array_equal(prob.Phi, [[0, 1]])
    np.testing.assert_array_equal(prob.Y, [7.0])


def test_trim_rejects_long_model():
    data = IODataset(np.ones((3, 1)), np.ones((3, 1)))
    with pytest.raises(ValueError):
        build_fir_regression(data, 4, Handling.TRIM)


def test_non_finite_data_rejected():
    with pytest.raises(ValueError):
        IODataset(np.array([[np.nan]]), np.array([[0.0]]))


def test_regressor_matches_brute_force_convolution():
    rng = np.random.default_rng(0)
    N, m, p, T = 50, 2, 2, 5
    coeffs = rng.standard_normal((T, p, m))
    u = rng.standard_normal((N, m))
    prob = build_fir_regression(IODataset(u, np.zeros((N, p))), T)
    y = brute_force_output(coeffs, u)
    assert np.abs(prob.Phi @ vectorize(coeffs) - y.T.reshape(-1)).max() < 1e-12


def test_vectorization_is_channel_major():
    T, p, m = 3, 2, 2
    coeffs = np.arange(T * p * m, dtype=float).reshape(T, p, m)
    g = vectorize(coeffs)
    # pair (i, j) in column-major order: (0,0), (1,0), (0,1), (1,1)
    expected = np.concatenate([coeffs[:, 0, 0], coeffs[:, 1, 0], coeffs[:, 0, 1], coeffs[:, 1, 1]])
    np.testing.assert_array_equal(g, expected)
    np.testing.assert_array_equal(devectorize(g, T, p, m), coeffs)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 3), st.integers(1, 3), st.integers(0, 2 ** 31 - 1))
def test_vectorization_round_trip(T, p, m, seed):
    coeffs = np.random.default_rng(seed).standard_normal((T, p, m))
    assert np.array_equal(devectorize(vectorize(coeffs), T, p, m), coeffs)


def test_pure_delay_simulation():
    g = ImpulseResponse(np.array([[[1.0]], [[0.0]]]))
    data = simulate_oe(g, np.array([[1.0], [0.0], [0.0]]), 0.0)
    np.testing.assert_array_equal(data.outputs[:, 0], [0.0, 1.0, 0.0])


def test_noiseless_round_trip_and_determinism():
    rng = np.random.default_rng(1)
    g = ImpulseResponse(rng.standard_normal((4, 2, 3)))
    u = rng.standard_normal((40, 3))
    data = simulate_oe(g, u, 0.0)
    prob = build_fir_regression(data, 4)
    assert np.abs(prob.Y - prob.Phi @ g.vectorize()).max() < 1e-12
    a = simulate_oe(g, u, 0.5, seed=7).outputs
    b = simulate_oe(g, u, 0.5, seed=7).outputs
    assert np.array_equal(a, b)


def test_simulate_dimension_mismatch():
    g = ImpulseResponse(np.ones((2, 1, 2)))
    with pytest.raises(ValueError):
        simulate_oe(g, np.ones((5, 3)))


def test_least_squares_identity_regressor():
    prob = FirRegression(np.array([3.0, -1.0]), np.eye(2), 2, 1, 1, 2)
    np.testing.assert_allclose(least_squares(prob).vectorize(), [3.0, -1.0])


def test_least_squares_exact_recovery_and_orthogonality():
    rng = np.random.default_rng(2)
    g = ImpulseResponse(rng.standard_normal((6, 1, 2)))
    data = simulate_oe(g, rng.standard_normal((80, 2)), 0.0)
    prob = build_fir_regression(data, 6)
    est = least_squares(prob)
    assert np.abs(est.vectorize() - g.vectorize()).max() < 1e-10
    assert not est.meta["rank_deficient"]
    noisy = prob.with_outputs(prob.Y + rng.standard_normal(prob.Y.size))
    gh = least_squares(noisy).vectorize()
    grad = noisy.Phi.T @ (noisy.Y - noisy.Phi @ gh)
    assert np.abs(grad).max() < 1e-8 * np.abs(noisy.Phi.T @ noisy.Y).max()


def test_least_squares_duplicated_column_min_norm():
    Phi = np.array([[1.0, 1.0], [2.0, 2.0], [0.5, 0.5]])
    Y = np.array([2.0, 4.0, 1.0])
    est = least_squares(FirRegression(Y, Phi, 2, 1, 1, 3))
    assert est.meta["rank_deficient"]
    np.testing.assert_allclose(est.vectorize(), [1.0, 1.0], atol=1e-12)


def _criterion_oracle(data, T_max, crit):
    """Recompute every score from scratch with numpy lstsq."""
    best = None
    N = data.N
    for T in range(1, T_max + 1):
        prob = build_fir_regression(data, T)
        g = np.linalg.lstsq(prob.Phi, prob.Y, rcond=None)[0]
        rss = max(float(np.sum((prob.Y - prob.Phi @ g) ** 2)), 1e-20 * float(prob.Y @ prob.Y))
        pen = 2.0 if crit == "aic" else np.log(N)
        score = N * np.log(rss / N) + pen * T
        if best is None or score < best[0]:
            best = (score, T)
    return best[1]


def test_bic_selects_one_lag_for_noiseless_delay():
    rng = np.random.default_rng(3)
    u = rng.standard_normal((60, 1))
    g = ImpulseResponse(np.array([[[0.7]]]))
    data = simulate_oe(g, u, 0.0)
    T_hat, est = order_selection_baseline(data, 5, Criterion.BIC)
    assert T_hat == 1 == _criterion_oracle(data, 5, "bic")
    np.testing.assert_allclose(est.vectorize(), [0.7], atol=1e-10)


def test_order_selection_matches_exhaustive_oracle():
    rng = np.random.default_rng(4)
    g = ImpulseResponse((0.7 ** np.arange(8))[:, None, None])
    for seed in range(5):
        data = simulate_oe(g, rng.standard_normal((120, 1)), 0.3, seed=seed)
        for crit in ("aic", "bic"):
            assert order_selection_baseline(data, 10, crit)[0] == _criterion_oracle(data, 10, crit)


def test_white_noise_output_selects_minimal_order():
    rng = np.random.default_rng(5)
    hits = 0
    for seed in range(20):
        data = IODataset(rng.standard_normal((200, 1)), rng.standard_normal((200, 1)))
        T_hat, est = order_selection_baseline(data, 8, Criterion.BIC)
        hits += T_hat == 1
        assert np.abs(est.vectorize()).max() < 0.5
    assert hits > 10


def test_aic_selects_at_least_bic_order():
    rng = np.random.default_rng(6)
    g = ImpulseResponse((0.8 ** np.arange(15))[:, None, None])
    ge = 0
    for seed in range(30):
        data = simulate_oe(g, rng.standard_normal((150, 1)), 0.5, seed=seed)
        ge += order_selection_baseline(data, 15, "aic")[0] >= order_selection_baseline(data, 15, "bic")[0]
    assert ge > 15


def test_trim_scores_on_common_samples():
    rng = np.random.default_rng(7)
    data = simulate_oe(ImpulseResponse(np.array([[[1.0]], [[0.5]]])), rng.standard_normal((30, 1)), 0.1, seed=1)
    T_hat, est = order_selection_baseline(data, 4, "bic", Handling.TRIM)
    assert est.meta["n_rows"] == 26
    with pytest.raises(ValueError):
        order_selection_baseline(data, 31, "bic", Handling.TRIM)


def test_fit_metrics_perfect_and_zero():
    rng = np.random.default_rng(8)
    g = ImpulseResponse(rng.standard_normal((5, 1, 1)))
    test = simulate_oe(g, rng.standard_normal((100, 1)), 0.0)
    rep = fit_metrics(g, g, test)
    assert rep.impulse_mse == 0 and rep.fit_percent == 100.0
    zero = ImpulseResponse(np.zeros((5, 1, 1)))
    rep0 = fit_metrics(g, zero, test)
    assert rep0.impulse_mse == pytest.approx(float(g.vectorize() @ g.vectorize()) / 5)


def test_fit_metrics_against_direct_formulas():
    rng = np.random.default_rng(9)
    g = ImpulseResponse(rng.standard_normal((4, 2, 1)))
    gh = ImpulseResponse(g.coeffs + 0.1 * rng.standard_normal((4, 2, 1)))
    test = simulate_oe(g, rng.standard_normal((60, 1)), 0.2, seed=3)
    rep = fit_metrics(g, gh, test)
    yhat = brute_force_output(gh.coeffs, test.inputs)
    y = test.outputs
    assert rep.prediction_mse == pytest.approx(np.mean((y - yhat) ** 2), rel=1e-12)
    direct = 100 * (1 - np.linalg.norm(y - yhat) / np.linalg.norm(y - y.mean()))
    assert rep.fit_percent == pytest.approx(direct, rel=1e-12)
    assert rep.impulse_mse == pytest.approx(np.sum((g.coeffs - gh.coeffs) ** 2) / 8, rel=1e-12)


def test_fit_metrics_dimension_mismatch():
    g = ImpulseResponse(np.ones((3, 1, 1)))
    test = IODataset(np.ones((5, 2)), np.ones((5, 1)))
    with pytest.raises(ValueError):
        fit_metrics(g, g, test)
