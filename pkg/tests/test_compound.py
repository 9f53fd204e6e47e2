import numpy as np
import pytest
from scipy import integrate, stats

from bayesid.bayes import log_marginal_likelihood, posterior_mean, scalar_problem
from bayesid.compound import (RULES, CompoundProblem, bayes_shrinkage, compound_loss, eb_shrinkage,
                              eb_strawderman, james_stein, lambda_star, ml_lambda_in_coordinates, np_sign_rule,
                              output_weighted_loss, positive_part_js, risk_monte_carlo, scalar_ml_lambda,
                              shrinkage_in_coordinates, strawderman_transform, weighted_loss)


def js_risk_oracle(B, alpha_norm, sigma2=1.0):
    """Exact compound risk of James-Stein: sigma2 (1 - (B-2)^2 sigma2 E[1/|Y|^2] / B)."""
    # noncentral chi-square as a Poisson mixture of central ones: E[1/chi2_k] = 1/(k-2)
    k = np.arange(0, 5000)
    w = stats.poisson(alpha_norm ** 2 / sigma2 / 2).pmf(k)
    inv_mean = np.sum(w / (B - 2 + 2 * k)) / sigma2
    return sigma2 * (1 - (B - 2) ** 2 * sigma2 * inv_mean / B)


def test_js_oracle_at_origin_is_two_over_b():
    assert js_risk_oracle(10, 0.0) == pytest.approx(0.2, rel=1e-12)


def test_js_oracle_agrees_with_quadrature():
    dist = stats.ncx2(10, 4.0)
    inv_mean = integrate.quad(lambda x: dist.pdf(x) / x, 0, np.inf, limit=200)[0]
    assert js_risk_oracle(10, 2.0) == pytest.approx(1 - 64 * inv_mean / 10, rel=1e-8)


def test_james_stein_formula_and_domain():
    Y = np.array([3.0, 4.0, 0.0])
    np.testing.assert_allclose(james_stein(Y, 1.0), (1 - 1 / 25) * Y)
    with pytest.raises(ValueError):
        james_stein(np.ones(2), 1.0)
    with pytest.raises(ValueError):
        james_stein(np.zeros(5), 1.0)


def test_positive_part_never_flips_sign():
    rng = np.random.default_rng(0)
    Y = 0.3 * rng.standard_normal((1000, 6))
    out = positive_part_js(Y, 1.0)
    assert np.all(out * Y >= 0)
    assert np.all(positive_part_js(np.zeros(4), 1.0) == 0)


def test_eb_rule_is_positive_part_with_numerator_b():
    rng = np.random.default_rng(1)
    Y = rng.standard_normal((500, 8)) * rng.uniform(0.2, 3, (500, 1))
    s = np.sum(Y ** 2, axis=1, keepdims=True)
    expected = np.maximum(1 - 8 * 0.7 / s, 0) * Y
    np.testing.assert_allclose(eb_shrinkage(Y, 0.7), expected, rtol=1e-12, atol=1e-15)


def test_scalar_ml_lambda_maximizes_marginal_likelihood():
    rng = np.random.default_rng(2)
    for _ in range(10):
        Y = rng.standard_normal(12) * rng.uniform(0.5, 2)
        lam = scalar_ml_lambda(Y, 1.0)
        grid = np.linspace(0, 10, 100001)
        ll = -0.5 * (12 * np.log(grid + 1) + Y @ Y / (grid + 1))
        assert abs(lam - grid[np.argmax(ll)]) <= 1e-4


def test_bayes_shrinkage_limits():
    Y = np.array([1.0, -2.0])
    assert np.all(bayes_shrinkage(Y, 0.0, 1.0) == 0)
    np.testing.assert_allclose(bayes_shrinkage(Y, 1e15, 1.0), Y, rtol=1e-12)
    with pytest.raises(ValueError):
        bayes_shrinkage(Y, -1.0, 1.0)


def test_sign_rule_convention():
    s, z = np_sign_rule([-1.0, 0.0, 2.0])
    np.testing.assert_array_equal(s, [-1, 1, 1])
    assert z


def test_compound_problem_validation():
    assert CompoundProblem(np.ones(3), 1.0).B == 3
    with pytest.raises(ValueError):
        CompoundProblem(np.ones(3), 0.0)
    with pytest.raises(ValueError):
        CompoundProblem(np.ones(2), 1.0, weights=np.array([[1.0, 2.0], [2.0, 1.0]]))


def test_losses():
    assert compound_loss([1.0, 2.0], [0.0, 0.0]) == pytest.approx(2.5)
    assert weighted_loss([0.0, 0.0], [1.0, 2.0], [2.0, 1.0]) == pytest.approx(6.0)
    assert weighted_loss([0.0, 0.0], [1.0, 2.0], np.diag([2.0, 1.0])) == pytest.approx(6.0)
    rng = np.random.default_rng(3)
    Phi, K = rng.standard_normal((6, 3)), np.eye(3)
    g, gh = rng.standard_normal(3), rng.standard_normal(3)
    e = g - gh
    ref = e @ Phi.T @ Phi @ K @ Phi.T @ Phi @ e
    assert output_weighted_loss(g, gh, Phi, K) == pytest.approx(ref, rel=1e-12)


# --- Monte Carlo risk --------------------------------------------------------

@pytest.mark.parametrize("alpha_norm", [0.0, 1.0, 5.0, 20.0])
def test_js_monte_carlo_matches_exact_risk(alpha_norm):
    B = 10
    alpha = np.zeros(B)
    alpha[0] = alpha_norm
    res = risk_monte_carlo(james_stein, alpha, 1.0, 20000, seed=4)
    assert abs(res.risk - js_risk_oracle(B, alpha_norm)) < 4 * res.stderr
    assert res.n_failed == 0


def test_ls_risk_is_sigma2():
    res = risk_monte_carlo(RULES["ls"], np.ones(5), 2.0, 20000, seed=5)
    assert abs(res.risk - 2.0) < 4 * res.stderr


def test_positive_part_dominates_on_common_draws():
    alpha = np.full(10, 0.3)
    js = risk_monte_carlo(james_stein, alpha, 1.0, 20000, seed=6)
    jsp = risk_monte_carlo(positive_part_js, alpha, 1.0, 20000, seed=6)
    assert jsp.risk <= js.risk


def test_known_prior_bayes_risk():
    lam, sigma2, B = 2.0, 1.0, 4
    rng = np.random.default_rng(7)
    alpha = np.sqrt(lam) * rng.standard_normal((40000, B))
    Y = alpha + rng.standard_normal(alpha.shape)
    L = compound_loss(alpha, bayes_shrinkage(Y, lam, sigma2))
    assert abs(L.mean() - lam * sigma2 / (lam + sigma2)) < 4 * L.std() / np.sqrt(L.size)


def test_risk_counts_failures():
    def half(Y, s2):
        if np.any(Y[:, 0] > 0):
            raise ValueError("fails for positive first entry")
        return Y

    res = risk_monte_carlo(half, np.zeros(3), 1.0, 1000, seed=8)
    assert res.n_used + res.n_failed == 1000
    assert 400 < res.n_failed < 600

    def never(Y, s2):
        raise ValueError

    with pytest.raises(RuntimeError):
        risk_monte_carlo(never, np.zeros(3), 1.0, 100, seed=0)
    with pytest.raises(ValueError):
        risk_monte_carlo(james_stein, np.zeros(3), 1.0, 99, seed=0)


def test_risk_is_seed_deterministic():
    a = risk_monte_carlo(eb_shrinkage, np.ones(6), 1.0, 500, seed=9)
    b = risk_monte_carlo(eb_shrinkage, np.ones(6), 1.0, 500, seed=9)
    assert a == b


# --- Strawderman coordinates -------------------------------------------------

def random_design(rng, n=30, d=6):
    Phi = rng.standard_normal((n, d))
    Psi = rng.standard_normal((d, d)) / np.sqrt(d)
    return Phi, Psi


def test_coordinate_identities():
    rng = np.random.default_rng(10)
    for _ in range(20):
        Phi, Psi = random_design(rng)
        K = Psi @ Psi.T
        cc = strawderman_transform(Phi, Psi)
        A = cc.A
        assert np.abs(A @ K @ A.T - np.diag(cc.D)).max() <= 1e-8 * cc.D.max()
        G = Phi.T @ Phi
        assert np.abs(A @ np.linalg.solve(G, A.T) - np.eye(len(cc.D))).max() <= 1e-8
        assert cc.residuals["AKA_minus_D"] < 1e-8
        assert cc.residuals["AGinvA_minus_I"] < 1e-8


def test_coordinate_shrinkage_maps_back_to_posterior_mean():
    rng = np.random.default_rng(11)
    for _ in range(20):
        Phi, Psi = random_design(rng)
        Y = rng.standard_normal(Phi.shape[0])
        lam, s2 = rng.uniform(0.1, 3), rng.uniform(0.2, 2)
        cc = strawderman_transform(Phi, Psi, Y=Y)
        beta = shrinkage_in_coordinates(cc.Z, cc.D, lam, s2)
        g = cc.to_impulse(beta)
        ref = posterior_mean(scalar_problem(Phi, Y, s2), lam * Psi @ Psi.T, s2).g_hat.vectorize()
        assert np.linalg.norm(g - ref) <= 1e-8 * np.linalg.norm(ref)


def test_coordinate_ml_lambda_matches_full_evidence():
    rng = np.random.default_rng(12)
    Phi, Psi = random_design(rng, 25, 5)
    g = Psi @ rng.standard_normal(5)
    Y = Phi @ g + 0.5 * rng.standard_normal(25)
    cc = strawderman_transform(Phi, Psi, Y=Y)
    lam = ml_lambda_in_coordinates(cc.Z, cc.D, 0.25)
    prob = scalar_problem(Phi, Y, 0.25)
    K = Psi @ Psi.T
    grid = lam * np.linspace(0.9, 1.1, 2001)
    ll = [log_marginal_likelihood(prob, x * K, 0.25) for x in grid]
    assert abs(grid[int(np.argmax(ll))] - lam) <= 1e-4 * lam


def test_eb_strawderman_uses_weighted_mean_square():
    Z = np.array([2.0, -1.0, 0.5, 3.0])
    D = np.array([4.0, 1.0, 0.0, 2.0])
    beta, lam, flags = eb_strawderman(Z, D, 1.0)
    assert lam == pytest.approx((4 / 4 + 1 / 1 + 9 / 2) / 3)
    assert flags["excluded"] == 1 and beta[2] == 0
    np.testing.assert_allclose(beta[[0, 1, 3]], (lam * D / (lam * D + 1) * Z)[[0, 1, 3]])


def test_rank_deficient_design_flagged():
    rng = np.random.default_rng(13)
    Phi = rng.standard_normal((10, 3))
    Phi = np.column_stack([Phi, Phi[:, 0]])
    cc = strawderman_transform(Phi, np.eye(4))
    assert cc.flags["rank_deficient"]
    with pytest.raises(ValueError):
        strawderman_transform(Phi, np.eye(4), K=2 * np.eye(4))


def test_lambda_star():
    rng = np.random.default_rng(14)
    Psi = rng.standard_normal((5, 5))
    z = rng.standard_normal(5)
    assert lambda_star(Psi @ z, Psi @ Psi.T) == pytest.approx(z @ z / 5, rel=1e-8)
    K = np.diag([1.0, 1.0, 0.0])
    assert lambda_star(np.array([1.0, 2.0, 0.0]), K) == pytest.approx(2.5)
    with pytest.raises(ValueError):
        lambda_star(np.array([1.0, 0.0, 1.0]), K)


def test_eb_strawderman_identity_weights_reduce_to_closed_form():
    rng = np.random.default_rng(15)
    Z = rng.standard_normal(7)
    beta, lam, _ = eb_strawderman(Z, np.ones(7), 0.6)
    factor = 1 - 7 * 0.6 / (Z @ Z + 7 * 0.6)
    np.testing.assert_allclose(beta, factor * Z, rtol=1e-13)
