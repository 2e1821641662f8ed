import numpy as np
import pytest
from scipy import integrate
from scipy.stats import multivariate_normal, norm

from envelope_em.data.dataset_model import MissPattern, ObservedDataset, pattern_of
from envelope_em.data.fit_model import BernoulliPredictor, NormalPredictor, RegressionParams
from envelope_em.errors import NotPSD, SingularObservedBlock
from envelope_em.services.moment_service import (
    MomentAccumulators,
    accumulate,
    bernoulli_cond_moments,
    bernoulli_posterior,
    build_joint,
    cond_normal_moments,
    expected_complete_loglik,
    observed_loglik,
    observed_loglik_bernoulli,
    observed_loglik_normal,
)
from envelope_em.services.moment_service import _normal_pattern_sums


def _random_params(rng, make_spd, p, r):
    beta = rng.uniform(-2.0, 2.0, size=(r, p))
    sigma = make_spd(rng, r)
    mux = rng.uniform(-1.0, 1.0, size=p)
    sigmax = make_spd(rng, p)
    return beta, sigma, mux, sigmax


def test_build_joint_blocks(rng, make_spd):
    beta, sigma, mux, sigmax = _random_params(rng, make_spd, 2, 3)
    jp = build_joint(beta, sigma, mux, sigmax)
    np.testing.assert_allclose(jp.mu_tilde, np.concatenate([mux, beta @ mux]))
    np.testing.assert_allclose(jp.sigma_tilde[2:, :2], beta @ sigmax)
    np.testing.assert_allclose(jp.sigma_tilde[2:, 2:], sigma + beta @ sigmax @ beta.T)


def test_build_joint_rejects_indefinite():
    with pytest.raises(NotPSD):
        build_joint(np.ones((2, 1)), -np.eye(2), np.zeros(1), np.eye(1))


def test_bivariate_cases_match_closed_form(rng):
    for _ in range(100):
        b = rng.uniform(-3.0, 3.0)
        s = rng.uniform(0.1, 4.0)
        mu = rng.uniform(-2.0, 2.0)
        sx = rng.uniform(0.1, 4.0)
        jp = build_joint([[b]], [[s]], [mu], [[sx]])
        x, y = rng.standard_normal(2) * 2.0

        # y missing
        a1, a2, a3, a4 = cond_normal_moments(np.array([x, np.nan]), MissPattern.from_mask([True, False]), jp)
        assert a1[0, 0] == pytest.approx((b * x) ** 2 + s, rel=1e-10, abs=1e-10)
        assert a2[0, 0] == pytest.approx(b * x * x, rel=1e-10, abs=1e-10)
        assert a3[0, 0] == pytest.approx(x * x, rel=1e-10, abs=1e-10)
        assert a4[0] == pytest.approx(x, rel=1e-10, abs=1e-10)

        # x missing
        var_y = s + b * b * sx
        mean = mu + b * sx / var_y * (y - b * mu)
        var = sx - (b * sx) ** 2 / var_y
        a1, a2, a3, a4 = cond_normal_moments(np.array([np.nan, y]), MissPattern.from_mask([False, True]), jp)
        assert a1[0, 0] == pytest.approx(y * y, rel=1e-10, abs=1e-10)
        assert a2[0, 0] == pytest.approx(y * mean, rel=1e-10, abs=1e-10)
        assert a3[0, 0] == pytest.approx(mean ** 2 + var, rel=1e-10, abs=1e-10)
        assert a4[0] == pytest.approx(mean, rel=1e-10, abs=1e-10)


def _stacked_moments(a1, a2, a3, a4):
    """Reassemble (E d, E ddᵀ) for d = (x, y) from the accumulator blocks."""
    p = a3.shape[0]
    second = np.block([[a3, a2.T], [a2, a1]])
    return a4, second[:p, :p], second


def _precision_conditional(mu, cov, obs, mis, values):
    prec = np.linalg.inv(cov)
    cond_cov = np.linalg.inv(prec[np.ix_(mis, mis)])
    cond_mean = mu[mis] - cond_cov @ prec[np.ix_(mis, obs)] @ (values[obs] - mu[obs])
    return cond_mean, cond_cov


def test_one_missing_coordinate_matches_quadrature(rng, make_spd):
    for _ in range(20):
        beta, sigma, mux, sigmax = _random_params(rng, make_spd, 1, 2)
        jp = build_joint(beta, sigma, mux, sigmax)
        dist = multivariate_normal(jp.mu_tilde, jp.sigma_tilde)
        values = dist.rvs(random_state=rng)
        mis = int(rng.integers(3))
        obs = [i for i in range(3) if i != mis]
        mean, cov = _precision_conditional(jp.mu_tilde, jp.sigma_tilde, obs, [mis], values)
        lo, hi = mean[0] - 12 * np.sqrt(cov[0, 0]), mean[0] + 12 * np.sqrt(cov[0, 0])

        def density(z):
            point = values.copy()
            point[mis] = z
            return dist.pdf(point)

        mass = integrate.quad(density, lo, hi, epsabs=0, epsrel=1e-12)[0]
        first = integrate.quad(lambda z: z * density(z), lo, hi, epsabs=0, epsrel=1e-12)[0] / mass
        second = integrate.quad(lambda z: z * z * density(z), lo, hi, epsabs=0, epsrel=1e-12)[0] / mass

        row = values.copy()
        row[mis] = np.nan
        a1, a2, a3, a4 = cond_normal_moments(row, MissPattern.from_mask(np.arange(3) != mis), jp)
        d_first, _, d_second = _stacked_moments(a1, a2, a3, a4)
        expected_first = values.copy()
        expected_first[mis] = first
        expected_second = np.outer(expected_first, expected_first)
        expected_second[mis, mis] = second
        np.testing.assert_allclose(d_second, expected_second, rtol=1e-6, atol=1e-6)
        if mis == 0:
            assert a4[0] == pytest.approx(first, rel=1e-6, abs=1e-6)


def test_two_missing_coordinates_match_quadrature(rng, make_spd):
    for _ in range(3):
        beta, sigma, mux, sigmax = _random_params(rng, make_spd, 1, 2)
        jp = build_joint(beta, sigma, mux, sigmax)
        dist = multivariate_normal(jp.mu_tilde, jp.sigma_tilde)
        values = dist.rvs(random_state=rng)
        mean, cov = _precision_conditional(jp.mu_tilde, jp.sigma_tilde, [2], [0, 1], values)
        sd = np.sqrt(np.diag(cov))
        box = (mean[0] - 10 * sd[0], mean[0] + 10 * sd[0], mean[1] - 10 * sd[1], mean[1] + 10 * sd[1])

        def moment(f):
            return integrate.dblquad(
                lambda z1, z0: f(z0, z1) * dist.pdf([z0, z1, values[2]]),
                box[0], box[1], box[2], box[3], epsabs=0, epsrel=1e-9)[0]

        mass = moment(lambda z0, z1: 1.0)
        e_x = moment(lambda z0, z1: z0) / mass
        e_xy = moment(lambda z0, z1: z0 * z1) / mass
        e_yy = moment(lambda z0, z1: z1 * z1) / mass

        row = np.array([np.nan, np.nan, values[2]])
        a1, a2, a3, a4 = cond_normal_moments(row, MissPattern.from_mask([False, False, True]), jp)
        assert a4[0] == pytest.approx(e_x, rel=1e-6, abs=1e-6)
        assert a2[0, 0] == pytest.approx(e_xy, rel=1e-6, abs=1e-6)
        assert a1[0, 0] == pytest.approx(e_yy, rel=1e-6, abs=1e-6)
        assert a2[1, 0] == pytest.approx(values[2] * e_x, rel=1e-6, abs=1e-6)


def _enumerated_bernoulli(row, beta, sigma, pi, c):
    """Exact conditional moments by summing over x in {0, c}."""
    b = beta[:, 0]
    y = row[1:]
    obs = [i for i in range(len(y)) if not np.isnan(y[i])]
    mis = [i for i in range(len(y)) if np.isnan(y[i])]
    weights, means = [], []
    for x, prior in ((0.0, 1.0 - pi), (c, pi)):
        like = multivariate_normal(b[obs] * x, sigma[np.ix_(obs, obs)]).pdf(y[obs]) if obs else 1.0
        weights.append(prior * like)
        mean = y.copy()
        if mis:
            gain = sigma[np.ix_(mis, obs)] @ np.linalg.inv(sigma[np.ix_(obs, obs)]) if obs else np.zeros((len(mis), 0))
            mean[mis] = b[mis] * x + gain @ (y[obs] - b[obs] * x)
        means.append(mean)
    weights = np.array(weights) / sum(weights)
    schur = np.zeros((len(y), len(y)))
    if mis:
        s_mm = sigma[np.ix_(mis, mis)]
        if obs:
            s_oo = sigma[np.ix_(obs, obs)]
            s_mm = s_mm - sigma[np.ix_(mis, obs)] @ np.linalg.solve(s_oo, sigma[np.ix_(obs, mis)])
        schur[np.ix_(mis, mis)] = s_mm
    a1 = sum(w * np.outer(m, m) for w, m in zip(weights, means)) + schur
    a2 = (c * weights[1] * means[1]).reshape(-1, 1)
    return weights[1], a1, a2, np.array([[c * c * weights[1]]]), np.array([c * weights[1]])


def test_bernoulli_moments_match_enumeration(rng, make_spd):
    r = 3
    for _ in range(100):
        beta = rng.uniform(-1.0, 1.0, size=(r, 1))
        sigma = make_spd(rng, r)
        pi = rng.uniform(0.1, 0.9)
        c = rng.uniform(0.5, 3.0)
        x = c * rng.binomial(1, pi)
        y = beta[:, 0] * x + rng.multivariate_normal(np.zeros(r), sigma)
        row = np.concatenate([[np.nan], y])
        y_missing = rng.random(r) < 0.3
        if y_missing.all():
            y_missing[0] = False
        row[1:][y_missing] = np.nan
        pattern = MissPattern.from_mask(~np.isnan(row))

        pi_tilde, e_a1, e_a2, e_a3, e_a4 = _enumerated_bernoulli(row, beta, sigma, pi, c)
        posterior = bernoulli_posterior(row, pattern, beta, sigma, pi, scale=c)
        assert posterior.pi_tilde == pytest.approx(pi_tilde, abs=1e-8)
        a1, a2, a3, a4 = bernoulli_cond_moments(row, pattern, beta, sigma, posterior)
        np.testing.assert_allclose(a1, e_a1, atol=1e-8, rtol=1e-8)
        np.testing.assert_allclose(a2, e_a2, atol=1e-8, rtol=1e-8)
        np.testing.assert_allclose(a3, e_a3, atol=1e-8, rtol=1e-8)
        np.testing.assert_allclose(a4, e_a4, atol=1e-8, rtol=1e-8)


def test_bernoulli_posterior_with_observed_x():
    row = np.array([2.0, 1.0, np.nan])
    pattern = MissPattern.from_mask([True, True, False])
    posterior = bernoulli_posterior(row, pattern, np.ones((2, 1)), np.eye(2), 0.3, scale=2.0)
    assert posterior.pi_tilde == 1.0


def test_bernoulli_posterior_with_zero_slope_keeps_prior():
    row = np.array([np.nan, 1.0])
    pattern = MissPattern.from_mask([False, True])
    posterior = bernoulli_posterior(row, pattern, np.zeros((1, 1)), np.eye(1), 0.3, scale=1.0)
    assert posterior.pi_tilde == pytest.approx(0.3)


def test_accumulate_sums_row_moments(masked_dataset, rng, make_spd):
    ds = masked_dataset
    beta, sigma, mux, sigmax = _random_params(rng, make_spd, ds.p, ds.r)
    acc = accumulate(ds, RegressionParams(beta, sigma), NormalPredictor(mux, sigmax))
    jp = build_joint(beta, sigma, mux, sigmax)
    rows = [cond_normal_moments(ds.joint[i], pattern_of(i, ds), jp) for i in range(ds.n)]
    total = MomentAccumulators(*(sum(parts) for parts in zip(*rows)), n_eff=ds.n)
    assert acc.n_eff == ds.n
    np.testing.assert_allclose(acc.a1, total.a1, rtol=1e-10, atol=1e-8)
    np.testing.assert_allclose(acc.a2, total.a2, rtol=1e-10, atol=1e-8)
    np.testing.assert_allclose(acc.a3, total.a3, rtol=1e-10, atol=1e-8)
    np.testing.assert_allclose(acc.a4, total.a4, rtol=1e-10, atol=1e-8)


def test_accumulate_on_complete_data_is_raw_cross_products(rng):
    x = rng.standard_normal((30, 2))
    y = rng.standard_normal((30, 3))
    ds = ObservedDataset.from_arrays(x, y)
    acc = accumulate(ds, RegressionParams(np.zeros((3, 2)), np.eye(3)), NormalPredictor(np.zeros(2), np.eye(2)))
    expected = MomentAccumulators.from_complete(x, y)
    np.testing.assert_allclose(acc.a1, expected.a1, atol=1e-10)
    np.testing.assert_allclose(acc.a2, expected.a2, atol=1e-10)
    np.testing.assert_allclose(acc.a3, expected.a3, atol=1e-10)


def test_bernoulli_accumulate_needs_one_predictor(masked_dataset):
    with pytest.raises(ValueError):
        accumulate(masked_dataset, RegressionParams(np.zeros((4, 2)), np.eye(4)), BernoulliPredictor(0.5))


def test_singular_observed_block():
    jp = build_joint(np.zeros((2, 1)), np.zeros((2, 2)), np.zeros(1), np.zeros((1, 1)))
    with pytest.raises(SingularObservedBlock):
        cond_normal_moments(np.array([1.0, 2.0, np.nan]), MissPattern.from_mask([True, True, False]), jp)


def test_observed_loglik_complete_data(rng, make_spd):
    beta, sigma, mux, sigmax = _random_params(rng, make_spd, 2, 3)
    jp = build_joint(beta, sigma, mux, sigmax)
    joint = multivariate_normal(jp.mu_tilde, jp.sigma_tilde).rvs(size=40, random_state=rng)
    ds = ObservedDataset.from_arrays(joint[:, :2], joint[:, 2:])
    expected = multivariate_normal(jp.mu_tilde, jp.sigma_tilde).logpdf(joint).sum()
    assert observed_loglik_normal(ds, jp) == pytest.approx(expected, rel=1e-10)
    assert observed_loglik(ds, RegressionParams(beta, sigma), NormalPredictor(mux, sigmax)) == \
        pytest.approx(expected, rel=1e-10)


def test_observed_loglik_drops_missing_coordinates(rng, make_spd):
    beta, sigma, mux, sigmax = _random_params(rng, make_spd, 1, 2)
    jp = build_joint(beta, sigma, mux, sigmax)
    ds = ObservedDataset.from_arrays([[np.nan], [0.5]], [[1.0, 2.0], [np.nan, -1.0]])
    expected = (multivariate_normal(jp.mu_tilde[1:], jp.sigma_tilde[1:, 1:]).logpdf([1.0, 2.0])
                + multivariate_normal(jp.mu_tilde[[0, 2]], jp.sigma_tilde[np.ix_([0, 2], [0, 2])]).logpdf([0.5, -1.0]))
    assert observed_loglik_normal(ds, jp) == pytest.approx(expected, rel=1e-10)


def test_observed_loglik_bernoulli(rng, make_spd):
    beta = rng.uniform(-1.0, 1.0, size=(2, 1))
    sigma = make_spd(rng, 2)
    model = BernoulliPredictor(pi=0.3, scale=2.0)
    ds = ObservedDataset.from_arrays([[2.0], [np.nan]], [[1.0, 0.5], [np.nan, 0.2]])
    first = np.log(0.3) + multivariate_normal(beta[:, 0] * 2.0, sigma).logpdf([1.0, 0.5])
    second = np.log(0.3 * norm(beta[1, 0] * 2.0, np.sqrt(sigma[1, 1])).pdf(0.2)
                    + 0.7 * norm(0.0, np.sqrt(sigma[1, 1])).pdf(0.2))
    value = observed_loglik_bernoulli(ds, RegressionParams(beta, sigma), model)
    assert value == pytest.approx(first + second, rel=1e-10)


def test_expected_loglik_on_complete_data_is_loglik(rng, make_spd):
    beta, sigma, mux, sigmax = _random_params(rng, make_spd, 2, 3)
    x = rng.multivariate_normal(mux, sigmax, size=50)
    y = x @ beta.T + rng.multivariate_normal(np.zeros(3), sigma, size=50)
    acc = MomentAccumulators.from_complete(x, y)
    q = expected_complete_loglik(acc, beta, sigma, NormalPredictor(mux, sigmax), 50)
    expected = (multivariate_normal(np.zeros(3), sigma).logpdf(y - x @ beta.T).sum()
                + multivariate_normal(mux, sigmax).logpdf(x).sum())
    assert q == pytest.approx(expected, rel=1e-10)


def test_expected_loglik_bernoulli_complete_data(rng, make_spd):
    c, pi = 2.0, 0.4
    x = c * rng.binomial(1, pi, size=(40, 1)).astype(float)
    beta = rng.uniform(-1.0, 1.0, size=(2, 1))
    sigma = make_spd(rng, 2)
    y = x @ beta.T + rng.multivariate_normal(np.zeros(2), sigma, size=40)
    acc = MomentAccumulators.from_complete(x, y)
    q = expected_complete_loglik(acc, beta, sigma, BernoulliPredictor(pi, c), 40)
    k = float((x > 0).sum())
    expected = (multivariate_normal(np.zeros(2), sigma).logpdf(y - x @ beta.T).sum()
                + k * np.log(pi) + (40 - k) * np.log(1 - pi))
    assert q == pytest.approx(expected, rel=1e-10)


def test_bernoulli_posterior_increases_with_prior(rng, make_spd):
    beta = rng.uniform(-1.0, 1.0, size=(3, 1))
    sigma = make_spd(rng, 3)
    row = np.array([np.nan, 0.4, np.nan, -1.2])
    pattern = MissPattern.from_mask(~np.isnan(row))
    h = 1e-6
    for pi in np.linspace(0.05, 0.95, 19):
        at = bernoulli_posterior(row, pattern, beta, sigma, pi, scale=1.5).pi_tilde
        up = bernoulli_posterior(row, pattern, beta, sigma, pi + h, scale=1.5).pi_tilde
        down = bernoulli_posterior(row, pattern, beta, sigma, pi - h, scale=1.5).pi_tilde
        slope = (up - down) / (2.0 * h)
        assert slope > 0
        assert slope == pytest.approx(at * (1.0 - at) / (pi * (1.0 - pi)), rel=1e-5)


def test_observed_loglik_ignores_row_order(masked_dataset, rng, make_spd):
    ds = masked_dataset
    beta, sigma, mux, sigmax = _random_params(rng, make_spd, ds.p, ds.r)
    params, model = RegressionParams(beta, sigma), NormalPredictor(mux, sigmax)
    shuffled = ds.subset(rng.permutation(ds.n))
    assert observed_loglik(shuffled, params, model) == pytest.approx(observed_loglik(ds, params, model), rel=1e-10)


def test_observed_loglik_bernoulli_ignores_row_order(rng, make_spd):
    x = 2.0 * rng.binomial(1, 0.4, size=(30, 1)).astype(float)
    y = rng.standard_normal((30, 2))
    x[rng.random(30) < 0.3] = np.nan
    y[rng.random(30) < 0.2, 1] = np.nan
    ds = ObservedDataset.from_arrays(x, y)
    params = RegressionParams(rng.uniform(-1.0, 1.0, size=(2, 1)), make_spd(rng, 2))
    model = BernoulliPredictor(pi=0.4, scale=2.0)
    shuffled = ds.subset(rng.permutation(ds.n))
    assert observed_loglik(shuffled, params, model) == pytest.approx(observed_loglik(ds, params, model), rel=1e-10)


def test_conditional_covariance_is_psd(rng, make_spd):
    p, r = 2, 3
    jp = build_joint(*_random_params(rng, make_spd, p, r))
    for _ in range(50):
        row = rng.standard_normal(p + r)
        mask = rng.random(p + r) > 0.5
        if not mask.any():
            mask[0] = True
        row[~mask] = np.nan
        first, second = _normal_pattern_sums(row, MissPattern.from_mask(mask), jp)
        covariance = second - np.outer(first, first)
        np.testing.assert_allclose(covariance, covariance.T, atol=1e-12)
        assert np.linalg.eigvalsh(covariance).min() >= -1e-9 * max(1.0, np.abs(second).max())
        _, _, a3, a4 = cond_normal_moments(row, MissPattern.from_mask(mask), jp)
        assert np.linalg.eigvalsh(a3 - np.outer(a4, a4)).min() >= -1e-9 * max(1.0, np.abs(a3).max())


def test_bernoulli_predictor_variance_is_nonnegative(rng, make_spd):
    beta = rng.uniform(-1.0, 1.0, size=(2, 1))
    sigma = make_spd(rng, 2)
    row = np.array([np.nan, 0.3, np.nan])
    pattern = MissPattern.from_mask([False, True, False])
    posterior = bernoulli_posterior(row, pattern, beta, sigma, 0.6, scale=2.0)
    _, _, a3, a4 = bernoulli_cond_moments(row, pattern, beta, sigma, posterior)
    assert a3[0, 0] - a4[0] ** 2 >= 0
