"""
E-step service - conditional moments of the missing coordinates, moment
accumulators, observed-data log-likelihood and the expected complete-data
log-likelihood
"""
import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy import linalg
from scipy.special import expit, logit, logsumexp, xlogy
from scipy.stats import multivariate_normal

from envelope_em.data.dataset_model import MissPattern, ObservedDataset
from envelope_em.data.fit_model import BernoulliPredictor, NormalPredictor, PredictorModel, RegressionParams
from envelope_em.errors import NotPD, NotPSD, SingularObservedBlock
from envelope_em.utils.linalg import is_psd, symmetrize

logger = logging.getLogger(__name__)

RIDGE_FACTOR = 1e-10
LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class NormalJointParams:
    """Mean and covariance of the stacked (x, y) vector under the joint-normal model"""
    mu_tilde: np.ndarray
    sigma_tilde: np.ndarray
    p: int
    r: int


@dataclass
class MomentAccumulators:
    """A1 = sum E(YYᵀ), A2 = sum E(YXᵀ), A3 = sum E(XXᵀ), A4 = sum E(X)"""
    a1: np.ndarray
    a2: np.ndarray
    a3: np.ndarray
    a4: np.ndarray
    n_eff: int

    @property
    def r(self) -> int:
        return self.a1.shape[0]

    @property
    def p(self) -> int:
        return self.a3.shape[0]

    @classmethod
    def from_complete(cls, x: np.ndarray, y: np.ndarray) -> "MomentAccumulators":
        """Raw cross-product sums of fully observed data."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        if y.ndim == 1:
            y = y.reshape(-1, 1)
        return cls(a1=y.T @ y, a2=y.T @ x, a3=x.T @ x, a4=x.sum(axis=0), n_eff=x.shape[0])


@dataclass(frozen=True)
class BernoulliPosterior:
    """P(X = c | observed data) for one row"""
    pi_tilde: float
    scale: float = 1.0


def build_joint(beta, sigma, mux, sigmax) -> NormalJointParams:
    """
    Joint mean/covariance of (x, y) with x ~ N(mux, sigmax), y | x ~ N(beta x, sigma)

    Raises:
        NotPSD when sigma or sigmax is not positive semi-definite
    """
    beta = np.asarray(beta, dtype=float)
    r, p = beta.shape
    sigma = symmetrize(np.asarray(sigma, dtype=float).reshape(r, r))
    sigmax = symmetrize(np.asarray(sigmax, dtype=float).reshape(p, p))
    mux = np.asarray(mux, dtype=float).reshape(p)
    if not is_psd(sigma):
        raise NotPSD("response covariance is not positive semi-definite")
    if not is_psd(sigmax):
        raise NotPSD("predictor covariance is not positive semi-definite")

    cross = beta @ sigmax
    sigma_tilde = np.block([
        [sigmax, cross.T],
        [cross, sigma + cross @ beta.T],
    ])
    mu_tilde = np.concatenate([mux, beta @ mux])
    return NormalJointParams(mu_tilde=mu_tilde, sigma_tilde=(sigma_tilde + sigma_tilde.T) / 2.0, p=p, r=r)


def _factor_observed_block(block: np.ndarray):
    """Cholesky factor of an observed-coordinates covariance, one ridge retry before giving up."""
    try:
        return linalg.cho_factor(block, lower=True, check_finite=False), block
    except linalg.LinAlgError:
        dim = block.shape[0]
        ridge = RIDGE_FACTOR * max(float(np.trace(block)), 0.0) / dim
        if not ridge > 0:
            raise SingularObservedBlock("observed covariance block is singular")
        logger.warning(f"Observed covariance block singular; adding ridge {ridge:.3e}")
        ridged = block + ridge * np.eye(dim)
        try:
            return linalg.cho_factor(ridged, lower=True, check_finite=False), ridged
        except linalg.LinAlgError:
            raise SingularObservedBlock("observed covariance block is singular after ridge")


@dataclass(frozen=True)
class _Conditional:
    """D_mis | D_obs ~ N(mean_mis + gain (D_obs - mean_obs), schur)"""
    gain: np.ndarray
    schur: np.ndarray
    obs_cov: np.ndarray


def _conditional(sigma_full: np.ndarray, obs: Tuple[int, ...], mis: Tuple[int, ...]) -> _Conditional:
    obs = list(obs)
    mis = list(mis)
    if not obs:
        return _Conditional(gain=np.zeros((len(mis), 0)), schur=sigma_full[np.ix_(mis, mis)],
                            obs_cov=np.zeros((0, 0)))
    s_oo = sigma_full[np.ix_(obs, obs)]
    factor, s_oo = _factor_observed_block(s_oo)
    if not mis:
        return _Conditional(gain=np.zeros((0, len(obs))), schur=np.zeros((0, 0)), obs_cov=s_oo)
    s_mo = sigma_full[np.ix_(mis, obs)]
    gain = linalg.cho_solve(factor, s_mo.T, check_finite=False).T
    schur = sigma_full[np.ix_(mis, mis)] - gain @ s_mo.T
    return _Conditional(gain=gain, schur=(schur + schur.T) / 2.0, obs_cov=s_oo)


def _normal_pattern_sums(values: np.ndarray, pattern: MissPattern, jp: NormalJointParams,
                         cond: Optional[_Conditional] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Summed first and second conditional moments in stacked coordinates for rows sharing a pattern."""
    values = np.atleast_2d(values)
    k, dim = values.shape
    if cond is None:
        cond = _conditional(jp.sigma_tilde, pattern.obs_idx, pattern.mis_idx)
    obs = list(pattern.obs_idx)
    mis = list(pattern.mis_idx)

    filled = np.tile(jp.mu_tilde, (k, 1))
    filled[:, obs] = values[:, obs]
    if mis:
        centered = values[:, obs] - jp.mu_tilde[obs]
        filled[:, mis] = jp.mu_tilde[mis] + centered @ cond.gain.T

    second = filled.T @ filled
    if mis:
        second[np.ix_(mis, mis)] += k * cond.schur
    return filled.sum(axis=0), second


def _split_sums(first: np.ndarray, second: np.ndarray, p: int, k: int) -> MomentAccumulators:
    return MomentAccumulators(
        a1=second[p:, p:], a2=second[p:, :p], a3=second[:p, :p], a4=first[:p], n_eff=k,
    )


def cond_normal_moments(row: np.ndarray, pattern: MissPattern, jp: NormalJointParams):
    """
    Conditional moments of one row under the joint-normal model

    Returns:
        (A_i1, A_i2, A_i3, A_i4) = (E YYᵀ, E YXᵀ, E XXᵀ, E X) given the observed cells
    """
    first, second = _normal_pattern_sums(np.asarray(row, dtype=float).reshape(1, -1), pattern, jp)
    acc = _split_sums(first, second, jp.p, 1)
    return acc.a1, acc.a2, acc.a3, acc.a4


def _bernoulli_logit(y_obs_values: np.ndarray, beta_obs: np.ndarray, cond: _Conditional,
                     pi: float, scale: float) -> np.ndarray:
    """logit of P(x = c | y_obs) for each row: logit pi + c b'S⁻¹y - c² b'S⁻¹b / 2."""
    base = logit(pi)
    if beta_obs.size == 0:
        return np.full(y_obs_values.shape[0], base)
    factor, _ = _factor_observed_block(cond.obs_cov)
    weights = linalg.cho_solve(factor, beta_obs, check_finite=False)
    return base + scale * (y_obs_values @ weights) - 0.5 * scale ** 2 * float(beta_obs @ weights)


def _bernoulli_pattern_sums(values: np.ndarray, pattern: MissPattern, beta: np.ndarray, sigma: np.ndarray,
                            pi: float, scale: float, pi_tilde: Optional[np.ndarray] = None):
    """
    Summed moments in stacked coordinates for rows sharing a pattern under the two-point model

    Returns:
        (first, second, pi_tilde per row)
    """
    values = np.atleast_2d(values)
    k = values.shape[0]
    b = beta[:, 0]
    r = b.shape[0]
    x_observed = 0 in pattern.obs_idx
    y_obs = tuple(i - 1 for i in pattern.obs_idx if i > 0)
    y_mis = tuple(i - 1 for i in pattern.mis_idx if i > 0)
    cond = _conditional(sigma, y_obs, y_mis)
    yo = values[:, [i + 1 for i in y_obs]]

    if pi_tilde is None:
        if x_observed:
            pi_tilde = values[:, 0] / scale
        else:
            pi_tilde = expit(_bernoulli_logit(yo, b[list(y_obs)], cond, pi, scale))
    pi_tilde = np.asarray(pi_tilde, dtype=float).reshape(k)

    def filled_at(x: np.ndarray) -> np.ndarray:
        # conditional mean of y given y_obs and x, one row per data row
        filled = np.empty((k, r))
        filled[:, list(y_obs)] = yo
        if y_mis:
            resid = yo - np.outer(x, b[list(y_obs)])
            filled[:, list(y_mis)] = np.outer(x, b[list(y_mis)]) + resid @ cond.gain.T
        return filled

    if x_observed:
        x = values[:, 0]
        means = filled_at(x)
        a1 = means.T @ means
        a2 = (means * x[:, None]).sum(axis=0).reshape(r, 1)
        a3 = np.array([[float(x @ x)]])
        a4 = np.array([float(x.sum())])
    else:
        m0 = filled_at(np.zeros(k))
        mc = filled_at(np.full(k, scale))
        w0 = 1.0 - pi_tilde
        a1 = (m0 * w0[:, None]).T @ m0 + (mc * pi_tilde[:, None]).T @ mc
        a2 = scale * (mc * pi_tilde[:, None]).sum(axis=0).reshape(r, 1)
        a3 = np.array([[scale ** 2 * float(pi_tilde.sum())]])
        a4 = np.array([scale * float(pi_tilde.sum())])
    if y_mis:
        a1[np.ix_(list(y_mis), list(y_mis))] += k * cond.schur

    first = np.concatenate([a4, np.zeros(r)])
    second = np.zeros((r + 1, r + 1))
    second[1:, 1:] = a1
    second[1:, :1] = a2
    second[:1, 1:] = a2.T
    second[:1, :1] = a3
    return first, second, pi_tilde


def bernoulli_posterior(row: np.ndarray, pattern: MissPattern, beta, sigma, pi: float,
                        scale: float = 1.0) -> BernoulliPosterior:
    """Posterior probability that the two-point predictor of one row equals its scale"""
    beta = np.asarray(beta, dtype=float).reshape(-1, 1)
    sigma = np.asarray(sigma, dtype=float)
    _, _, pi_tilde = _bernoulli_pattern_sums(np.asarray(row, dtype=float).reshape(1, -1), pattern,
                                             beta, sigma, pi, scale)
    return BernoulliPosterior(pi_tilde=float(pi_tilde[0]), scale=scale)


def bernoulli_cond_moments(row: np.ndarray, pattern: MissPattern, beta, sigma, posterior: BernoulliPosterior):
    """
    Conditional moments of one row under the two-point predictor model

    Returns:
        (A_i1, A_i2, A_i3, A_i4)
    """
    beta = np.asarray(beta, dtype=float).reshape(-1, 1)
    sigma = np.asarray(sigma, dtype=float)
    first, second, _ = _bernoulli_pattern_sums(
        np.asarray(row, dtype=float).reshape(1, -1), pattern, beta, sigma,
        posterior.pi_tilde, posterior.scale, pi_tilde=np.array([posterior.pi_tilde]))
    acc = _split_sums(first, second, 1, 1)
    return acc.a1, acc.a2, acc.a3, acc.a4


def _fill_missing(ds: ObservedDataset) -> np.ndarray:
    # Zeros stand in for NaN so masked arithmetic stays finite
    return np.nan_to_num(ds.joint, nan=0.0)


def accumulate(ds: ObservedDataset, params: RegressionParams, model: PredictorModel) -> MomentAccumulators:
    """
    E-step: sum the per-row conditional moments over the dataset

    Coefficient matrices are computed once per missingness pattern; pattern
    sums are added in first-occurrence order.
    """
    p, r = ds.p, ds.r
    values = _fill_missing(ds)
    first = np.zeros(p + r)
    second = np.zeros((p + r, p + r))

    if isinstance(model, BernoulliPredictor):
        if p != 1:
            raise ValueError("the two-point predictor model needs exactly one predictor")
        for group in ds.patterns():
            f, s, _ = _bernoulli_pattern_sums(values[list(group.rows)], group.pattern, params.beta,
                                              params.sigma, model.pi, model.scale)
            first += f
            second += s
    else:
        jp = build_joint(params.beta, params.sigma, model.mux, model.sigmax)
        for group in ds.patterns():
            f, s = _normal_pattern_sums(values[list(group.rows)], group.pattern, jp)
            first += f
            second += s

    second = (second + second.T) / 2.0
    return _split_sums(first, second, p, ds.n)


def observed_loglik_normal(ds: ObservedDataset, jp: NormalJointParams) -> float:
    """Sum over rows of log N(d_obs; mu_obs, sigma_obs), one marginal per pattern"""
    values = _fill_missing(ds)
    total = 0.0
    for group in ds.patterns():
        obs = list(group.pattern.obs_idx)
        _, block = _factor_observed_block(jp.sigma_tilde[np.ix_(obs, obs)])
        dist = multivariate_normal(mean=jp.mu_tilde[obs], cov=block)
        total += float(np.sum(dist.logpdf(values[np.ix_(list(group.rows), obs)])))
    return total


def observed_loglik_bernoulli(ds: ObservedDataset, params: RegressionParams, model: BernoulliPredictor) -> float:
    """Observed-data log-likelihood of the two-point model: a two-component mixture when x is missing"""
    values = _fill_missing(ds)
    b = params.beta[:, 0]
    c = model.scale
    total = 0.0
    for group in ds.patterns():
        rows = list(group.rows)
        x_observed = 0 in group.pattern.obs_idx
        y_obs = [i - 1 for i in group.pattern.obs_idx if i > 0]
        yo = values[np.ix_(rows, [i + 1 for i in y_obs])]

        def response_logpdf(x: np.ndarray) -> np.ndarray:
            if not y_obs:
                return np.zeros(len(rows))
            _, block = _factor_observed_block(params.sigma[np.ix_(y_obs, y_obs)])
            resid = yo - np.outer(x, b[y_obs])
            dist = multivariate_normal(mean=np.zeros(len(y_obs)), cov=block)
            return np.atleast_1d(dist.logpdf(resid))

        if x_observed:
            x = values[rows, 0]
            share = x / c
            mass = xlogy(share, model.pi) + xlogy(1.0 - share, 1.0 - model.pi)
            total += float(np.sum(mass + response_logpdf(x)))
        else:
            terms = np.vstack([
                np.log(model.pi) + response_logpdf(np.full(len(rows), c)) if model.pi > 0
                else np.full(len(rows), -np.inf),
                np.log1p(-model.pi) + response_logpdf(np.zeros(len(rows))) if model.pi < 1
                else np.full(len(rows), -np.inf),
            ])
            total += float(np.sum(logsumexp(terms, axis=0)))
    return total


def observed_loglik(ds: ObservedDataset, params: RegressionParams, model: PredictorModel) -> float:
    """Observed-data log-likelihood under either predictor model."""
    if isinstance(model, BernoulliPredictor):
        return observed_loglik_bernoulli(ds, params, model)
    jp = build_joint(params.beta, params.sigma, model.mux, model.sigmax)
    return observed_loglik_normal(ds, jp)


def _gaussian_expected_loglik(sigma: np.ndarray, scatter: np.ndarray, n: int) -> float:
    """-n/2 log|S| - tr(S⁻¹ scatter)/2 - n d/2 log 2pi"""
    dim = sigma.shape[0]
    if dim == 0:
        return 0.0
    try:
        factor = linalg.cho_factor(symmetrize(sigma), lower=True, check_finite=False)
    except linalg.LinAlgError:
        raise NotPD("covariance is not positive definite")
    logdet = 2.0 * float(np.sum(np.log(np.diag(factor[0]))))
    trace = float(np.trace(linalg.cho_solve(factor, scatter, check_finite=False)))
    return -0.5 * n * logdet - 0.5 * trace - 0.5 * n * dim * LOG_2PI


def expected_complete_loglik(acc: MomentAccumulators, beta, sigma, model: PredictorModel, n: int) -> float:
    """
    Q(phi | phi): the complete-data log-likelihood with every moment replaced by its
    conditional expectation, constants included

    Returns:
        response part plus predictor part
    """
    beta = np.asarray(beta, dtype=float)
    cross = beta @ acc.a2.T
    resid_scatter = acc.a1 - cross - cross.T + beta @ acc.a3 @ beta.T
    q_response = _gaussian_expected_loglik(np.asarray(sigma, dtype=float), resid_scatter, n)

    if isinstance(model, BernoulliPredictor):
        successes = float(acc.a4[0]) / model.scale
        q_predictor = float(xlogy(successes, model.pi) + xlogy(n - successes, 1.0 - model.pi))
    elif isinstance(model, NormalPredictor):
        mu = np.asarray(model.mux, dtype=float)
        outer = np.outer(acc.a4, mu)
        scatter = acc.a3 - outer - outer.T + n * np.outer(mu, mu)
        q_predictor = _gaussian_expected_loglik(np.asarray(model.sigmax, dtype=float), scatter, n)
    else:
        raise TypeError(f"unknown predictor model {type(model).__name__}")
    return q_response + q_predictor
