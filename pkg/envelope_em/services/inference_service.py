"""
Inference service - bootstrap standard errors and the envelope asymptotic
covariance (gradient matrix and projected covariance)
"""
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import linalg
from scipy.stats import norm

from envelope_em.data.dataset_model import ObservedDataset
from envelope_em.data.fit_model import EmOptions, EnvelopeFit, matrix_payload, predictor_vector
from envelope_em.errors import AllReplicatesFailed, EnvelopeError, InvalidConfig, NotPD, ShapeMismatch
from envelope_em.utils.linalg import contraction_matrix, expansion_matrix, pinv, symmetrize, vec, vech
from envelope_em.utils.parallel import parallel_map
from .em_service import em_envelope_fit, em_standard_fit
from .selection_service import FitFunction, resample_rows

logger = logging.getLogger(__name__)

UNRELIABLE_FAILURE_SHARE = 0.10


@dataclass
class BootstrapResult:
    """Per-coefficient bootstrap summaries of beta, each r×p"""
    estimate: np.ndarray
    se: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    p_value: np.ndarray
    reps: int
    failures: int
    unreliable: bool
    theta_covariance: Optional[np.ndarray] = None

    def to_dict(self):
        out = {
            "estimate": matrix_payload(self.estimate),
            "se": matrix_payload(self.se),
            "ci_low": matrix_payload(self.ci_low),
            "ci_high": matrix_payload(self.ci_high),
            "p_value": matrix_payload(self.p_value),
            "reps": self.reps,
            "failures": self.failures,
            "unreliable": self.unreliable,
        }
        if self.theta_covariance is not None:
            out["theta_covariance"] = matrix_payload(self.theta_covariance)
        return out


def theta_vector(fit: EnvelopeFit) -> np.ndarray:
    """(vec beta, vech sigma, rho)"""
    return np.concatenate([vec(fit.beta), vech(fit.sigma), predictor_vector(fit.predictor)])


def _replicate(ds: ObservedDataset, opts: EmOptions, seed: int, replicate: int,
               fit_fn: FitFunction) -> Optional[EnvelopeFit]:
    rows = resample_rows(ds.n, seed, replicate)
    try:
        fit = fit_fn(ds.subset(rows), opts)
    except EnvelopeError as error:
        logger.debug(f"Bootstrap replicate {replicate} failed: {error.code}")
        return None
    return fit if fit.converged else None


def bootstrap_se(ds: ObservedDataset, opts: EmOptions, reps: int, seed: int, n_jobs: int = 1,
                 fit_fn: FitFunction = em_envelope_fit) -> BootstrapResult:
    """
    Nonparametric bootstrap over whole rows with u held at opts.u

    Returns:
        BootstrapResult with SEs, percentile 95% intervals and normal-reference p-values

    Raises:
        AllReplicatesFailed when no replicate converges
    """
    if reps < 2:
        raise InvalidConfig(f"bootstrap needs at least 2 replicates, got {reps}")
    base = fit_fn(ds, opts)
    fits = parallel_map(lambda j: _replicate(ds, opts, seed, j, fit_fn), range(reps), n_jobs=n_jobs)
    kept = [fit for fit in fits if fit is not None]
    failures = reps - len(kept)
    if not kept:
        raise AllReplicatesFailed(f"all {reps} bootstrap replicates failed")

    betas = np.stack([fit.beta for fit in kept])
    ddof = 1 if len(kept) > 1 else 0
    se = betas.std(axis=0, ddof=ddof)
    ci_low, ci_high = np.percentile(betas, [2.5, 97.5], axis=0)
    estimate = base.beta
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, np.abs(estimate) / np.where(se > 0, se, 1.0), np.where(estimate == 0, 0.0, np.inf))
    p_value = 2.0 * norm.sf(z)

    thetas = np.stack([theta_vector(fit) for fit in kept])
    theta_covariance = np.atleast_2d(np.cov(thetas, rowvar=False, ddof=ddof))

    unreliable = failures > UNRELIABLE_FAILURE_SHARE * reps
    if failures:
        logger.warning(f"{failures} of {reps} bootstrap replicates dropped")
    if unreliable:
        logger.warning("More than 10% of bootstrap replicates failed; result flagged unreliable")
    return BootstrapResult(
        estimate=estimate, se=se, ci_low=ci_low, ci_high=ci_high, p_value=p_value,
        reps=reps, failures=failures, unreliable=unreliable, theta_covariance=theta_covariance,
    )


def _check_shape(name: str, m: np.ndarray, shape):
    if m.shape != tuple(shape):
        raise ShapeMismatch(f"{name} has shape {m.shape}, expected {tuple(shape)}")


def construct_g(eta, gamma, gamma0, omega, omega0, dim_rho: int) -> np.ndarray:
    """
    Jacobian of (vec beta, vech sigma, rho) with respect to
    (vec eta, vec gamma, vech omega, vech omega0, rho)
    """
    gamma = np.asarray(gamma, dtype=float)
    r, u = gamma.shape
    eta = np.asarray(eta, dtype=float)
    if eta.ndim != 2 or eta.shape[0] != u:
        raise ShapeMismatch(f"eta has shape {eta.shape}, expected ({u}, p)")
    p = eta.shape[1]
    gamma0 = np.asarray(gamma0, dtype=float)
    omega = np.asarray(omega, dtype=float)
    omega0 = np.asarray(omega0, dtype=float)
    _check_shape("gamma0", gamma0, (r, r - u))
    _check_shape("omega", omega, (u, u))
    _check_shape("omega0", omega0, (r - u, r - u))
    if dim_rho < 0:
        raise ShapeMismatch(f"dim_rho must be >= 0, got {dim_rho}")

    contraction = contraction_matrix(r)
    n_sym = r * (r + 1) // 2
    n_omega = u * (u + 1) // 2
    n_omega0 = (r - u) * (r - u + 1) // 2

    beta_eta = np.kron(np.eye(p), gamma)
    beta_gamma = np.kron(eta.T, np.eye(r))
    immaterial = gamma0 @ omega0 @ gamma0.T
    sigma_gamma = 2.0 * contraction @ (np.kron(gamma @ omega, np.eye(r)) - np.kron(gamma, immaterial))
    sigma_omega = contraction @ np.kron(gamma, gamma) @ expansion_matrix(u) if u else np.zeros((n_sym, 0))
    sigma_omega0 = contraction @ np.kron(gamma0, gamma0) @ expansion_matrix(r - u) if r - u else np.zeros((n_sym, 0))

    return np.block([
        [beta_eta, beta_gamma, np.zeros((r * p, n_omega)), np.zeros((r * p, n_omega0)), np.zeros((r * p, dim_rho))],
        [np.zeros((n_sym, u * p)), sigma_gamma, sigma_omega, sigma_omega0, np.zeros((n_sym, dim_rho))],
        [np.zeros((dim_rho, u * p + r * u + n_omega + n_omega0)), np.eye(dim_rho)],
    ])


def project_covariance(g, v_std) -> np.ndarray:
    """
    V_env = G (Gᵀ V_std⁻¹ G)† Gᵀ

    Raises:
        NotPD when v_std is not symmetric positive definite
    """
    g = np.asarray(g, dtype=float)
    v_std = symmetrize(v_std)
    if g.shape[0] != v_std.shape[0]:
        raise ShapeMismatch(f"G has {g.shape[0]} rows but V_std is {v_std.shape[0]}x{v_std.shape[0]}")
    try:
        factor = linalg.cho_factor(v_std, lower=True, check_finite=False)
    except linalg.LinAlgError:
        raise NotPD("standard covariance is not positive definite")
    v_inv_g = linalg.cho_solve(factor, g, check_finite=False)
    information = g.T @ v_inv_g
    v_env = g @ pinv((information + information.T) / 2.0) @ g.T
    return (v_env + v_env.T) / 2.0


def envelope_covariance(fit: EnvelopeFit, v_std) -> np.ndarray:
    """Project a covariance of theta for the standard model onto the envelope parametrization of fit."""
    dim_rho = predictor_vector(fit.predictor).shape[0]
    g = construct_g(fit.eta, fit.gamma, fit.gamma0, fit.omega, fit.omega0, dim_rho)
    return project_covariance(g, v_std)


def envelope_parameter_map(eta, gamma, omega, omega0, rho, gamma0_base) -> np.ndarray:
    """
    theta as a function of the envelope parameters, Γ0 held at gamma0_base:
    Σ = ΓΩΓᵀ + Q_Γ Γ0 Ω0 Γ0ᵀ Q_Γ
    """
    gamma = np.asarray(gamma, dtype=float)
    r = gamma.shape[0]
    beta = gamma @ np.asarray(eta, dtype=float)
    if gamma.shape[1]:
        comp = np.eye(r) - gamma @ np.linalg.solve(gamma.T @ gamma, gamma.T)
    else:
        comp = np.eye(r)
    immaterial = gamma0_base @ np.asarray(omega0, dtype=float) @ gamma0_base.T
    sigma = gamma @ np.asarray(omega, dtype=float) @ gamma.T + comp @ immaterial @ comp
    sigma = (sigma + sigma.T) / 2.0
    return np.concatenate([vec(beta), vech(sigma), np.asarray(rho, dtype=float).reshape(-1)])


@dataclass
class AsymptoticResult:
    """Envelope standard errors of beta from a projected standard-model bootstrap covariance"""
    se: Optional[np.ndarray]
    covariance: Optional[np.ndarray]
    reps: int
    failures: int

    def to_dict(self):
        return {
            "se": None if self.se is None else matrix_payload(self.se),
            "reps": self.reps,
            "failures": self.failures,
            "available": self.se is not None,
        }


def asymptotic_se(fit: EnvelopeFit, ds: ObservedDataset, opts: EmOptions, reps: int, seed: int,
                  n_jobs: int = 1) -> AsymptoticResult:
    """
    Bootstrap the standard EM fit, project its theta covariance onto the
    envelope parametrization of fit and read off the SEs of vec beta.

    The bootstrap covariance needs more converged replicates than theta has
    entries; otherwise it is singular and no SEs are reported.
    """
    boot = bootstrap_se(ds, opts.with_u(None), reps=reps, seed=seed, n_jobs=n_jobs, fit_fn=em_standard_fit)
    r, p = fit.beta.shape
    dim = boot.theta_covariance.shape[0]
    usable = reps - boot.failures
    try:
        if usable <= dim:
            raise NotPD(f"{usable} usable replicates for {dim} parameters")
        v_env = envelope_covariance(fit, boot.theta_covariance)
    except NotPD as error:
        logger.warning(f"Standard-model bootstrap covariance is singular ({error}); asymptotic SEs not available")
        return AsymptoticResult(se=None, covariance=None, reps=reps, failures=boot.failures)
    variances = np.clip(np.diag(v_env)[:r * p], 0.0, None)
    se = np.sqrt(variances).reshape((r, p), order="F")
    return AsymptoticResult(se=se, covariance=v_env, reps=reps, failures=boot.failures)
