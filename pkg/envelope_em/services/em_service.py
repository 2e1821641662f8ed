"""
EM driver service - envelope EM, standard EM, complete-case and full-data estimators
"""
import logging
from typing import Optional, Tuple

import numpy as np

from envelope_em.data.dataset_model import ObservedDataset
from envelope_em.data.fit_model import (
    BernoulliPredictor,
    EmOptions,
    EnvelopeFit,
    NormalPredictor,
    PredictorFamily,
    PredictorModel,
    RegressionParams,
)
from envelope_em.errors import NotPD, TooFewCompleteRows
from envelope_em.utils.linalg import is_psd
from .envelope_service import EnvelopeBasis, MStepResult, envelope_objective, mstep_given_gamma, one_d_algorithm
from .moment_service import (
    MomentAccumulators,
    accumulate,
    expected_complete_loglik,
    observed_loglik,
)

logger = logging.getLogger(__name__)

WARM_START_MIN_ROWS = 10

EM_ENVELOPE = "em-envelope"
EM_STANDARD = "em-standard"
CC_ENVELOPE = "cc-envelope"
CC_STANDARD = "cc-standard"
FULL_ENVELOPE = "full-envelope"
FULL_MLE = "full-mle"
ESTIMATORS = [EM_ENVELOPE, CC_ENVELOPE, FULL_ENVELOPE, EM_STANDARD, CC_STANDARD, FULL_MLE]


def update_predictor(acc: MomentAccumulators, n: int, family: PredictorFamily, scale: float = 1.0) -> PredictorModel:
    """Maximize the predictor part of Q given the accumulators"""
    if family == PredictorFamily.BERNOULLI:
        pi = float(np.clip(acc.a4[0] / (scale * n), 0.0, 1.0))
        return BernoulliPredictor(pi=pi, scale=scale)
    mux = acc.a4 / n
    sigmax = acc.a3 / n - np.outer(mux, mux)
    return NormalPredictor(mux=mux, sigmax=(sigmax + sigmax.T) / 2.0)


def _cold_start(ds: ObservedDataset, opts: EmOptions) -> Tuple[RegressionParams, PredictorModel]:
    p, r = ds.p, ds.r
    init = opts.init
    beta = np.asarray(init.get("beta", np.zeros((r, p))), dtype=float).reshape(r, p)
    sigma = np.asarray(init.get("sigma", np.eye(r)), dtype=float).reshape(r, r)
    if opts.predictor_model == PredictorFamily.BERNOULLI:
        predictor = BernoulliPredictor(pi=float(init.get("pi", 0.5)), scale=opts.bernoulli_scale)
    else:
        predictor = NormalPredictor(
            mux=np.asarray(init.get("mux", np.zeros(p)), dtype=float).reshape(p),
            sigmax=np.asarray(init.get("sigmax", np.eye(p)), dtype=float).reshape(p, p),
        )
    return RegressionParams(beta=beta, sigma=sigma), predictor


def _warm_start(ds: ObservedDataset, opts: EmOptions) -> Optional[Tuple[RegressionParams, PredictorModel]]:
    """Complete-case moments, or None when there are too few complete rows."""
    cc = ds.complete_case()
    if cc.n < max(WARM_START_MIN_ROWS, ds.p + 1):
        logger.info(f"Warm start skipped: {cc.n} complete rows")
        return None
    acc = MomentAccumulators.from_complete(cc.x, cc.y)
    step = mstep_given_gamma(EnvelopeBasis.full(ds.r), acc, cc.n)
    predictor = update_predictor(acc, cc.n, opts.predictor_model, opts.bernoulli_scale)
    if isinstance(predictor, BernoulliPredictor):
        predictor = BernoulliPredictor(pi=float(np.clip(predictor.pi, 0.01, 0.99)), scale=predictor.scale)
    elif not is_psd(predictor.sigmax):
        return None
    if not is_psd(step.sigma):
        return None
    return RegressionParams(beta=step.beta, sigma=step.sigma), predictor


def _q_value(acc: MomentAccumulators, step: MStepResult, predictor: PredictorModel, n: int) -> float:
    try:
        return expected_complete_loglik(acc, step.beta, step.sigma, predictor, n)
    except NotPD:
        logger.warning("Q value undefined: fitted covariance is singular")
        return float("nan")


def _fit_from_step(step: MStepResult, predictor: PredictorModel, n: int, method: str) -> EnvelopeFit:
    return EnvelopeFit(
        beta=step.beta, sigma=step.sigma, sigma1=step.sigma1, sigma2=step.sigma2,
        gamma=step.basis.gamma, gamma0=step.basis.gamma0, eta=step.eta,
        omega=step.omega, omega0=step.omega0, predictor=predictor,
        u=step.basis.u, n=n, method=method,
    )


def _run_em(ds: ObservedDataset, opts: EmOptions, u: int, method: str) -> EnvelopeFit:
    """Alternate E-step, envelope M-step and predictor update until the change in beta is below tol."""
    n, r = ds.n, ds.r
    if not 0 <= u <= r:
        raise ValueError(f"u must lie in [0, {r}], got {u}")
    if opts.predictor_model == PredictorFamily.BERNOULLI and ds.p != 1:
        raise ValueError("the two-point predictor model needs exactly one predictor")

    start = _warm_start(ds, opts) if opts.warm_start else None
    params, predictor = start or _cold_start(ds, opts)

    loglik_trace = [observed_loglik(ds, params, predictor)] if opts.track_loglik else []
    deltas = []
    previous: Optional[EnvelopeBasis] = None
    converged = False
    step = None
    iteration = 0

    for iteration in range(1, opts.max_iter + 1):
        acc = accumulate(ds, params, predictor)
        if u == r:
            basis = EnvelopeBasis.full(r)
        else:
            basis = one_d_algorithm(acc, u)
            if opts.safeguard and previous is not None and u > 0:
                if envelope_objective(previous.gamma, acc) < envelope_objective(basis.gamma, acc):
                    basis = previous
        step = mstep_given_gamma(basis, acc, n)
        predictor = update_predictor(acc, n, opts.predictor_model, opts.bernoulli_scale)

        if u == 0:
            # beta is identically zero; monitor the covariance instead
            delta = float(np.abs(step.sigma - params.sigma).sum())
        else:
            delta = float(np.abs(step.beta - params.beta).sum())
        deltas.append(delta)
        params = RegressionParams(beta=step.beta, sigma=step.sigma)
        previous = basis

        if opts.track_loglik:
            loglik_trace.append(observed_loglik(ds, params, predictor))
            logger.debug(f"{method} u={u} iteration {iteration}: delta={delta:.3e}, loglik={loglik_trace[-1]:.6f}")
        else:
            logger.debug(f"{method} u={u} iteration {iteration}: delta={delta:.3e}")

        if delta <= opts.tol:
            converged = True
            break

    if not converged:
        logger.warning(f"{method} u={u} did not converge in {opts.max_iter} iterations (last delta {deltas[-1]:.3e})")

    final_acc = accumulate(ds, params, predictor)
    fit = _fit_from_step(step, predictor, n, method)
    fit.iterations = iteration
    fit.converged = converged
    fit.loglik_trace = loglik_trace
    fit.beta_trace_norm = deltas
    fit.q_value = _q_value(final_acc, step, predictor, n)
    logger.info(f"{method} u={u}: {'converged' if converged else 'stopped'} after {iteration} iterations")
    return fit


def em_envelope_fit(ds: ObservedDataset, opts: EmOptions) -> EnvelopeFit:
    """EM with the envelope M-step; u defaults to r."""
    u = ds.r if opts.u is None else opts.u
    return _run_em(ds, opts, u, EM_ENVELOPE)


def em_standard_fit(ds: ObservedDataset, opts: EmOptions) -> EnvelopeFit:
    return _run_em(ds, opts, ds.r, EM_STANDARD)


def full_data_fit(x, y, u: Optional[int] = None, envelope: bool = True,
                  predictor_model=PredictorFamily.NORMAL, scale: float = 1.0,
                  method: Optional[str] = None) -> EnvelopeFit:
    """
    One identity E-step and one M-step on fully observed data

    Returns:
        EnvelopeFit; with envelope=False (or u = r) the ordinary least-squares MLE
    """
    acc = MomentAccumulators.from_complete(x, y)
    n, r = acc.n_eff, acc.r
    family = PredictorFamily.parse(predictor_model)
    target_u = r if (not envelope or u is None) else u
    if not 0 <= target_u <= r:
        raise ValueError(f"u must lie in [0, {r}], got {target_u}")
    basis = EnvelopeBasis.full(r) if target_u == r else one_d_algorithm(acc, target_u)
    step = mstep_given_gamma(basis, acc, n)
    predictor = update_predictor(acc, n, family, scale)
    fit = _fit_from_step(step, predictor, n, method or (FULL_ENVELOPE if envelope else FULL_MLE))
    fit.iterations = 1
    fit.q_value = _q_value(acc, step, predictor, n)
    return fit


def complete_case_fit(ds: ObservedDataset, opts: EmOptions, envelope: bool = True) -> EnvelopeFit:
    """Drop every row with a missing cell, then fit on what is left."""
    u = ds.r if (opts.u is None or not envelope) else opts.u
    cc = ds.complete_case()
    needed = max(ds.p, u) + 1
    if cc.n < needed:
        raise TooFewCompleteRows(f"{cc.n} complete rows; at least {needed} needed")
    logger.debug(f"Complete-case fit on {cc.n} of {ds.n} rows")
    return full_data_fit(cc.x, cc.y, u=u, envelope=envelope, predictor_model=opts.predictor_model,
                         scale=opts.bernoulli_scale, method=CC_ENVELOPE if envelope else CC_STANDARD)


def fit_by_method(method: str, ds: ObservedDataset, opts: EmOptions,
                  full: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> EnvelopeFit:
    """Dispatch one of the six estimators; full-data ones need the unmasked (x, y)."""
    if method == EM_ENVELOPE:
        return em_envelope_fit(ds, opts)
    if method == EM_STANDARD:
        return em_standard_fit(ds, opts)
    if method == CC_ENVELOPE:
        return complete_case_fit(ds, opts, envelope=True)
    if method == CC_STANDARD:
        return complete_case_fit(ds, opts, envelope=False)
    if method in (FULL_ENVELOPE, FULL_MLE):
        if full is None:
            raise ValueError(f"{method} needs the fully observed data")
        envelope = method == FULL_ENVELOPE
        return full_data_fit(full[0], full[1], u=opts.u if envelope else None, envelope=envelope,
                             predictor_model=opts.predictor_model, scale=opts.bernoulli_scale)
    raise ValueError(f"unknown estimator {method!r}")
