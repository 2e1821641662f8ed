"""
Dimension selection service - BIC_Q and bootstrap q² selection of u
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from envelope_em.config.settings import Settings
from envelope_em.data.dataset_model import ObservedDataset
from envelope_em.data.fit_model import EmOptions, EnvelopeFit
from envelope_em.errors import EnvelopeError
from envelope_em.utils.linalg import q2_corr
from envelope_em.utils.parallel import parallel_map
from .em_service import em_envelope_fit

logger = logging.getLogger(__name__)

FitFunction = Callable[[ObservedDataset, EmOptions], EnvelopeFit]


@dataclass
class SelectionReport:
    """Chosen envelope dimension and the evidence behind it"""
    chosen_u: int
    method: str
    criterion: List[float] = field(default_factory=list)
    mean_q2: Dict[int, float] = field(default_factory=dict)
    reps: int = 0
    failures: Dict[int, int] = field(default_factory=dict)
    threshold: Optional[float] = None
    fallback: bool = False
    fits: Dict[int, EnvelopeFit] = field(default_factory=dict, repr=False)

    def to_dict(self):
        return {
            "chosen_u": self.chosen_u,
            "method": self.method,
            "criterion": [None if not np.isfinite(v) else float(v) for v in self.criterion],
            "mean_q2": {str(u): float(v) for u, v in sorted(self.mean_q2.items())},
            "reps": self.reps,
            "failures": {str(u): int(v) for u, v in sorted(self.failures.items())},
            "threshold": self.threshold,
            "fallback_to_bicq": self.fallback,
        }


def bic_q(fit: EnvelopeFit, n: int, p: int, u: int) -> float:
    """-2 Q(phi|phi) + p u log n"""
    return -2.0 * float(fit.q_value) + p * u * float(np.log(n))


def select_u_bic(ds: ObservedDataset, opts: EmOptions, n_jobs: int = 1,
                 fit_fn: FitFunction = em_envelope_fit) -> SelectionReport:
    """
    Fit every u in 0..r and keep the smallest BIC_Q

    Returns:
        SelectionReport with one criterion value per u; ties go to the smaller u
    """
    candidates = list(range(ds.r + 1))
    fits = parallel_map(lambda u: fit_fn(ds, opts.with_u(u)), candidates, n_jobs=n_jobs)
    criterion = [bic_q(fit, fit.n, ds.p, u) for u, fit in zip(candidates, fits)]
    ranked = np.where(np.isfinite(criterion), criterion, np.inf)
    chosen = int(np.argmin(ranked))
    logger.info(f"BIC_Q selected u={chosen} (criterion {criterion[chosen]:.4f})")
    return SelectionReport(chosen_u=chosen, method="bicq", criterion=criterion,
                           fits={u: fit for u, fit in zip(candidates, fits)})


def resample_rows(n: int, seed: int, replicate: int) -> np.ndarray:
    """Row indices of one bootstrap replicate; the stream depends only on (seed, replicate)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, replicate]))
    return rng.integers(0, n, size=n)


def _replicate_q2(ds: ObservedDataset, opts: EmOptions, reference: np.ndarray, seed: int,
                  replicate: int, fit_fn: FitFunction) -> Optional[float]:
    rows = resample_rows(ds.n, seed, replicate)
    try:
        fit = fit_fn(ds.subset(rows), opts)
    except EnvelopeError as error:
        logger.debug(f"Replicate {replicate} failed: {error.code}")
        return None
    if not fit.converged:
        return None
    return q2_corr(reference, fit.gamma)


def select_u_bootstrap(ds: ObservedDataset, opts: EmOptions, b: int = None, threshold: float = None,
                       seed: int = 0, n_jobs: int = 1, fit_fn: FitFunction = em_envelope_fit) -> SelectionReport:
    """
    Largest u (from r−1 down) whose mean bootstrap q² against the original fit exceeds the threshold

    Falls back to BIC_Q when no candidate qualifies.
    """
    b = Settings.BOOTSTRAP_REPS if b is None else b
    threshold = Settings.SELECTION_THRESHOLD if threshold is None else threshold
    if b < 1:
        raise ValueError(f"bootstrap replicates must be >= 1, got {b}")

    mean_q2: Dict[int, float] = {}
    failures: Dict[int, int] = {}
    for u in range(ds.r - 1, -1, -1):
        if u == 0:
            mean_q2[0] = 1.0
            failures[0] = 0
        else:
            candidate_opts = opts.with_u(u)
            reference = fit_fn(ds, candidate_opts).gamma
            values = parallel_map(
                lambda j: _replicate_q2(ds, candidate_opts, reference, seed, j, fit_fn),
                range(b), n_jobs=n_jobs)
            kept = [v for v in values if v is not None]
            failures[u] = b - len(kept)
            mean_q2[u] = float(np.mean(kept)) if kept else float("nan")
            if failures[u]:
                logger.warning(f"u={u}: {failures[u]} of {b} bootstrap replicates dropped")
        logger.debug(f"u={u}: mean q2 = {mean_q2[u]:.4f}")
        if np.isfinite(mean_q2[u]) and mean_q2[u] > threshold:
            logger.info(f"Bootstrap selected u={u} (mean q2 {mean_q2[u]:.4f} > {threshold})")
            return SelectionReport(chosen_u=u, method="bootstrap", mean_q2=mean_q2, reps=b,
                                   failures=failures, threshold=threshold)

    logger.warning("No dimension passed the bootstrap threshold; falling back to BIC_Q")
    report = select_u_bic(ds, opts, n_jobs=n_jobs, fit_fn=fit_fn)
    report.method = "bootstrap"
    report.mean_q2 = mean_q2
    report.reps = b
    report.failures = failures
    report.threshold = threshold
    report.fallback = True
    return report


def select_u(ds: ObservedDataset, opts: EmOptions, method: str = "bicq", reps: int = None,
             threshold: float = None, seed: int = 0, n_jobs: int = 1,
             fit_fn: FitFunction = em_envelope_fit) -> SelectionReport:
    if method == "bicq":
        return select_u_bic(ds, opts, n_jobs=n_jobs, fit_fn=fit_fn)
    if method == "bootstrap":
        return select_u_bootstrap(ds, opts, b=reps, threshold=threshold, seed=seed, n_jobs=n_jobs, fit_fn=fit_fn)
    raise ValueError(f"unknown selection method {method!r}")
