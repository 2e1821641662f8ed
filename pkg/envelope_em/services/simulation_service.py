"""
Simulation harness service - parameter and data generation, MAR missingness
mechanisms, and Monte Carlo comparison of the six estimators
"""
import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.optimize import brentq
from scipy.special import expit
from scipy.stats import multivariate_t

from envelope_em.data.dataset_model import ObservedDataset
from envelope_em.data.fit_model import EmOptions, EnvelopeFit, PredictorFamily
from envelope_em.errors import DimensionTooSmallForMechanism, EnvelopeError, InvalidConfig
from envelope_em.utils.linalg import orth_complete, qr_orthonormalize
from envelope_em.utils.parallel import parallel_map
from .em_service import (
    CC_ENVELOPE,
    EM_ENVELOPE,
    ESTIMATORS,
    FULL_ENVELOPE,
    FULL_MLE,
    fit_by_method,
)
from .selection_service import select_u

logger = logging.getLogger(__name__)

ERROR_FAMILIES = ["normal", "t", "uniform", "laplace"]
PREDICTOR_FAMILIES = ["normal", "two-point", "t"]
SELECTION_MODES = ["fixed", "bicq", "bootstrap"]
T_DF = 5

# Seed-stream tags
PARAM_TAG = 0
PILOT_TAG = 1
DATA_TAG = 2
MASK_TAG = 3
BOOT_TAG = 4

MAX_TARGET_RATE = 0.99

ENVELOPE_ESTIMATORS = [EM_ENVELOPE, CC_ENVELOPE, FULL_ENVELOPE]

SUMMARY_COLUMNS = ["min", "Q1", "median", "mean", "Q3", "max"]


@dataclass(frozen=True)
class ScenarioSpec:
    """One simulation design"""
    name: str = "custom"
    n: int = 500
    r: int = 20
    p: int = 5
    u: int = 3
    error_family: str = "normal"
    predictor_family: str = "normal"
    omega_scale: float = 0.1
    omega0_scale: float = 1000.0
    reps: int = 1000
    seed: int = 0
    bernoulli_scale: float = 25.0
    bernoulli_pi: float = 0.5
    x_missing_rate: float = 0.12
    y_missing_rate: float = 0.07
    remap_mechanisms: bool = True
    pilot_n: int = 5000
    selection: str = "bicq"
    selection_reps: int = 20
    selection_threshold: float = 0.95
    tol: float = 1e-6
    max_iter: int = 500

    def __post_init__(self):
        if self.error_family not in ERROR_FAMILIES:
            raise InvalidConfig(f"error family must be one of {', '.join(ERROR_FAMILIES)}")
        if self.predictor_family not in PREDICTOR_FAMILIES:
            raise InvalidConfig(f"predictor family must be one of {', '.join(PREDICTOR_FAMILIES)}")
        if self.selection not in SELECTION_MODES:
            raise InvalidConfig(f"selection must be one of {', '.join(SELECTION_MODES)}")
        if min(self.n, self.r, self.p, self.reps) < 1:
            raise InvalidConfig("n, r, p and reps must be >= 1")
        if not 0 <= self.u <= self.r:
            raise InvalidConfig(f"u must lie in [0, r={self.r}], got {self.u}")
        if not (self.omega_scale > 0 and self.omega0_scale > 0):
            raise InvalidConfig("omega scales must be > 0")
        if self.predictor_family == "two-point" and self.p != 1:
            raise InvalidConfig("the two-point predictor design needs p = 1")
        if not (0 <= self.x_missing_rate < 1 and 0 <= self.y_missing_rate < 1):
            raise InvalidConfig("missing rates must lie in [0, 1)")

    @property
    def working_model(self) -> PredictorFamily:
        return PredictorFamily.BERNOULLI if self.predictor_family == "two-point" else PredictorFamily.NORMAL

    def em_options(self, u: Optional[int] = None) -> EmOptions:
        return EmOptions(tol=self.tol, max_iter=self.max_iter, u=u, predictor_model=self.working_model,
                         bernoulli_scale=self.bernoulli_scale, track_loglik=False)

    def to_dict(self):
        return dataclasses.asdict(self)


PRESETS: Dict[str, ScenarioSpec] = {
    "normal-omega0-1000": ScenarioSpec(name="normal-omega0-1000"),
    "normal-omega0-10": ScenarioSpec(name="normal-omega0-10", omega0_scale=10.0),
    "t-bernoulli": ScenarioSpec(
        name="t-bernoulli", r=10, p=1, u=2, error_family="t", predictor_family="two-point",
        omega_scale=1.0, omega0_scale=1000.0, selection="bootstrap"),
    "t-t": ScenarioSpec(
        name="t-t", r=10, p=5, u=2, error_family="t", predictor_family="t",
        omega_scale=1.0, omega0_scale=1000.0, selection="bootstrap"),
    "uniform-t": ScenarioSpec(
        name="uniform-t", r=10, p=5, u=2, error_family="uniform", predictor_family="t",
        omega_scale=1.0, omega0_scale=10.0, selection="bootstrap"),
    "laplace-t": ScenarioSpec(
        name="laplace-t", r=10, p=5, u=2, error_family="laplace", predictor_family="t",
        omega_scale=1.0, omega0_scale=20.0, selection="bootstrap"),
}


def get_preset(name: str, **overrides) -> ScenarioSpec:
    if name not in PRESETS:
        raise InvalidConfig(f"unknown scenario {name!r}; choose from {', '.join(PRESETS)}")
    return dataclasses.replace(PRESETS[name], **overrides)


@dataclass(frozen=True)
class SimParameters:
    gamma: np.ndarray
    gamma0: np.ndarray
    beta: np.ndarray
    mux: np.ndarray
    sigmax: Optional[np.ndarray]
    pi: Optional[float]
    omega: np.ndarray
    omega0: np.ndarray

    @property
    def sigma_eps(self) -> np.ndarray:
        return self.gamma @ self.omega @ self.gamma.T + self.gamma0 @ self.omega0 @ self.gamma0.T


def _rng(*entropy) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(entropy)))


def gen_parameters(spec: ScenarioSpec, seed: Optional[int] = None) -> SimParameters:
    """
    Γ from the QR of U(0,1) entries, β = P_Γ β̃ with β̃ ~ U(−10,10), Σx = NNᵀ with N ~ U(−10,10)
    """
    rng = _rng(spec.seed if seed is None else seed, PARAM_TAG)
    r, p, u = spec.r, spec.p, spec.u
    gamma_tilde = rng.uniform(0.0, 1.0, size=(r, u))
    beta_tilde = rng.uniform(-10.0, 10.0, size=(r, p))
    gamma = qr_orthonormalize(gamma_tilde) if u else np.zeros((r, 0))
    gamma0 = orth_complete(gamma)
    beta = gamma @ (gamma.T @ beta_tilde)

    sigmax = None
    pi = None
    mux = np.zeros(p)
    if spec.predictor_family == "two-point":
        pi = spec.bernoulli_pi
        mux = np.full(p, spec.bernoulli_scale * pi)
    else:
        root = rng.uniform(-10.0, 10.0, size=(p, p))
        sigmax = root @ root.T
        if spec.predictor_family == "normal":
            mux = rng.uniform(-10.0, 10.0, size=p)

    return SimParameters(
        gamma=gamma, gamma0=gamma0, beta=beta, mux=mux, sigmax=sigmax, pi=pi,
        omega=spec.omega_scale * np.eye(u), omega0=spec.omega0_scale * np.eye(r - u),
    )


def _draw_errors(rng: np.random.Generator, family: str, scale: float, n: int, dim: int) -> np.ndarray:
    """n draws in dim coordinates; scale is the variance, t shape, half-width or Laplace b."""
    if dim == 0:
        return np.zeros((n, 0))
    if family == "normal":
        return rng.standard_normal((n, dim)) * np.sqrt(scale)
    if family == "t":
        dist = multivariate_t(loc=np.zeros(dim), shape=scale * np.eye(dim), df=T_DF)
        return np.asarray(dist.rvs(size=n, random_state=rng)).reshape(n, dim)
    if family == "uniform":
        return rng.uniform(-scale, scale, size=(n, dim))
    if family == "laplace":
        return rng.laplace(0.0, scale, size=(n, dim))
    raise InvalidConfig(f"unknown error family {family!r}")


def gen_full_data(params: SimParameters, spec: ScenarioSpec, seed, n: Optional[int] = None,
                  noise: bool = True) -> Tuple[np.ndarray, np.ndarray]:
    """
    Draw n complete rows

    Returns:
        (X, Y) with Y = Xβᵀ + (Γε1 + Γ0ε2)ᵀ
    """
    rng = np.random.default_rng(seed)
    n = spec.n if n is None else n
    p, u, r = spec.p, spec.u, spec.r

    if spec.predictor_family == "two-point":
        x = spec.bernoulli_scale * rng.binomial(1, params.pi, size=(n, p)).astype(float)
    elif spec.predictor_family == "t":
        dist = multivariate_t(loc=params.mux, shape=params.sigmax, df=T_DF, allow_singular=True)
        x = np.asarray(dist.rvs(size=n, random_state=rng)).reshape(n, p)
    else:
        x = rng.multivariate_normal(params.mux, params.sigmax, size=n)

    y = x @ params.beta.T
    if noise:
        material = _draw_errors(rng, spec.error_family, spec.omega_scale, n, u)
        immaterial = _draw_errors(rng, spec.error_family, spec.omega0_scale, n, r - u)
        y = y + material @ params.gamma.T + immaterial @ params.gamma0.T
    return x, y


@dataclass(frozen=True)
class Mechanism:
    """
    logit P(targets missing) = intercept + offset + sum(coef * value); variables are
    ("x" | "y", 0-based column)
    """
    targets: Tuple[Tuple[str, int], ...]
    terms: Tuple[Tuple[float, Tuple[str, int]], ...]
    intercept: float
    offset: float = 0.0

    @property
    def conditioning(self) -> Tuple[Tuple[str, int], ...]:
        return tuple(var for _, var in self.terms)

    def linear_predictor(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        lp = np.full(x.shape[0], self.intercept + self.offset)
        for coef, (block, j) in self.terms:
            lp = lp + coef * (x[:, j] if block == "x" else y[:, j])
        return lp

    def to_dict(self):
        name = lambda var: f"{var[0]}{var[1] + 1}"  # noqa: E731
        return {
            "targets": [name(var) for var in self.targets],
            "terms": [[coef, name(var)] for coef, var in self.terms],
            "intercept": self.intercept,
            "offset": None if not np.isfinite(self.offset) else self.offset,
        }


def _var(label: str) -> Tuple[str, int]:
    return label[0], int(label[1:]) - 1


def _mechanism(targets: Sequence[str], intercept: float, terms: Sequence[Tuple[float, str]]) -> Mechanism:
    return Mechanism(targets=tuple(_var(t) for t in targets),
                     terms=tuple((float(c), _var(v)) for c, v in terms), intercept=float(intercept))


X_MECHANISMS = (
    _mechanism(["x4"], 1, [(-1, "x1"), (-2, "x2"), (-3, "x3")]),
    _mechanism(["x3"], 1, [(-1, "x1"), (-2, "x4")]),
    _mechanism(["x5"], 1, [(-1, "x1")]),
)

Y_MECHANISMS = (
    _mechanism(["y2", "y4"], 2, [(-1, "x1"), (-1, "y8"), (-3, "y9")]),
    _mechanism(["y3"], 1, [(-1, "x2"), (-3, "y4"), (-1, "y6")]),
    _mechanism(["y7", "y8", "y9"], 2, [(-2, "y1"), (-1, "y2"), (-3, "y3")]),
    _mechanism(["y1", "y10"], 1, [(-1, "x1"), (-1, "x2")]),
    _mechanism(["y5", "y6"], 1, [(-1, "x1"), (-1, "x2"), (-1, "y1"), (-1, "y10")]),
)


def _remap(mech: Mechanism, p: int, r: int) -> Mechanism:
    def wrap(var):
        block, j = var
        return block, j % (p if block == "x" else r)

    targets = tuple(dict.fromkeys(wrap(var) for var in mech.targets))
    terms = tuple((coef, wrap(var)) for coef, var in mech.terms if wrap(var) not in targets)
    return Mechanism(targets=targets, terms=terms, intercept=mech.intercept, offset=mech.offset)


@dataclass(frozen=True)
class MissingnessPlan:
    x_mechanisms: Tuple[Mechanism, ...]
    y_mechanisms: Tuple[Mechanism, ...]
    remapped: bool = False

    def without_missingness(self) -> "MissingnessPlan":
        return MissingnessPlan(
            x_mechanisms=tuple(dataclasses.replace(m, offset=-np.inf) for m in self.x_mechanisms),
            y_mechanisms=tuple(dataclasses.replace(m, offset=-np.inf) for m in self.y_mechanisms),
            remapped=self.remapped,
        )

    def to_dict(self):
        return {
            "remapped": self.remapped,
            "x_mechanisms": [m.to_dict() for m in self.x_mechanisms],
            "y_mechanisms": [m.to_dict() for m in self.y_mechanisms],
        }


def default_plan(p: int, r: int, remap: bool = True) -> MissingnessPlan:
    """
    The three predictor and five response mechanisms, column indices wrapped
    modulo (p, r) for smaller designs

    Raises:
        DimensionTooSmallForMechanism when p < 5 or r < 10 and remap is off
    """
    if p >= 5 and r >= 10:
        return MissingnessPlan(X_MECHANISMS, Y_MECHANISMS, remapped=False)
    if not remap:
        raise DimensionTooSmallForMechanism(f"mechanisms reference x5 and y10; got p={p}, r={r}")
    return MissingnessPlan(
        x_mechanisms=tuple(_remap(m, p, r) for m in X_MECHANISMS),
        y_mechanisms=tuple(_remap(m, p, r) for m in Y_MECHANISMS),
        remapped=True,
    )


def _calibrate_mechanism(mech: Mechanism, x: np.ndarray, y: np.ndarray, target: float) -> Mechanism:
    """Shift the intercept so that the pilot-sample mean missing probability hits target."""
    if target <= 0:
        return dataclasses.replace(mech, offset=-np.inf)
    base = dataclasses.replace(mech, offset=0.0).linear_predictor(x, y)
    bound = float(np.max(np.abs(base))) + 50.0

    def gap(shift: float) -> float:
        return float(np.mean(expit(base + shift))) - target

    offset = brentq(gap, -bound, bound, xtol=1e-10)
    return dataclasses.replace(mech, offset=offset)


def calibrate_plan(plan: MissingnessPlan, x: np.ndarray, y: np.ndarray,
                   x_rate: float, y_rate: float) -> MissingnessPlan:
    """
    Each row uses one of K mechanisms per block, so a mechanism targets rate·K
    (capped) to give roughly `rate` per affected variable
    """
    x_target = min(x_rate * len(plan.x_mechanisms), MAX_TARGET_RATE)
    y_target = min(y_rate * len(plan.y_mechanisms), MAX_TARGET_RATE)
    return MissingnessPlan(
        x_mechanisms=tuple(_calibrate_mechanism(m, x, y, x_target) for m in plan.x_mechanisms),
        y_mechanisms=tuple(_calibrate_mechanism(m, x, y, y_target) for m in plan.y_mechanisms),
        remapped=plan.remapped,
    )


def gen_missingness(x: np.ndarray, y: np.ndarray, spec: ScenarioSpec, seed,
                    plan: Optional[MissingnessPlan] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per row, one predictor and one response mechanism chosen uniformly; targets
    that either chosen mechanism conditions on are kept, and a row never loses
    every cell

    Returns:
        (x_observed, y_observed) boolean masks
    """
    plan = plan or default_plan(spec.p, spec.r, spec.remap_mechanisms)
    rng = np.random.default_rng(seed)
    n = x.shape[0]
    x_choice = rng.integers(len(plan.x_mechanisms), size=n)
    y_choice = rng.integers(len(plan.y_mechanisms), size=n)
    draws = rng.random((n, 2))

    x_prob = np.column_stack([expit(m.linear_predictor(x, y)) for m in plan.x_mechanisms])
    y_prob = np.column_stack([expit(m.linear_predictor(x, y)) for m in plan.y_mechanisms])
    rows = np.arange(n)
    x_fire = draws[:, 0] < x_prob[rows, x_choice]
    y_fire = draws[:, 1] < y_prob[rows, y_choice]

    x_observed = np.ones(x.shape, dtype=bool)
    y_observed = np.ones(y.shape, dtype=bool)
    for i in range(n):
        x_mech = plan.x_mechanisms[x_choice[i]]
        y_mech = plan.y_mechanisms[y_choice[i]]
        protected = set(x_mech.conditioning) | set(y_mech.conditioning)
        if y_fire[i]:
            for block, j in y_mech.targets:
                if (block, j) not in protected:
                    y_observed[i, j] = False
        if x_fire[i]:
            drop = [j for block, j in x_mech.targets if (block, j) not in protected]
            x_observed[i, drop] = False
            if not (x_observed[i].any() or y_observed[i].any()):
                x_observed[i, drop] = True
    return x_observed, y_observed


def _scenario_plan(spec: ScenarioSpec, params: SimParameters) -> MissingnessPlan:
    plan = default_plan(spec.p, spec.r, spec.remap_mechanisms)
    x_pilot, y_pilot = gen_full_data(params, spec, np.random.SeedSequence([spec.seed, PILOT_TAG]), n=spec.pilot_n)
    return calibrate_plan(plan, x_pilot, y_pilot, spec.x_missing_rate, spec.y_missing_rate)


@dataclass
class SimulatedSample:
    dataset: ObservedDataset
    x_full: np.ndarray
    y_full: np.ndarray


def simulate_dataset(spec: ScenarioSpec, replicate: int = 0, params: Optional[SimParameters] = None,
                     plan: Optional[MissingnessPlan] = None) -> SimulatedSample:
    """One masked replicate of a scenario"""
    params = params or gen_parameters(spec)
    plan = plan or _scenario_plan(spec, params)
    x, y = gen_full_data(params, spec, np.random.SeedSequence([spec.seed, DATA_TAG, replicate]))
    x_observed, y_observed = gen_missingness(x, y, spec, np.random.SeedSequence([spec.seed, MASK_TAG, replicate]),
                                             plan=plan)
    dataset = ObservedDataset.from_arrays(
        np.where(x_observed, x, np.nan), np.where(y_observed, y, np.nan),
        x_observed=x_observed, y_observed=y_observed)
    return SimulatedSample(dataset=dataset, x_full=x, y_full=y)


def _estimator(method: str):
    """fit_fn(ds, opts) for one estimator; full-data estimators read the unmasked values off ds"""
    if method in (FULL_ENVELOPE, FULL_MLE):
        return lambda ds, opts: fit_by_method(method, ds, opts, full=(ds.x, ds.y))
    return lambda ds, opts: fit_by_method(method, ds, opts)


def mse(beta_hat: np.ndarray, beta: np.ndarray) -> float:
    """‖β̂ − β‖²_F / (rp)"""
    return float(np.sum((beta_hat - beta) ** 2) / beta.size)


@dataclass
class ReplicateOutcome:
    replicate: int
    mse: Dict[str, float]
    selected_u: Dict[str, Optional[int]]
    failures: Dict[str, str]
    missing_rates: Dict[str, float]


def _envelope_with_selection(spec: ScenarioSpec, ds: ObservedDataset, fit_fn,
                             boot_seed: int) -> Tuple[EnvelopeFit, int]:
    if spec.selection == "fixed":
        return fit_fn(ds, spec.em_options(spec.u)), spec.u
    report = select_u(ds, spec.em_options(), method=spec.selection, reps=spec.selection_reps,
                      threshold=spec.selection_threshold, seed=boot_seed, fit_fn=fit_fn)
    chosen = report.chosen_u
    fit = report.fits.get(chosen) or fit_fn(ds, spec.em_options(chosen))
    return fit, chosen


def run_replicate(spec: ScenarioSpec, params: SimParameters, plan: MissingnessPlan, replicate: int) -> ReplicateOutcome:
    """Generate, mask and fit all six estimators for one replicate"""
    sample = simulate_dataset(spec, replicate, params=params, plan=plan)
    ds = sample.dataset
    full = ObservedDataset.from_arrays(sample.x_full, sample.y_full)
    boot_seed = int(np.random.SeedSequence([spec.seed, BOOT_TAG, replicate]).generate_state(1)[0])

    errors: Dict[str, float] = {}
    selected: Dict[str, Optional[int]] = {}
    failures: Dict[str, str] = {}
    for method in ESTIMATORS:
        data = full if method in (FULL_ENVELOPE, FULL_MLE) else ds
        fit_fn = _estimator(method)
        envelope = method in ENVELOPE_ESTIMATORS
        try:
            if envelope:
                fit, chosen = _envelope_with_selection(spec, data, fit_fn, boot_seed)
                selected[method] = chosen
            else:
                fit = fit_fn(data, spec.em_options())
            errors[method] = mse(fit.beta, params.beta)
        except (EnvelopeError, ValueError) as error:
            code = getattr(error, "code", type(error).__name__)
            logger.warning(f"Replicate {replicate}: {method} failed ({code}: {error})")
            errors[method] = float("nan")
            failures[method] = code
            if envelope:
                selected[method] = None
    return ReplicateOutcome(replicate=replicate, mse=errors, selected_u=selected,
                            failures=failures, missing_rates=ds.missing_rates())


@dataclass
class MseSummary:
    """min, Q1, median, mean, Q3 and max of the MSE per estimator"""
    table: pd.DataFrame

    @classmethod
    def from_mse(cls, frame: pd.DataFrame) -> "MseSummary":
        rows = {}
        for method in frame.columns:
            values = frame[method].dropna()
            if values.empty:
                rows[method] = [np.nan] * len(SUMMARY_COLUMNS)
                continue
            rows[method] = [values.min(), values.quantile(0.25), values.median(),
                            values.mean(), values.quantile(0.75), values.max()]
        return cls(table=pd.DataFrame.from_dict(rows, orient="index", columns=SUMMARY_COLUMNS))

    def median(self, method: str) -> float:
        return float(self.table.loc[method, "median"])

    def to_dict(self):
        return {
            method: {column: (None if pd.isna(value) else float(value)) for column, value in row.items()}
            for method, row in self.table.iterrows()
        }

    def to_text(self, separator: str = "\t") -> str:
        return self.table.to_csv(sep=separator, float_format="%.6e", index_label="estimator")


@dataclass
class ScenarioResult:
    spec: ScenarioSpec
    summary: MseSummary
    mse: pd.DataFrame
    selected_u: pd.DataFrame
    failures: Dict[str, int]
    missing_rates: Dict[str, float]
    plan: MissingnessPlan
    outcomes: List[ReplicateOutcome] = field(default_factory=list, repr=False)

    def selection_accuracy(self) -> Dict[str, Optional[float]]:
        accuracy = {}
        for method in self.selected_u.columns:
            chosen = self.selected_u[method].dropna()
            accuracy[method] = None if chosen.empty else float((chosen == self.spec.u).mean())
        return accuracy

    def to_dict(self):
        return {
            "scenario": self.spec.to_dict(),
            "summary": self.summary.to_dict(),
            "selection_accuracy": self.selection_accuracy(),
            "selected_u_counts": {
                method: {str(int(u)): int(count) for u, count in self.selected_u[method].dropna()
                         .astype(int).value_counts().sort_index().items()}
                for method in self.selected_u.columns
            },
            "failures": self.failures,
            "missing_rates": self.missing_rates,
            "missingness": self.plan.to_dict(),
        }


def run_scenario(spec: ScenarioSpec, n_jobs: int = 1) -> ScenarioResult:
    """
    Monte Carlo comparison of the six estimators

    Parameters and the calibrated missingness plan are fixed for the scenario;
    replicate k draws its data, mask and bootstrap streams from (seed, tag, k).
    """
    logger.info(f"Scenario {spec.name}: n={spec.n}, r={spec.r}, p={spec.p}, u={spec.u}, reps={spec.reps}")
    params = gen_parameters(spec)
    plan = _scenario_plan(spec, params)
    outcomes = parallel_map(lambda k: run_replicate(spec, params, plan, k), range(spec.reps), n_jobs=n_jobs)

    mse_frame = pd.DataFrame([o.mse for o in outcomes], columns=ESTIMATORS)
    selected = pd.DataFrame([o.selected_u for o in outcomes],
                            columns=ENVELOPE_ESTIMATORS, dtype=float)
    failures = {method: int(mse_frame[method].isna().sum()) for method in ESTIMATORS}
    rates = pd.DataFrame([o.missing_rates for o in outcomes]).mean(axis=0)
    summary = MseSummary.from_mse(mse_frame)
    logger.info(f"Scenario {spec.name} finished; median MSE em-envelope={summary.median(EM_ENVELOPE):.3e}")
    return ScenarioResult(
        spec=spec, summary=summary, mse=mse_frame, selected_u=selected, failures=failures,
        missing_rates={name: float(rate) for name, rate in rates.items()}, plan=plan, outcomes=outcomes,
    )
