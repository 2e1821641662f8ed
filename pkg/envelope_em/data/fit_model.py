"""
Parameter and fit models for envelope regression with missing data
"""
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Union

import numpy as np

from envelope_em.errors import InvalidConfig


def matrix_payload(m) -> Dict[str, Any]:
    """Encode a matrix or vector as {"shape", "data"} with nested lists."""
    arr = np.asarray(m, dtype=float)
    return {"shape": list(arr.shape), "data": arr.tolist()}


def matrix_from_payload(payload: Dict[str, Any]) -> np.ndarray:
    shape = tuple(payload["shape"])
    return np.asarray(payload["data"], dtype=float).reshape(shape)


class PredictorFamily(str, Enum):
    NORMAL = "normal"
    BERNOULLI = "bernoulli"

    @classmethod
    def parse(cls, value: Union[str, "PredictorFamily"]) -> "PredictorFamily":
        if isinstance(value, cls):
            return value
        text = str(value).strip().lower()
        for family in cls:
            if family.value == text:
                return family
        raise InvalidConfig(f"unknown predictor model {value!r}")


@dataclass(frozen=True)
class NormalPredictor:
    """Joint-normal predictor model X ~ N(mux, sigmax)"""
    mux: np.ndarray
    sigmax: np.ndarray

    family = PredictorFamily.NORMAL

    @property
    def dim(self) -> int:
        return self.mux.shape[0]

    @property
    def n_params(self) -> int:
        p = self.dim
        return p + p * (p + 1) // 2

    def to_dict(self):
        return {"family": self.family.value, "mux": matrix_payload(self.mux), "sigmax": matrix_payload(self.sigmax)}


@dataclass(frozen=True)
class BernoulliPredictor:
    """Two-point predictor X = c * Bernoulli(pi), support {0, c}"""
    pi: float
    scale: float = 1.0

    family = PredictorFamily.BERNOULLI

    @property
    def dim(self) -> int:
        return 1

    @property
    def n_params(self) -> int:
        return 1

    def to_dict(self):
        return {"family": self.family.value, "pi": float(self.pi), "scale": float(self.scale)}


PredictorModel = Union[NormalPredictor, BernoulliPredictor]


def predictor_vector(model: PredictorModel) -> np.ndarray:
    """rho as a flat vector: (mux, vech sigmax) or (pi,)."""
    if isinstance(model, BernoulliPredictor):
        return np.array([model.pi])
    sigmax = np.asarray(model.sigmax)
    lower = sigmax.T[np.triu_indices(sigmax.shape[0])]
    return np.concatenate([np.asarray(model.mux, dtype=float), lower])


@dataclass(frozen=True)
class RegressionParams:
    """Conditional model Y | X ~ N(beta X, sigma)"""
    beta: np.ndarray
    sigma: np.ndarray

    @property
    def r(self) -> int:
        return self.beta.shape[0]

    @property
    def p(self) -> int:
        return self.beta.shape[1]


@dataclass
class EmOptions:
    """Options shared by every estimator path"""
    tol: float = 1e-6
    max_iter: int = 500
    # None fits the standard model (u = r)
    u: Optional[int] = None
    predictor_model: PredictorFamily = PredictorFamily.NORMAL
    bernoulli_scale: float = 1.0
    # Overrides for the cold start: beta, sigma, mux, sigmax, pi
    init: Dict[str, Any] = field(default_factory=dict)
    warm_start: bool = False
    # Keep the previous span when the new one has a worse envelope objective
    safeguard: bool = True
    track_loglik: bool = True

    def __post_init__(self):
        self.predictor_model = PredictorFamily.parse(self.predictor_model)
        if not self.tol > 0:
            raise InvalidConfig(f"tol must be > 0, got {self.tol}")
        if self.max_iter < 1:
            raise InvalidConfig(f"max_iter must be >= 1, got {self.max_iter}")
        if self.u is not None and self.u < 0:
            raise InvalidConfig(f"u must be >= 0, got {self.u}")
        if not self.bernoulli_scale > 0:
            raise InvalidConfig(f"bernoulli scale must be > 0, got {self.bernoulli_scale}")

    def with_u(self, u: Optional[int]) -> "EmOptions":
        return EmOptions(
            tol=self.tol, max_iter=self.max_iter, u=u, predictor_model=self.predictor_model,
            bernoulli_scale=self.bernoulli_scale, init=dict(self.init), warm_start=self.warm_start,
            safeguard=self.safeguard, track_loglik=self.track_loglik,
        )

    def to_dict(self):
        return {
            "tol": self.tol,
            "max_iter": self.max_iter,
            "u": self.u,
            "predictor_model": self.predictor_model.value,
            "bernoulli_scale": self.bernoulli_scale,
            "warm_start": self.warm_start,
        }


@dataclass
class EnvelopeFit:
    """Estimated envelope model plus the iteration record"""
    beta: np.ndarray
    sigma: np.ndarray
    sigma1: np.ndarray
    sigma2: np.ndarray
    gamma: np.ndarray
    gamma0: np.ndarray
    eta: np.ndarray
    omega: np.ndarray
    omega0: np.ndarray
    predictor: PredictorModel
    u: int
    n: int
    method: str = "em-envelope"
    iterations: int = 0
    converged: bool = True
    loglik_trace: List[float] = field(default_factory=list)
    beta_trace_norm: List[float] = field(default_factory=list)
    q_value: float = float("nan")

    @property
    def r(self) -> int:
        return self.beta.shape[0]

    @property
    def p(self) -> int:
        return self.beta.shape[1]

    @property
    def is_standard(self) -> bool:
        return self.u == self.r

    @property
    def label(self) -> str:
        if self.is_standard:
            return f"standard MLE (u=r={self.r})"
        return f"envelope (u={self.u})"

    def to_dict(self):
        """Convert fit to a JSON-ready dictionary"""
        return {
            "method": self.method,
            "label": self.label,
            "u": self.u,
            "n": self.n,
            "iterations": self.iterations,
            "converged": self.converged,
            "beta": matrix_payload(self.beta),
            "sigma": matrix_payload(self.sigma),
            "gamma": matrix_payload(self.gamma),
            "gamma0": matrix_payload(self.gamma0),
            "eta": matrix_payload(self.eta),
            "omega": matrix_payload(self.omega),
            "omega0": matrix_payload(self.omega0),
            "predictor": self.predictor.to_dict(),
            "q_value": float(self.q_value),
            "loglik_trace": [float(v) for v in self.loglik_trace],
            "beta_trace_norm": [float(v) for v in self.beta_trace_norm],
        }
