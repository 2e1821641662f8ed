"""
Envelope M-step service - span estimation by the one-direction-at-a-time
algorithm and the closed-form updates given a basis
"""
import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy import linalg

from envelope_em.errors import NotOrthonormal, ShapeMismatch, SingularA3, SingularMkPlusUk
from envelope_em.utils.linalg import (
    is_semi_orthonormal,
    logdet0,
    orth_complete,
    qr_orthonormalize,
    sym_eig,
)
from .moment_service import MomentAccumulators

logger = logging.getLogger(__name__)

DIRECTION_MAX_ITER = 200
DIRECTION_TOL = 1e-10
# Quadratic forms below this share of trace/dim count as zero
QUAD_FLOOR = 1e-12
MK_RIDGE = 1e-10


@dataclass(frozen=True)
class EnvelopeBasis:
    """(Γ, Γ0) jointly orthonormal"""
    gamma: np.ndarray
    gamma0: np.ndarray

    def __post_init__(self):
        r = self.gamma.shape[0]
        if self.gamma0.shape[0] != r or self.gamma.shape[1] + self.gamma0.shape[1] != r:
            raise ShapeMismatch(f"basis blocks {self.gamma.shape} and {self.gamma0.shape} do not form an r×r matrix")
        if not is_semi_orthonormal(np.hstack([self.gamma, self.gamma0]), 1e-9):
            raise NotOrthonormal("(gamma, gamma0) is not orthonormal")

    @property
    def u(self) -> int:
        return self.gamma.shape[1]

    @property
    def r(self) -> int:
        return self.gamma.shape[0]

    @classmethod
    def from_gamma(cls, gamma) -> "EnvelopeBasis":
        gamma = np.asarray(gamma, dtype=float)
        if gamma.shape[1]:
            gamma = qr_orthonormalize(gamma)
        return cls(gamma=gamma, gamma0=orth_complete(gamma))

    @classmethod
    def full(cls, r: int) -> "EnvelopeBasis":
        return cls(gamma=np.eye(r), gamma0=np.zeros((r, 0)))


@dataclass(frozen=True)
class MStepResult:
    beta: np.ndarray
    sigma1: np.ndarray
    sigma2: np.ndarray
    sigma: np.ndarray
    eta: np.ndarray
    omega: np.ndarray
    omega0: np.ndarray
    basis: EnvelopeBasis


def regression_terms(acc: MomentAccumulators) -> Tuple[np.ndarray, np.ndarray]:
    """
    Least-squares pieces of the accumulators

    Returns:
        (A2 A3⁻¹, A1 − A2 A3⁻¹ A2ᵀ)

    Raises:
        SingularA3 when A3 is not positive definite
    """
    r, p = acc.a2.shape
    if p == 0:
        return np.zeros((r, 0)), (acc.a1 + acc.a1.T) / 2.0
    try:
        factor = linalg.cho_factor(acc.a3, lower=True, check_finite=False)
    except linalg.LinAlgError:
        raise SingularA3("predictor second-moment matrix A3 is singular")
    coef = linalg.cho_solve(factor, acc.a2.T, check_finite=False).T
    resid = acc.a1 - coef @ acc.a2.T
    return coef, (resid + resid.T) / 2.0


def envelope_objective(gamma, acc: MomentAccumulators) -> float:
    """log det0 { P_Γ M P_Γ + Q_Γ A1 Q_Γ } with M = A1 − A2 A3⁻¹ A2ᵀ"""
    gamma = np.asarray(gamma, dtype=float)
    if not is_semi_orthonormal(gamma, 1e-9):
        raise NotOrthonormal("gamma columns are not orthonormal")
    _, resid = regression_terms(acc)
    proj = gamma @ gamma.T
    comp = np.eye(gamma.shape[0]) - proj
    target = proj @ resid @ proj + comp @ acc.a1 @ comp
    return logdet0((target + target.T) / 2.0)


class _DirectionObjective:
    """D(w) = log(wᵀ M w) + log(wᵀ (M + U)⁻¹ w) on the unit sphere"""

    def __init__(self, m: np.ndarray, total: np.ndarray):
        dim = m.shape[0]
        scale = max(float(np.trace(total)) / dim, 0.0)
        try:
            factor = linalg.cho_factor(total, lower=True, check_finite=False)
        except linalg.LinAlgError:
            ridge = MK_RIDGE * scale
            if not ridge > 0:
                raise SingularMkPlusUk("M_k + U_k is singular")
            logger.warning(f"M_k + U_k singular; adding ridge {ridge:.3e}")
            try:
                factor = linalg.cho_factor(total + ridge * np.eye(dim), lower=True, check_finite=False)
            except linalg.LinAlgError:
                raise SingularMkPlusUk("M_k + U_k is singular after ridge")
        inv = linalg.cho_solve(factor, np.eye(dim), check_finite=False)
        self.m = m
        self.inv = (inv + inv.T) / 2.0
        self.floor_m = QUAD_FLOOR * scale
        self.floor_inv = QUAD_FLOOR * float(np.trace(self.inv)) / dim

    def value(self, w: np.ndarray) -> float:
        quad_m = max(float(w @ self.m @ w), self.floor_m)
        quad_inv = max(float(w @ self.inv @ w), self.floor_inv)
        return float(np.log(quad_m) + np.log(quad_inv))

    def gradient(self, w: np.ndarray) -> np.ndarray:
        grad = np.zeros_like(w)
        quad_m = float(w @ self.m @ w)
        if quad_m > self.floor_m:
            grad += 2.0 * (self.m @ w) / quad_m
        quad_inv = float(w @ self.inv @ w)
        if quad_inv > self.floor_inv:
            grad += 2.0 * (self.inv @ w) / quad_inv
        return grad


def _minimize_on_sphere(objective: _DirectionObjective) -> np.ndarray:
    """Best eigenvector start of M and (M+U)⁻¹, refined by projected gradient descent with backtracking."""
    candidates = np.hstack([sym_eig(objective.m).eigenvectors, sym_eig(objective.inv).eigenvectors])
    values = [objective.value(candidates[:, j]) for j in range(candidates.shape[1])]
    w = candidates[:, int(np.argmin(values))].copy()
    current = min(values)

    for _ in range(DIRECTION_MAX_ITER):
        grad = objective.gradient(w)
        tangent = grad - (w @ grad) * w
        slope = float(tangent @ tangent)
        if slope <= 1e-24:
            break
        step = 1.0
        improved = False
        for _ in range(40):
            trial = w - step * tangent
            trial /= np.linalg.norm(trial)
            trial_value = objective.value(trial)
            if trial_value <= current - 1e-4 * step * slope:
                improved = True
                break
            step /= 2.0
        if not improved:
            break
        decrease = current - trial_value
        w, current = trial, trial_value
        if decrease < DIRECTION_TOL:
            break
    return w


def one_d_algorithm(acc: MomentAccumulators, u: int) -> EnvelopeBasis:
    """
    Estimate an envelope basis one direction at a time

    At step k the stepwise objective is minimized over unit vectors in the
    orthogonal complement of the directions found so far.
    """
    r = acc.r
    if not 0 <= u <= r:
        raise ShapeMismatch(f"u must lie in [0, {r}], got {u}")
    coef, resid = regression_terms(acc)
    if u == r:
        return EnvelopeBasis.full(r)
    if u == 0:
        return EnvelopeBasis(gamma=np.zeros((r, 0)), gamma0=np.eye(r))

    fitted = coef @ acc.a2.T
    fitted = (fitted + fitted.T) / 2.0
    directions = np.zeros((r, 0))
    for k in range(u):
        complement = orth_complete(directions)
        m_k = complement.T @ resid @ complement
        u_k = complement.T @ fitted @ complement
        total = m_k + u_k
        objective = _DirectionObjective((m_k + m_k.T) / 2.0, (total + total.T) / 2.0)
        w = _minimize_on_sphere(objective)
        g = complement @ w
        directions = np.hstack([directions, (g / np.linalg.norm(g)).reshape(r, 1)])
        logger.debug(f"Direction {k + 1}/{u}: D = {objective.value(w):.6g}")

    return EnvelopeBasis.from_gamma(directions)


def mstep_given_gamma(basis: EnvelopeBasis, acc: MomentAccumulators, n: int) -> MStepResult:
    """
    Closed-form M-step for a fixed envelope basis

    Returns:
        MStepResult with β = P_Γ A2A3⁻¹, Σ1 = P_Γ M P_Γ / n, Σ2 = Q_Γ A1 Q_Γ / n
    """
    coef, resid = regression_terms(acc)
    gamma, gamma0 = basis.gamma, basis.gamma0
    proj = gamma @ gamma.T
    comp = gamma0 @ gamma0.T

    sigma1 = proj @ resid @ proj / n
    sigma2 = comp @ acc.a1 @ comp / n
    sigma1 = (sigma1 + sigma1.T) / 2.0
    sigma2 = (sigma2 + sigma2.T) / 2.0
    beta = proj @ coef
    omega = gamma.T @ sigma1 @ gamma
    omega0 = gamma0.T @ sigma2 @ gamma0
    return MStepResult(
        beta=beta,
        sigma1=sigma1,
        sigma2=sigma2,
        sigma=sigma1 + sigma2,
        eta=gamma.T @ beta,
        omega=(omega + omega.T) / 2.0,
        omega0=(omega0 + omega0.T) / 2.0,
        basis=basis,
    )
