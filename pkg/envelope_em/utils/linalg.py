"""
Dense-matrix primitives shared by the estimation services.

All functions are pure and take/return numpy arrays. Bases returned by
`qr_orthonormalize` and `orth_complete` follow one sign convention (first
nonzero entry of every column positive) so that results are reproducible.
"""
import logging
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from envelope_em.errors import NotOrthonormal, NotSymmetric, RankDeficient, ShapeMismatch

logger = logging.getLogger(__name__)

SYMMETRY_TOL = 1e-10
ORTHONORMAL_TOL = 1e-10
DET0_REL_TOL = 1e-10


@dataclass(frozen=True)
class SymEig:
    """Eigendecomposition of a symmetric matrix, eigenvalues sorted descending"""
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


def as_matrix(m) -> np.ndarray:
    """Coerce to a finite 2-D float array."""
    arr = np.asarray(m, dtype=float)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2:
        raise ShapeMismatch(f"expected a matrix, got an array with {arr.ndim} dimensions")
    if not np.all(np.isfinite(arr)):
        raise ValueError("matrix has non-finite entries")
    return arr


def symmetrize(m, tol: float = SYMMETRY_TOL) -> np.ndarray:
    """Return (A + Aᵀ)/2, raising NotSymmetric when A is not symmetric within tolerance."""
    arr = as_matrix(m)
    if arr.shape[0] != arr.shape[1]:
        raise NotSymmetric(f"matrix of shape {arr.shape} is not square")
    if arr.size == 0:
        return arr.copy()
    scale = max(1.0, float(np.max(np.abs(arr))))
    if np.max(np.abs(arr - arr.T)) > tol * scale:
        raise NotSymmetric(f"asymmetry {np.max(np.abs(arr - arr.T)):.3e} exceeds tolerance")
    return (arr + arr.T) / 2.0


def sym_eig(m) -> SymEig:
    """Symmetric eigendecomposition with descending eigenvalues."""
    sym = symmetrize(m)
    if sym.size == 0:
        return SymEig(np.zeros(0), np.zeros((0, 0)))
    values, vectors = linalg.eigh(sym)
    order = np.argsort(values)[::-1]
    return SymEig(values[order], vectors[:, order])


def vec(m) -> np.ndarray:
    """Stack the columns of a matrix."""
    return np.asarray(m, dtype=float).reshape(-1, order="F")


def unvec(v, rows: int, cols: int) -> np.ndarray:
    return np.asarray(v, dtype=float).reshape((rows, cols), order="F")


def vech(m) -> np.ndarray:
    """Stack the on-and-below-diagonal elements of a symmetric matrix column by column."""
    sym = symmetrize(m)
    r = sym.shape[0]
    return sym.T[np.triu_indices(r)]


def unvech(v, r: int) -> np.ndarray:
    """Symmetric r×r matrix from its vech."""
    v = np.asarray(v, dtype=float)
    if v.shape != (r * (r + 1) // 2,):
        raise ShapeMismatch(f"vech of length {v.shape} does not fit a {r}x{r} matrix")
    out = np.zeros((r, r))
    out.T[np.triu_indices(r)] = v
    return out + np.tril(out, -1).T


def _vech_positions(r: int):
    # (i, j) pairs with i >= j in column-major order
    return [(i, j) for j in range(r) for i in range(j, r)]


def expansion_matrix(r: int) -> np.ndarray:
    """E_r with vec(A) = E_r vech(A) for symmetric A."""
    if r < 1:
        raise ShapeMismatch("expansion matrix needs r >= 1")
    e = np.zeros((r * r, r * (r + 1) // 2))
    for k, (i, j) in enumerate(_vech_positions(r)):
        e[i + j * r, k] = 1.0
        e[j + i * r, k] = 1.0
    return e


def contraction_matrix(r: int) -> np.ndarray:
    """C_r with vech(A) = C_r vec(A); the Moore-Penrose inverse of E_r (off-diagonal weights 1/2)."""
    if r < 1:
        raise ShapeMismatch("contraction matrix needs r >= 1")
    c = np.zeros((r * (r + 1) // 2, r * r))
    for k, (i, j) in enumerate(_vech_positions(r)):
        if i == j:
            c[k, i + j * r] = 1.0
        else:
            c[k, i + j * r] = 0.5
            c[k, j + i * r] = 0.5
    return c


def logdet0(m, rel_tol: float = DET0_REL_TOL) -> float:
    """log of the product of the eigenvalues above rel_tol * largest eigenvalue (0 for an empty product)."""
    values = sym_eig(m).eigenvalues
    if values.size == 0 or values[0] <= 0:
        return 0.0
    kept = values[values > rel_tol * values[0]]
    return float(np.sum(np.log(kept)))


def det0(m, rel_tol: float = DET0_REL_TOL) -> float:
    """Product of the nonzero eigenvalues of a symmetric PSD matrix."""
    values = sym_eig(m).eigenvalues
    if values.size == 0 or values[0] <= 0:
        return 1.0
    return float(np.prod(values[values > rel_tol * values[0]]))


def pinv(m) -> np.ndarray:
    """Moore-Penrose inverse."""
    arr = np.asarray(m, dtype=float)
    if arr.size == 0:
        return arr.T.copy()
    return linalg.pinv(arr)


def _column_rank(basis: np.ndarray) -> int:
    if basis.shape[1] == 0:
        return 0
    return int(np.linalg.matrix_rank(basis))


def proj(basis) -> np.ndarray:
    """Orthogonal projection onto span(basis)."""
    b = as_matrix(basis)
    r, k = b.shape
    if k == 0:
        return np.zeros((r, r))
    if _column_rank(b) < k:
        raise RankDeficient(f"basis of shape {b.shape} is not of full column rank")
    q, _ = np.linalg.qr(b)
    p = q @ q.T
    return (p + p.T) / 2.0


def proj_complement(basis) -> np.ndarray:
    """Q = I − P onto the orthogonal complement of span(basis)."""
    b = as_matrix(basis)
    return np.eye(b.shape[0]) - proj(b)


def fix_signs(m: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Flip columns so that the first entry with |x| > tol is positive."""
    out = np.array(m, dtype=float, copy=True)
    for j in range(out.shape[1]):
        nonzero = np.flatnonzero(np.abs(out[:, j]) > tol)
        if nonzero.size and out[nonzero[0], j] < 0:
            out[:, j] = -out[:, j]
    return out


def is_semi_orthonormal(m, tol: float = ORTHONORMAL_TOL) -> bool:
    arr = np.asarray(m, dtype=float)
    if arr.ndim != 2:
        return False
    k = arr.shape[1]
    if k == 0:
        return True
    return bool(np.max(np.abs(arr.T @ arr - np.eye(k))) <= tol)


def qr_orthonormalize(m) -> np.ndarray:
    """Orthonormal basis of span(m), same number of columns, signs fixed."""
    arr = as_matrix(m)
    if arr.shape[1] == 0:
        return arr.copy()
    if _column_rank(arr) < arr.shape[1]:
        raise RankDeficient(f"matrix of shape {arr.shape} is not of full column rank")
    q, _ = np.linalg.qr(arr)
    return fix_signs(q)


def orth_complete(gamma) -> np.ndarray:
    """Γ0 such that (Γ, Γ0) is orthonormal."""
    g = np.asarray(gamma, dtype=float)
    if g.ndim != 2:
        raise ShapeMismatch("gamma must be a matrix")
    r, u = g.shape
    if not is_semi_orthonormal(g):
        raise NotOrthonormal("gamma columns are not orthonormal")
    if u == 0:
        return np.eye(r)
    if u == r:
        return np.zeros((r, 0))
    q, _ = np.linalg.qr(g, mode="complete")
    gamma0 = q[:, u:]
    # Remove any residual component along Γ before fixing signs
    gamma0 = gamma0 - g @ (g.T @ gamma0)
    gamma0, _ = np.linalg.qr(gamma0)
    return fix_signs(gamma0)


def q2_corr(a, b) -> float:
    """Vector correlation det(BᵀAAᵀB) of two semi-orthonormal bases, clamped to [0, 1]."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ShapeMismatch(f"bases have shapes {a.shape} and {b.shape}")
    if not (is_semi_orthonormal(a, 1e-8) and is_semi_orthonormal(b, 1e-8)):
        raise NotOrthonormal("q2_corr needs semi-orthonormal bases")
    if a.shape[1] == 0:
        return 1.0
    cross = b.T @ a
    value = float(np.linalg.det(cross @ cross.T))
    return float(np.clip(value, 0.0, 1.0))


def is_psd(m, rel_tol: float = 1e-10) -> bool:
    values = sym_eig(m).eigenvalues
    if values.size == 0:
        return True
    scale = max(1.0, abs(values[0]))
    return bool(values[-1] >= -rel_tol * scale)
