"""Small dense linear algebra used by the compressors, models and diagnostics.

Tensors are plain float64 numpy arrays. A 1-D array is treated as a column
vector wherever a matrix is expected.
"""
from __future__ import annotations

from typing import Callable, NamedTuple

import numpy as np

from .errors import NumericError, ShapeError

_DEFICIENT_ABS = 1e-12
_DEFICIENT_REL = 1e-10


def as_tensor(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    check_finite(arr)
    return arr


def check_finite(arr: np.ndarray, name: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite entries in {name}")
    return arr


def _as_matrix(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[:, None]
    if x.ndim != 2:
        raise ShapeError(f"expected a vector or matrix, got shape {x.shape}")
    return x


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with explicit shape checking.

    Vectors are promoted to single-column matrices, so the result is always 2-D.
    """
    a, b = _as_matrix(a), _as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return check_finite(a @ b, "matmul result")


def norm2(v: np.ndarray) -> float:
    """Euclidean norm over all entries (Frobenius norm for matrices)."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        return 0.0
    # scale first so huge/tiny entries do not overflow or underflow the squares
    scale = float(np.max(np.abs(v)))
    if scale == 0.0:
        return 0.0
    return scale * float(np.sqrt(np.sum((v / scale) ** 2)))


def random_unit(dim: int, rng: np.random.Generator) -> np.ndarray:
    v = rng.standard_normal(dim)
    return v / norm2(v)


def orthonormalize(m: np.ndarray, seed: int = 0) -> tuple[np.ndarray, list[int]]:
    """Two-pass modified Gram-Schmidt on the columns of ``m``.

    Returns ``(q, replaced)`` where ``q`` has orthonormal columns spanning the
    same space as ``m`` and ``replaced`` lists the columns that were numerically
    dependent on earlier ones. Those columns are filled with a deterministic
    random direction (seeded by ``seed``) orthogonalised against the rest.
    """
    m = _as_matrix(m)
    rows, cols = m.shape
    if cols > rows:
        raise ShapeError(f"cannot orthonormalize {cols} columns in dimension {rows}")
    q = m.copy()
    replaced: list[int] = []
    rng = None
    for j in range(cols):
        v = q[:, j].copy()
        before = norm2(v)
        v = _project_out(v, q[:, :j])
        after = norm2(v)
        if after < _DEFICIENT_ABS or after <= _DEFICIENT_REL * before:
            replaced.append(j)
            if rng is None:
                rng = np.random.default_rng([seed, 0x6A5])
            # a random direction is dependent on q[:, :j] with probability zero
            while True:
                v = _project_out(random_unit(rows, rng), q[:, :j])
                after = norm2(v)
                if after > 1e-6:
                    break
        q[:, j] = v / after
    return q, replaced


def _project_out(v: np.ndarray, basis: np.ndarray) -> np.ndarray:
    for _ in range(2):
        for i in range(basis.shape[1]):
            v = v - (basis[:, i] @ v) * basis[:, i]
    return v


class EigResult(NamedTuple):
    eigenvalue: float
    eigenvector: np.ndarray
    converged: bool
    iterations: int


def power_iteration_top_eig(
    matvec: Callable[[np.ndarray], np.ndarray],
    dim: int,
    iters: int = 1000,
    tol: float = 1e-10,
    seed: int = 0,
) -> EigResult:
    """Dominant eigenpair of a symmetric operator by power iteration.

    Convergence is declared when the Rayleigh quotient changes by at most
    ``tol`` (relative to ``max(1, |lambda|)``) between iterations. If ``iters``
    runs out first, the last estimate is returned with ``converged=False``.
    Subsequent eigenvalues are obtained by the caller deflating the operator.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    rng = np.random.default_rng([seed, 0x9E1])
    v = random_unit(dim, rng)
    lam = float("nan")
    for it in range(1, iters + 1):
        w = np.asarray(matvec(v), dtype=np.float64).reshape(dim)
        check_finite(w, "matvec output")
        new_lam = float(v @ w)
        nw = norm2(w)
        if nw == 0.0:
            # v lies in the null space; zero is an eigenvalue and nothing dominates it
            return EigResult(0.0, v, True, it)
        v = w / nw
        if abs(new_lam - lam) <= tol * max(1.0, abs(new_lam)):
            return EigResult(new_lam, v, True, it)
        lam = new_lam
    return EigResult(lam, v, False, iters)


def jacobi_eigh(a: np.ndarray, tol: float = 1e-14, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Slow, but independent of LAPACK and of power iteration; used as a reference.
    Returns eigenvalues in descending order and matching eigenvectors as columns.
    """
    a = np.array(_as_matrix(a), dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ShapeError(f"expected a square matrix, got {a.shape}")
    v = np.eye(n)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.tril(a, -1) ** 2))
        if off <= tol * max(1.0, norm2(a)):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if a[p, q] == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * a[p, q])
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0)) if theta != 0 else 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rot = np.eye(n)
                rot[p, p] = rot[q, q] = c
                rot[p, q] = s
                rot[q, p] = -s
                a = rot.T @ a @ rot
                v = v @ rot
    vals = np.diag(a).copy()
    order = np.argsort(-vals, kind="stable")
    return vals[order], v[:, order]
