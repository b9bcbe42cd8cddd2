"""Dense real matrix functions: exponential, principal logarithm, SPD solves.

Every function accepts a single ``(n, n)`` matrix or a stack ``(..., n, n)``;
stacked inputs are processed item by item in the numerical sense (degrees,
scalings and square-root counts are chosen per matrix), so an item's result
does not depend on what else is in the batch.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import MatrixOverflow, NotPositiveDefinite, SpectrumOnCut

__all__ = [
    "NumericPolicy",
    "DEFAULT_POLICY",
    "mat_exp",
    "mat_log",
    "mat_sqrt",
    "solve_spd",
    "det",
    "cholesky",
    "logdet_spd",
    "mahalanobis_from_cholesky",
]


@dataclass(frozen=True)
class NumericPolicy:
    """Tolerances used across the kernels.

    Pass a modified copy (``dataclasses.replace(DEFAULT_POLICY, ...)``) to any
    function taking ``policy=`` to override them.
    """

    branch_cut_tol: float = 1e-12
    sqrt_tol: float = 1e-14
    sqrt_max_iter: int = 60
    symmetry_tol: float = 1e-8
    # rotation angles at or beyond pi - margin are outside the log domain
    angle_margin: float = 1e-9
    small_angle: float = 1e-4
    orthogonality_tol: float = 1e-9
    near_cut_angle: float = 0.05


DEFAULT_POLICY = NumericPolicy()

# Higham (2005) backward-error bounds for the [m/m] Pade approximant of exp.
_EXP_THETA = {
    3: 1.495585217958292e-2,
    5: 2.539398330063230e-1,
    7: 9.504178996162932e-1,
    9: 2.097847961257068e0,
    13: 5.371920351148152e0,
}

_EXP_COEFFS = {
    3: [120.0, 60.0, 12.0, 1.0],
    5: [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0],
    7: [17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0],
    9: [17643225600.0, 8821612800.0, 2075673600.0, 302702400.0, 30270240.0,
        2162160.0, 110880.0, 3960.0, 90.0, 1.0],
    13: [64764752532480000.0, 32382376266240000.0, 7771770303897600.0,
         1187353796428800.0, 129060195264000.0, 10559470521600.0,
         670442572800.0, 33522128640.0, 1323241920.0, 40840800.0, 960960.0,
         16380.0, 182.0, 1.0],
}

# Al-Mohy & Higham (2012) bounds for the [m/m] Pade approximant of log(I + X).
_LOG_THETA = {
    1: 1.59e-5,
    2: 2.31e-3,
    3: 1.94e-2,
    4: 6.21e-2,
    5: 1.28e-1,
    6: 2.06e-1,
    7: 2.88e-1,
}


def _as_stack(A):
    A = np.asarray(A, dtype=float)
    if A.ndim < 2 or A.shape[-1] != A.shape[-2]:
        raise ValueError(f"expected square matrices, got shape {A.shape}")
    return A.reshape((-1,) + A.shape[-2:]), A.shape


def _norm1(A):
    return np.abs(A).sum(axis=-2).max(axis=-1)


def _pade_exp(A, m):
    n = A.shape[-1]
    ident = np.broadcast_to(np.eye(n), A.shape)
    b = _EXP_COEFFS[m]
    A2 = A @ A
    if m == 13:
        A4 = A2 @ A2
        A6 = A2 @ A4
        U = A @ (A6 @ (b[13] * A6 + b[11] * A4 + b[9] * A2)
                 + b[7] * A6 + b[5] * A4 + b[3] * A2 + b[1] * ident)
        V = (A6 @ (b[12] * A6 + b[10] * A4 + b[8] * A2)
             + b[6] * A6 + b[4] * A4 + b[2] * A2 + b[0] * ident)
    else:
        powers = [ident, A2]
        for _ in range(2, (m + 1) // 2):
            powers.append(powers[-1] @ A2)
        U = sum(b[j] * powers[j // 2] for j in range(m, 0, -2))
        U = A @ U
        V = sum(b[j] * powers[j // 2] for j in range(m - 1, -1, -2))
    return np.linalg.solve(V - U, V + U)


def mat_exp(A, policy: NumericPolicy | None = None):
    """Matrix exponential by scaling and squaring with Pade approximants.

    Parameters
    ----------
    A : (..., n, n) array_like
        Finite real matrices.

    Returns
    -------
    (..., n, n) ndarray
        ``exp(A)``.  The zero matrix maps exactly to the identity.
    """
    stack, shape = _as_stack(A)
    if not np.all(np.isfinite(stack)):
        raise ValueError("mat_exp: input contains non-finite entries")
    out = np.empty_like(stack)
    norms = _norm1(stack)
    degree = np.full(len(stack), 13)
    squarings = np.zeros(len(stack), dtype=int)
    for m in (9, 7, 5, 3):
        degree[norms <= _EXP_THETA[m]] = m
    big = norms > _EXP_THETA[13]
    squarings[big] = np.ceil(np.log2(norms[big] / _EXP_THETA[13])).astype(int)
    for m in np.unique(degree):
        idx = np.flatnonzero(degree == m)
        scaled = stack[idx] / (2.0 ** squarings[idx])[:, None, None]
        out[idx] = _pade_exp(scaled, int(m))
    with np.errstate(over="ignore", invalid="ignore"):
        for j in range(int(squarings.max(initial=0))):
            idx = np.flatnonzero(squarings > j)
            out[idx] = out[idx] @ out[idx]
    if not np.all(np.isfinite(out)):
        raise MatrixOverflow("mat_exp: result overflowed")
    return out.reshape(shape)


def _check_spectrum(stack, policy):
    """Raise if any item has an eigenvalue on the cut; return near-cut items.

    Near-cut items (an eigenvalue within ``policy.near_cut_angle`` of the
    negative real axis, in argument) are where the square-root iteration loses
    accuracy; they are handed to a Schur-based routine instead.
    """
    # ||A - I||_F < 1 bounds every eigenvalue inside the disc |z - 1| < 1,
    # which cannot touch the negative real axis; skip those items.
    far = np.linalg.norm(stack - np.eye(stack.shape[-1]), axis=(-2, -1)) >= 1.0
    idx = np.flatnonzero(far)
    if idx.size == 0:
        return idx
    eig = np.linalg.eigvals(stack[idx])
    scale = np.maximum(1.0, np.abs(eig))
    on_cut = (eig.real <= 0.0) & (np.abs(eig.imag) <= policy.branch_cut_tol * scale)
    bad = np.flatnonzero(on_cut.any(axis=-1))
    if bad.size:
        raise SpectrumOnCut(
            f"principal logarithm undefined: eigenvalue on (-inf, 0] "
            f"for matrix index {int(idx[bad[0]])}"
        )
    near = np.abs(np.angle(eig)) > np.pi - policy.near_cut_angle
    return idx[near.any(axis=-1)]


def _schur_fallback(fn, stack):
    out = np.empty_like(stack)
    for i, a in enumerate(stack):
        out[i] = np.real(fn(a))
    return out


def _db_sqrt(stack, policy):
    # Denman-Beavers product iteration with determinant scaling.
    n = stack.shape[-1]
    ident = np.eye(n)
    M = stack.copy()
    Y = stack.copy()
    active = np.arange(len(stack))
    for _ in range(policy.sqrt_max_iter):
        Ma = M[active]
        try:
            Minv = np.linalg.inv(Ma)
        except np.linalg.LinAlgError:
            Minv = np.full_like(Ma, np.nan)
        if not np.all(np.isfinite(Minv)):
            raise SpectrumOnCut("square root iteration broke down: "
                                "spectrum numerically on (-inf, 0]")
        mu = np.abs(np.linalg.det(Ma)) ** (-1.0 / (2 * n))
        mu2 = (mu * mu)[:, None, None]
        Y[active] = 0.5 * mu[:, None, None] * Y[active] @ (ident + Minv / mu2)
        M[active] = 0.5 * (ident + 0.5 * (mu2 * Ma + Minv / mu2))
        err = _norm1(M[active] - ident)
        active = active[err > policy.sqrt_tol]
        if active.size == 0:
            return Y
    raise SpectrumOnCut("square root iteration did not converge: "
                        "spectrum numerically on (-inf, 0]")


def mat_sqrt(A, policy: NumericPolicy | None = None):
    """Principal square root of matrices with no eigenvalues on (-inf, 0]."""
    policy = policy or DEFAULT_POLICY
    stack, shape = _as_stack(A)
    near = _check_spectrum(stack, policy)
    out = np.empty_like(stack)
    easy = np.setdiff1d(np.arange(len(stack)), near)
    out[easy] = _db_sqrt(stack[easy], policy)
    out[near] = _schur_fallback(scipy.linalg.sqrtm, stack[near])
    return out.reshape(shape)


def _pade_log1p(X, m):
    nodes, weights = np.polynomial.legendre.leggauss(m)
    nodes = 0.5 * (nodes + 1.0)
    weights = 0.5 * weights
    ident = np.eye(X.shape[-1])
    systems = ident + nodes[:, None, None, None] * X
    terms = np.linalg.solve(systems, np.broadcast_to(X, systems.shape))
    return np.tensordot(weights, terms, axes=1)


def mat_log(A, policy: NumericPolicy | None = None):
    """Principal matrix logarithm by inverse scaling and squaring.

    Square roots are taken until ``||A^(1/2^k) - I||_1`` is small enough for a
    Pade approximant of ``log(I + X)``; the result is rescaled by ``2^k``.
    All arithmetic is real.  Matrices with an eigenvalue close to the negative
    real axis, where the square-root iteration is inaccurate, go through
    ``scipy.linalg.logm`` (complex Schur form) instead.

    Raises
    ------
    SpectrumOnCut
        If any matrix has an eigenvalue within ``policy.branch_cut_tol`` of
        the closed negative real axis.
    """
    policy = policy or DEFAULT_POLICY
    stack, shape = _as_stack(A)
    if not np.all(np.isfinite(stack)):
        raise ValueError("mat_log: input contains non-finite entries")
    near = _check_spectrum(stack, policy)
    easy = np.setdiff1d(np.arange(len(stack)), near)
    out = np.empty_like(stack)
    out[near] = _schur_fallback(scipy.linalg.logm, stack[near])
    out[easy] = _log_iss(stack[easy], policy)
    return out.reshape(shape)


def _log_iss(stack, policy):
    n = stack.shape[-1]
    ident = np.eye(n)
    X = stack - ident
    roots = np.zeros(len(stack), dtype=int)
    todo = np.flatnonzero(_norm1(X) > _LOG_THETA[7])
    R = stack.copy()
    while todo.size:
        R[todo] = _db_sqrt(R[todo], policy)
        roots[todo] += 1
        X[todo] = R[todo] - ident
        todo = todo[_norm1(X[todo]) > _LOG_THETA[7]]
    norms = _norm1(X)
    degree = np.full(len(stack), 7)
    for m in (6, 5, 4, 3, 2, 1):
        degree[norms <= _LOG_THETA[m]] = m
    out = np.empty_like(stack)
    for m in np.unique(degree):
        idx = np.flatnonzero(degree == m)
        out[idx] = _pade_log1p(X[idx], int(m))
    out *= (2.0 ** roots)[:, None, None]
    return out


def det(A):
    """Determinant via LU factorization (exact sign)."""
    return np.linalg.det(np.asarray(A, dtype=float))


def _symmetrize(S, policy):
    S = np.asarray(S, dtype=float)
    defect = np.abs(S - np.swapaxes(S, -1, -2)).max(initial=0.0)
    scale = np.abs(S).max(initial=0.0)
    if defect > policy.symmetry_tol * max(scale, np.finfo(float).tiny):
        raise ValueError(f"matrix is not symmetric (defect {defect:.3e})")
    return 0.5 * (S + np.swapaxes(S, -1, -2))


def cholesky(S, policy: NumericPolicy | None = None):
    """Batched lower Cholesky factors with a per-item success mask.

    A factorization counts as failed when LAPACK rejects it or when a pivot
    is at the rounding level of the input (``L_jj**2 <= d * eps * max diag``),
    which is how exactly singular covariances show up in floating point.

    Returns
    -------
    L : (..., d, d) ndarray
        Factors; failed items hold the identity so downstream batched solves
        stay finite.  Always consult ``ok``.
    ok : (...) bool ndarray
    """
    policy = policy or DEFAULT_POLICY
    S = _symmetrize(S, policy)
    batch = S.shape[:-2]
    d = S.shape[-1]
    flat = S.reshape((-1, d, d))
    ident = np.eye(d)
    try:
        L = np.linalg.cholesky(flat)
        ok = np.ones(len(flat), dtype=bool)
    except np.linalg.LinAlgError:
        L = np.broadcast_to(ident, flat.shape).copy()
        ok = np.zeros(len(flat), dtype=bool)
        for i, item in enumerate(flat):
            try:
                L[i] = np.linalg.cholesky(item)
                ok[i] = True
            except np.linalg.LinAlgError:
                pass
    pivots = np.diagonal(L, axis1=-2, axis2=-1) ** 2
    floor = d * np.finfo(float).eps * np.diagonal(flat, axis1=-2, axis2=-1).max(axis=-1)
    ok &= np.all(pivots > floor[:, None], axis=-1) & np.all(np.isfinite(L), axis=(-2, -1))
    L[~ok] = ident
    return L.reshape(S.shape), ok.reshape(batch)


def _forward(L, v):
    return np.linalg.solve(L, v[..., None])[..., 0]


def solve_spd(S, b, policy: NumericPolicy | None = None):
    """Solve ``S x = b`` for symmetric positive definite ``S`` via Cholesky.

    ``b`` may be a vector ``(d,)`` or carry the same batch dims as ``S``.

    Raises
    ------
    NotPositiveDefinite
        If the Cholesky factorization fails.
    """
    L, ok = cholesky(S, policy)
    if not np.all(ok):
        raise NotPositiveDefinite("matrix is not positive definite")
    b = np.broadcast_to(np.asarray(b, dtype=float), L.shape[:-1])
    y = _forward(L, b)
    return _forward(np.swapaxes(L, -1, -2), y)


def mahalanobis_from_cholesky(L, v):
    """``v^T S^{-1} v`` given the lower Cholesky factor ``L`` of ``S``."""
    y = _forward(L, np.broadcast_to(v, L.shape[:-1]))
    return np.einsum("...i,...i->...", y, y)


def logdet_spd(L):
    """``log det S`` from its Cholesky factor, summed from the diagonal."""
    return 2.0 * np.log(np.diagonal(L, axis1=-2, axis2=-1)).sum(axis=-1)
