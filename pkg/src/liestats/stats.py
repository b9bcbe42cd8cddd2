"""Group means, covariances at the identity and bi-invariant dissimilarities.

Covariances are *left-centralized*: residuals ``log(mean^-1 g_i)`` live in the
tangent space at the identity, so covariances of sample sets with different
means can be pooled, averaged and compared there.  All covariances are
normalized by ``1/m`` (also in the Euclidean reference formulas), which is
the only normalization for which the pooled covariance reproduces the
classical ``1/(m + n - 2)`` pooled estimator.

Sample sets are arrays of shape ``(m, *group.shape)``.  Most functions also
accept extra leading batch dimensions ``(..., m, *group.shape)``; the
permutation machinery in :mod:`liestats.testing` relies on that.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import (
    CovarianceTooLarge,
    DegenerateWeights,
    DescriptorMismatch,
    NotConverged,
    NotPositiveDefinite,
)
from .groups import LieGroup
from .matfun import cholesky, logdet_spd, mahalanobis_from_cholesky, solve_spd

__all__ = [
    "MeanResult",
    "Covariance",
    "TwoSampleSummary",
    "group_mean",
    "log_residuals",
    "centralized_covariance",
    "pooled_covariance",
    "averaged_covariance",
    "mahalanobis_sq",
    "summarize",
    "hotelling_t2",
    "bhattacharyya",
    "hellinger",
    "euclidean_t2",
    "euclidean_bhattacharyya",
    "riemannian_t2_euclidean",
    "sample_wrapped_gaussian",
]


@dataclass
class MeanResult:
    """Outcome of the fixed-point mean iteration.

    For batched input ``iterations`` and ``residual`` are the worst case over
    the batch.
    """

    mean: np.ndarray
    iterations: int
    residual: float


@dataclass
class Covariance:
    """Covariance tensor at the identity in canonical coordinates."""

    matrix: np.ndarray
    weight: int


def _sample_axis(group: LieGroup) -> int:
    return -(group.ndim + 1)


def _fixed_point_mean(group, samples, tol, max_iter):
    """Batched mean iteration that never raises on non-convergence.

    Returns the means, per-item iteration counts and residuals, and the
    residual coordinates ``log(mean^-1 g_i)`` at the returned means.
    """
    samples = np.asarray(samples, dtype=float)
    m = samples.shape[_sample_axis(group)]
    batch = samples.shape[:samples.ndim - group.ndim - 1]
    flat = samples.reshape((-1, m) + group.shape)
    count = len(flat)
    mean = flat[:, 0].copy()
    iterations = np.full(count, max_iter, dtype=int)
    residual = np.full(count, np.inf)
    logs = np.empty((count, m, group.dim))
    active = np.arange(count)
    for it in range(max_iter + 1):
        inv = group.inverse(mean[active])
        res_logs = group.log(group.compose(np.expand_dims(inv, 1), flat[active]))
        delta = res_logs.mean(axis=1)
        r = np.linalg.norm(delta, axis=-1)
        residual[active] = r
        logs[active] = res_logs
        done = r <= tol
        iterations[active[done]] = it
        if it == max_iter:
            break
        active, delta = active[~done], delta[~done]
        if active.size == 0:
            break
        mean[active] = group.compose(mean[active], group.exp(delta))
    return (
        mean.reshape(batch + group.shape),
        iterations.reshape(batch),
        residual.reshape(batch),
        logs.reshape(batch + (m, group.dim)),
    )


def group_mean(group: LieGroup, samples, tol: float = 1e-10, max_iter: int = 100) -> MeanResult:
    """Exponential barycenter of ``samples`` under the CCS connection.

    Starting from the first sample, iterates
    ``mean <- mean * exp(mean_i log(mean^-1 g_i))`` until the norm of the
    update coordinates is at most ``tol``.

    Raises
    ------
    NotConverged
        If ``max_iter`` updates do not reach ``tol``; this usually means the
        data is not concentrated enough for a unique mean.
    OutsideLogDomain
        If some ``mean^-1 g_i`` has no principal logarithm.
    """
    samples = np.asarray(samples, dtype=float)
    if samples.ndim < group.ndim + 1 or samples.shape[_sample_axis(group)] < 1:
        raise ValueError("group_mean needs at least one sample")
    group._check(samples)
    mean, iters, res, _ = _fixed_point_mean(group, samples, tol, max_iter)
    worst = float(np.max(res))
    if not worst <= tol:
        raise NotConverged(int(np.max(iters)), worst)
    return MeanResult(mean, int(np.max(iters)), worst)


def log_residuals(group: LieGroup, samples, mean):
    """Coordinates of ``log(mean^-1 g_i)`` for every sample."""
    inv = np.expand_dims(group.inverse(mean), _sample_axis(group))
    return group.log(group.compose(inv, samples))


def _outer_mean(logs):
    return np.einsum("...li,...lj->...ij", logs, logs) / logs.shape[-2]


def centralized_covariance(group: LieGroup, samples, mean) -> Covariance:
    """Left-centralized covariance ``(1/m) sum [log(mean^-1 g_l)][...]^T``."""
    logs = log_residuals(group, samples, mean)
    return Covariance(_outer_mean(logs), logs.shape[-2])


def pooled_covariance(cov_a: Covariance, cov_b: Covariance) -> Covariance:
    """``(m Sigma_A + n Sigma_B) / (m + n - 2)``."""
    m, n = cov_a.weight, cov_b.weight
    if m + n <= 2:
        raise DegenerateWeights(f"pooled covariance needs m + n > 2 (got {m} + {n})")
    if np.shape(cov_a.matrix)[-1] != np.shape(cov_b.matrix)[-1]:
        raise DescriptorMismatch("covariances live on different groups")
    return Covariance((m * cov_a.matrix + n * cov_b.matrix) / (m + n - 2), m + n)


def averaged_covariance(cov_a: Covariance, cov_b: Covariance) -> Covariance:
    if np.shape(cov_a.matrix)[-1] != np.shape(cov_b.matrix)[-1]:
        raise DescriptorMismatch("covariances live on different groups")
    return Covariance(0.5 * (cov_a.matrix + cov_b.matrix), cov_a.weight + cov_b.weight)


def mahalanobis_sq(group: LieGroup, f, mean, cov: Covariance) -> float:
    """Bi-invariant squared Mahalanobis distance of ``f`` to ``(mean, cov)``."""
    v = group.connection_log(mean, f)
    x = solve_spd(cov.matrix, v)
    return np.einsum("...i,...i->...", v, x)[()]


@dataclass
class TwoSampleSummary:
    """Means, centralized covariances and the mean difference of two samples.

    ``diff`` holds the coordinates of ``log(mean_a^-1 mean_b)``.  Fields carry
    any batch dimensions of the input; ``converged`` flags batch items whose
    two means both reached the tolerance.
    """

    m: int
    n: int
    mean_a: np.ndarray
    mean_b: np.ndarray
    cov_a: np.ndarray
    cov_b: np.ndarray
    diff: np.ndarray
    converged: np.ndarray

    def pooled(self):
        return (self.m * self.cov_a + self.n * self.cov_b) / (self.m + self.n - 2)

    def averaged(self):
        return 0.5 * (self.cov_a + self.cov_b)

    def t2(self):
        """Hotelling T^2 per batch item; NaN where the pooled covariance is singular."""
        L, ok = cholesky(self.pooled())
        out = self.m * self.n / (self.m + self.n) * mahalanobis_from_cholesky(L, self.diff)
        return np.where(ok & self.converged, out, np.nan)

    def bhattacharyya(self):
        """Bhattacharyya distance per batch item; NaN where a covariance is singular."""
        La, oka = cholesky(self.cov_a)
        Lb, okb = cholesky(self.cov_b)
        Lbar, okbar = cholesky(self.averaged())
        ok = oka & okb & okbar & self.converged
        maha = mahalanobis_from_cholesky(Lbar, self.diff)
        logratio = logdet_spd(Lbar) - 0.5 * (logdet_spd(La) + logdet_spd(Lb))
        return np.where(ok, maha / 8.0 + 0.5 * logratio, np.nan)


def _mean_difference(group, mean_a, mean_b):
    """``log(mean_a^-1 mean_b)``, bit-for-bit antisymmetric in its arguments.

    The log is taken for the lexicographically ordered pair and negated when
    the order was swapped, so exchanging the samples flips the sign exactly.
    """
    k = len(group.shape)
    fa = mean_a.reshape(mean_a.shape[:mean_a.ndim - k] + (-1,))
    fb = mean_b.reshape(mean_b.shape[:mean_b.ndim - k] + (-1,))
    first = np.argmax(fa != fb, axis=-1)[..., None]
    swap = np.take_along_axis(fa, first, -1)[..., 0] > np.take_along_axis(fb, first, -1)[..., 0]
    sel = swap.reshape(swap.shape + (1,) * k)
    lo, hi = np.where(sel, mean_b, mean_a), np.where(sel, mean_a, mean_b)
    d = group.log(group.compose(group.inverse(lo), hi))
    return np.where(swap[..., None], -d, d)


def summarize(group: LieGroup, A, B, tol: float = 1e-10, max_iter: int = 100,
              basis=None, strict: bool = True) -> TwoSampleSummary:
    """Compute everything the two-sample statistics need.

    Parameters
    ----------
    basis : (d, d) array_like, optional
        Columns are an alternative basis of the tangent space at the
        identity, expressed in canonical coordinates.  Coordinates and
        covariances are re-expressed in it; the statistics do not change.
    strict : bool
        Raise :class:`NotConverged` instead of flagging unconverged items.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    group._check(A, B)
    ax = _sample_axis(group)
    m, n = A.shape[ax], B.shape[ax]
    mean_a, it_a, res_a, logs_a = _fixed_point_mean(group, A, tol, max_iter)
    mean_b, it_b, res_b, logs_b = _fixed_point_mean(group, B, tol, max_iter)
    converged = (res_a <= tol) & (res_b <= tol)
    if strict and not np.all(converged):
        worst = float(np.max(np.maximum(res_a, res_b)))
        raise NotConverged(int(np.max(np.maximum(it_a, it_b))), worst)
    diff = _mean_difference(group, mean_a, mean_b)
    if basis is not None:
        P_inv = np.linalg.inv(np.asarray(basis, dtype=float))
        logs_a = logs_a @ P_inv.T
        logs_b = logs_b @ P_inv.T
        diff = diff @ P_inv.T
    return TwoSampleSummary(m, n, mean_a, mean_b, _outer_mean(logs_a), _outer_mean(logs_b),
                            diff, np.asarray(converged))


def _strict(values, what):
    values = np.asarray(values)
    if np.any(np.isnan(values)):
        raise NotPositiveDefinite(f"{what}: covariance is not positive definite "
                                  "(too few samples for the dimension?)")
    return values[()]


def hotelling_t2(group: LieGroup, A, B, tol: float = 1e-10, max_iter: int = 100, basis=None):
    """Bi-invariant Hotelling T^2: ``mn/(m+n) * mu^2_(e, pooled)(mean_a^-1 mean_b)``."""
    s = summarize(group, A, B, tol, max_iter, basis)
    if s.m + s.n <= 2:
        raise DegenerateWeights("hotelling_t2 needs m + n > 2")
    return _strict(s.t2(), "hotelling_t2")


def bhattacharyya(group: LieGroup, A, B, tol: float = 1e-10, max_iter: int = 100, basis=None):
    """Bi-invariant Bhattacharyya distance with the averaged covariance.

    ``D_B = mu^2_(e, avg)(mean_a^-1 mean_b) / 8
    + log(det avg / sqrt(det Sigma_A det Sigma_B)) / 2``; the log-determinants
    come from Cholesky factors.
    """
    s = summarize(group, A, B, tol, max_iter, basis)
    return _strict(s.bhattacharyya(), "bhattacharyya")


def hellinger_from_bhattacharyya(db):
    return np.sqrt(-np.expm1(-np.asarray(db, dtype=float)))


def hellinger(group: LieGroup, A, B, tol: float = 1e-10, max_iter: int = 100, basis=None):
    """``sqrt(1 - exp(-D_B))``, in [0, 1)."""
    return hellinger_from_bhattacharyya(bhattacharyya(group, A, B, tol, max_iter, basis))[()]


# Euclidean reference formulas -------------------------------------------------

def _check_pd(S, what):
    try:
        np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        raise NotPositiveDefinite(f"{what} is not positive definite") from None


def _vectors(X):
    X = np.asarray(X, dtype=float)
    return X[:, None] if X.ndim == 1 else X


def euclidean_t2(A, B) -> float:
    """Classical two-sample Hotelling T^2 with the unbiased pooled covariance."""
    P, Q = _vectors(A), _vectors(B)
    m, n = len(P), len(Q)
    p_bar, q_bar = P.mean(axis=0), Q.mean(axis=0)
    dp, dq = P - p_bar, Q - q_bar
    S = (dp.T @ dp + dq.T @ dq) / (m + n - 2)
    _check_pd(S, "pooled covariance")
    d = p_bar - q_bar
    return float(m * n / (m + n) * d @ np.linalg.solve(S, d))


def euclidean_bhattacharyya(A, B) -> float:
    """Multivariate Bhattacharyya distance, sample covariances normalized by 1/m."""
    P, Q = _vectors(A), _vectors(B)
    p_bar, q_bar = P.mean(axis=0), Q.mean(axis=0)
    Sp = np.cov(P.T, bias=True).reshape(P.shape[1], P.shape[1])
    Sq = np.cov(Q.T, bias=True).reshape(Q.shape[1], Q.shape[1])
    Sbar = 0.5 * (Sp + Sq)
    for S, what in ((Sp, "S_A"), (Sq, "S_B"), (Sbar, "averaged covariance")):
        _check_pd(S, what)
    d = p_bar - q_bar
    _, ld_bar = np.linalg.slogdet(Sbar)
    _, ld_p = np.linalg.slogdet(Sp)
    _, ld_q = np.linalg.slogdet(Sq)
    return float(d @ np.linalg.solve(Sbar, d) / 8.0 + 0.5 * (ld_bar - 0.5 * (ld_p + ld_q)))


def riemannian_t2_euclidean(A, B) -> float:
    """Averaged two-point T^2 of Muralidharan & Fletcher, evaluated in R^d.

    ``0.5 * (d^T W_A^-1 d + d^T W_B^-1 d)`` with ``d`` the mean difference and
    ``W`` the ``1/m``-normalized sample covariances.  It does not agree with
    :func:`euclidean_t2`.
    """
    P, Q = _vectors(A), _vectors(B)
    d = Q.mean(axis=0) - P.mean(axis=0)
    Wp = np.cov(P.T, bias=True).reshape(P.shape[1], P.shape[1])
    Wq = np.cov(Q.T, bias=True).reshape(Q.shape[1], Q.shape[1])
    _check_pd(Wp, "W_A")
    _check_pd(Wq, "W_B")
    return float(0.5 * (d @ np.linalg.solve(Wp, d) + d @ np.linalg.solve(Wq, d)))


# synthetic data ----------------------------------------------------------------

class WrappedGaussianSample(NamedTuple):
    samples: np.ndarray
    rejections: int


def sample_wrapped_gaussian(group: LieGroup, mean, cov, n: int, seed: int) -> WrappedGaussianSample:
    """Push ``N(0, cov)`` tangent draws through ``v -> mean * exp(v)``.

    Draws that fall outside the principal log domain are redrawn.

    Raises
    ------
    CovarianceTooLarge
        If more than half of all draws had to be rejected.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    cov = np.asarray(cov.matrix if isinstance(cov, Covariance) else cov, dtype=float)
    if cov.ndim == 0:
        cov = cov * np.eye(group.dim)
    if cov.shape != (group.dim, group.dim):
        raise DescriptorMismatch(f"covariance must be {group.dim}x{group.dim}, got {cov.shape}")
    cov = 0.5 * (cov + cov.T)
    w, V = np.linalg.eigh(cov)
    if w.min(initial=0.0) < -1e-10 * max(w.max(initial=0.0), 1e-300):
        raise ValueError("covariance is not positive semidefinite")
    factor = V * np.sqrt(np.clip(w, 0.0, None))
    rng = np.random.default_rng(seed)
    accepted, drawn, rejected = [], 0, 0
    need = n
    while need > 0:
        z = rng.standard_normal((need, group.dim))
        v = z @ factor.T
        keep = group.in_log_domain(v)
        accepted.append(v[keep])
        drawn += need
        rejected += int(np.count_nonzero(~keep))
        if rejected > 0.5 * drawn:
            raise CovarianceTooLarge(
                f"{rejected} of {drawn} draws fell outside the log domain; "
                "samples would not be sufficiently localized"
            )
        need = n - sum(len(a) for a in accepted)
    v = np.concatenate(accepted)[:n]
    samples = group.connection_exp(np.asarray(mean, dtype=float), v)
    return WrappedGaussianSample(samples, rejected)
