"""Independent mechanism analysis (IMA) contrast.

The local contrast of a square Jacobian ``J`` is

    c(J) = sum_k log ||J[:, k]|| - log |det J|

which is nonnegative by Hadamard's inequality and vanishes exactly when the
columns of ``J`` are orthogonal. The global contrast is its expectation under
the source distribution.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import ConfigurationError, EstimationError, SingularityError
from .mixing import SourceDistribution, sample_sources

DEFAULT_LAMBDA = 1.0
MIN_ABS_DET = 1e-300
MAX_REJECT_FRACTION = 0.01


@dataclass(frozen=True)
class ImaReport:
    cima_local: float
    cima_global: float
    cima_global_stderr: float
    lam: float = DEFAULT_LAMBDA
    n_mc: int = 0


def cima_local(J) -> float:
    """Local IMA contrast of one square matrix; log|det| via LU with partial
    pivoting."""
    J = np.asarray(J, dtype=float)
    if J.ndim != 2 or J.shape[0] != J.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {J.shape}")
    with warnings.catch_warnings():
        # an exactly singular factor is reported below as SingularityError
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu, _ = scipy.linalg.lu_factor(J, check_finite=False)
    diag = np.abs(np.diag(lu))
    if np.any(diag == 0.0):
        raise SingularityError("Jacobian is singular")
    logdet = float(np.sum(np.log(diag)))
    if logdet < np.log(MIN_ABS_DET):
        raise SingularityError("|det J| below 1e-300")
    return float(np.sum(np.log(np.linalg.norm(J, axis=0))) - logdet)


def cima_local_batch(J) -> np.ndarray:
    """Row-wise contrast for a stack ``(B, d, d)``; singular entries give NaN."""
    J = np.asarray(J, dtype=float)
    sign, logdet = np.linalg.slogdet(J)
    with np.errstate(divide="ignore", invalid="ignore"):
        norms = np.sum(np.log(np.linalg.norm(J, axis=1)), axis=1)
        out = norms - logdet
    bad = (sign == 0) | (logdet < np.log(MIN_ABS_DET)) | ~np.isfinite(out)
    return np.where(bad, np.nan, out)


def kld_diagonality(M) -> float:
    """Left KLD-measure of diagonality of a symmetric positive definite
    matrix: 0.5 * (log det diag(M) - log det M)."""
    M = np.asarray(M, dtype=float)
    try:
        L = np.linalg.cholesky(M)
    except np.linalg.LinAlgError as exc:
        raise SingularityError("matrix is not positive definite") from exc
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    return float(0.5 * (np.sum(np.log(np.diag(M))) - logdet))


def cima_global_mc(spec, dist: SourceDistribution, n_mc: int, seed=0, chunk: int = 20000):
    """Monte-Carlo mean and standard error of the local contrast over sources.

    Samples with a singular Jacobian are rejected; more than 1% rejections is
    an error.
    """
    if n_mc < 100:
        raise ConfigurationError("n_mc must be at least 100")
    z = sample_sources(dist, n_mc, seed)
    vals = np.concatenate([cima_local_batch(spec.jacobian(z[i:i + chunk]))
                           for i in range(0, n_mc, chunk)])
    ok = np.isfinite(vals)
    n_bad = int(n_mc - ok.sum())
    if n_bad > MAX_REJECT_FRACTION * n_mc:
        raise EstimationError(f"{n_bad} of {n_mc} samples had singular Jacobians")
    vals = vals[ok]
    mean = float(np.mean(vals))
    stderr = float(np.std(vals, ddof=1) / np.sqrt(len(vals)))
    return mean, stderr


def ima_report(spec, dist: SourceDistribution, z_point, n_mc: int, seed=0,
               lam: float = DEFAULT_LAMBDA) -> ImaReport:
    jac = spec.jacobian(np.atleast_2d(z_point))[0]
    mean, se = cima_global_mc(spec, dist, n_mc, seed)
    return ImaReport(cima_local(jac), mean, se, lam, n_mc)


def ima_regularized_loglik(log_px, cima_value, lam: float = DEFAULT_LAMBDA):
    """log p(x) - lam * c_IMA."""
    if lam < 0:
        raise ConfigurationError("lambda must be nonnegative")
    return log_px - lam * cima_value
