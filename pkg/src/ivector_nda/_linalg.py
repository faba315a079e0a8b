import numpy as np
from scipy import linalg as sla


def cho_factor_jitter(A):
    """Cholesky factor of a symmetric PD matrix; retries once with 1e-10*trace/n jitter."""
    try:
        return sla.cho_factor(A, lower=True, check_finite=False)
    except sla.LinAlgError:
        n = A.shape[0]
        jitter = 1e-10 * np.trace(A) / n
        return sla.cho_factor(A + jitter * np.eye(n), lower=True, check_finite=False)


def spd_solve(A, B):
    return sla.cho_solve(cho_factor_jitter(A), B, check_finite=False)


def spd_inv_logdet(A):
    """Inverse and log-determinant of a symmetric PD matrix."""
    c = cho_factor_jitter(A)
    inv = sla.cho_solve(c, np.eye(A.shape[0]), check_finite=False)
    logdet = 2.0 * np.sum(np.log(np.diag(c[0])))
    return 0.5 * (inv + inv.T), logdet


def sym(A):
    return 0.5 * (A + A.T)
