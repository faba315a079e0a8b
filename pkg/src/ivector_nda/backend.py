"""i-vector post-processing and two-covariance Gaussian PLDA.

PLDA model: x_ij = mu + y_i + e_ij with y_i ~ N(0, B) (speaker) and
e_ij ~ N(0, Wc) (within-speaker, full covariance).
"""

from dataclasses import dataclass
import logging

import numpy as np
from scipy import linalg as sla

from . import io
from ._linalg import spd_inv_logdet, sym

logger = logging.getLogger(__name__)

WHITEN_RIDGE = 1e-10
MAX_WHITEN_COND = 1e12


@dataclass(frozen=True)
class Whitener:
    mean: np.ndarray
    W: np.ndarray

    def __call__(self, X):
        return (np.asarray(X, dtype=np.float64) - self.mean) @ self.W.T

    def save(self, path):
        io.save_model(path, "whitener", {"mean": self.mean, "W": self.W})

    @classmethod
    def load(cls, path):
        obj = io.load_model(path, "whitener")
        try:
            return cls(np.array(obj["mean"], dtype=np.float64), np.atleast_2d(np.array(obj["W"])))
        except KeyError as e:
            raise io.FormatError(f"{path}: missing field {e}") from e


def fit_whitener(X):
    """Centering plus inverse-Cholesky whitening estimated on X (rows)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    N, n = X.shape
    if N < n + 1:
        raise ValueError(f"whitening {n}-dim vectors needs at least {n + 1} samples, got {N}")
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = sym(Xc.T @ Xc / N)
    evals = np.linalg.eigvalsh(cov)
    if evals[-1] <= 0 or evals[0] < evals[-1] / MAX_WHITEN_COND:
        raise ValueError("covariance is singular; cannot whiten")
    cov += WHITEN_RIDGE * np.trace(cov) / n * np.eye(n)
    L = np.linalg.cholesky(cov)
    W = sla.solve_triangular(L, np.eye(n), lower=True)
    return Whitener(mean, W)


def length_normalize(v):
    """Scales a vector (or each row of a matrix) to unit Euclidean norm."""
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise ValueError("cannot length-normalize a zero vector")
    return v / norm


@dataclass(frozen=True)
class PldaModel:
    mu: np.ndarray
    B: np.ndarray
    Wc: np.ndarray

    @property
    def dim(self):
        return self.mu.shape[0]

    def save(self, path):
        io.save_model(path, "plda", {"mu": self.mu, "B": self.B, "Wc": self.Wc})

    @classmethod
    def load(cls, path):
        obj = io.load_model(path, "plda")
        try:
            model = cls(
                np.array(obj["mu"], dtype=np.float64),
                np.atleast_2d(np.array(obj["B"], dtype=np.float64)),
                np.atleast_2d(np.array(obj["Wc"], dtype=np.float64)),
            )
        except KeyError as e:
            raise io.FormatError(f"{path}: missing field {e}") from e
        n = model.dim
        if model.B.shape != (n, n) or model.Wc.shape != (n, n):
            raise io.FormatError(f"{path}: PLDA matrices do not match mu dimension {n}")
        return model


def _speaker_groups(data):
    """(session count, stacked sums, speaker row-index lists) grouped by count."""
    by_count = {}
    for idx in data.class_indices():
        by_count.setdefault(len(idx), []).append(idx)
    return sorted(by_count.items())


def plda_log_likelihood(model, data):
    """Exact log-likelihood of labeled data under the two-covariance model."""
    X = data.X
    n = X.shape[1]
    Winv, logdet_w = spd_inv_logdet(model.Wc)
    total = 0.0
    for count, groups in _speaker_groups(data):
        Cinv, logdet_c = spd_inv_logdet(model.Wc + count * model.B)
        for idx in groups:
            xi = X[idx]
            xbar = xi.mean(axis=0)
            dev = xi - xbar
            dm = xbar - model.mu
            total -= 0.5 * (
                count * n * np.log(2 * np.pi)
                + (count - 1) * logdet_w
                + logdet_c
                + np.sum((dev @ Winv) * dev)
                + count * dm @ Cinv @ dm
            )
    return total


def train_plda_em(data, iters=10, seed=0, history=None):
    """EM for the two-covariance PLDA model with full-rank B.

    Initialization is deterministic (mu = global mean, B = Wc = half the
    total covariance), so ``seed`` does not change the result; it is accepted
    for interface symmetry with the other trainers.

    Args:
      data: LabeledVectors, labels are speakers.
      history: optional list receiving the training log-likelihood before
        each iteration and for the returned model.
    """
    del seed
    X = data.X
    N, n = X.shape
    groups = data.class_indices()
    if all(len(idx) < 2 for idx in groups):
        raise ValueError("every speaker has a single session; within-speaker covariance is unidentifiable")
    mu = X.mean(axis=0)
    Xc = X - mu
    total_cov = sym(Xc.T @ Xc / N)
    model = PldaModel(mu, 0.5 * total_cov, 0.5 * total_cov)
    M = len(groups)
    by_count = _speaker_groups(data)

    for it in range(iters):
        if history is not None:
            history.append(plda_log_likelihood(model, data))
        Winv, _ = spd_inv_logdet(model.Wc)
        Binv, _ = spd_inv_logdet(model.B)
        Y = np.empty((N, n))  # posterior speaker mean, repeated per session
        sum_cov_spk = np.zeros((n, n))  # sum over speakers of Cov[y_i]
        sum_cov_sess = np.zeros((n, n))  # sum over sessions of Cov[y_i]
        sum_yy = np.zeros((n, n))
        for count, spk in by_count:
            C, _ = spd_inv_logdet(Binv + count * Winv)
            sums = np.stack([X[idx].sum(axis=0) - count * model.mu for idx in spk])
            Yhat = sums @ (Winv @ C)  # C and Winv symmetric
            for idx, y in zip(spk, Yhat):
                Y[idx] = y
            sum_cov_spk += len(spk) * C
            sum_cov_sess += len(spk) * count * C
            sum_yy += Yhat.T @ Yhat
        B = sym((sum_yy + sum_cov_spk) / M)
        mu = (X - Y).mean(axis=0)
        R = X - mu - Y
        Wc = sym((R.T @ R + sum_cov_sess) / N)
        model = PldaModel(mu, B, Wc)
        logger.debug("plda iter %d", it)
    if history is not None:
        history.append(plda_log_likelihood(model, data))
    return model


@dataclass(frozen=True)
class _ScoringTerms:
    Q: np.ndarray
    P: np.ndarray
    const: float


def _scoring_terms(model):
    B, W = model.B, model.Wc
    Tinv, logdet_t = spd_inv_logdet(B + W)
    # joint covariance [[T, B], [B, T]]; inverse blocks [[A1, A2], [A2, A1]]
    A1, _ = spd_inv_logdet(B + W - B @ Tinv @ B)
    A2 = sym(-Tinv @ B @ A1)
    _, logdet_sum = spd_inv_logdet(W + 2 * B)
    _, logdet_w = spd_inv_logdet(W)
    const = logdet_t - 0.5 * (logdet_sum + logdet_w)
    return _ScoringTerms(sym(Tinv - A1), -A2, const)


def plda_score(model, enroll, test):
    """Same-speaker vs different-speaker log-likelihood ratio.

    Symmetric in (enroll, test) to the last bit.
    """
    return float(plda_score_pairs(model, np.atleast_2d(enroll), np.atleast_2d(test))[0])


def plda_score_pairs(model, E, T):
    """LLR for row-aligned pairs (E[k], T[k])."""
    E = np.atleast_2d(np.asarray(E, dtype=np.float64))
    T = np.atleast_2d(np.asarray(T, dtype=np.float64))
    if E.shape != T.shape or E.shape[1] != model.dim:
        raise ValueError(f"score inputs {E.shape}, {T.shape} do not match model dim {model.dim}")
    if not (np.all(np.isfinite(E)) and np.all(np.isfinite(T))):
        raise ValueError("non-finite input to PLDA scoring")
    st = _scoring_terms(model)
    e = E - model.mu
    t = T - model.mu
    qe = np.sum((e @ st.Q) * e, axis=1)
    qt = np.sum((t @ st.Q) * t, axis=1)
    cross = np.sum((e @ st.P) * t, axis=1) + np.sum((t @ st.P) * e, axis=1)
    return 0.5 * (qe + qt) + 0.5 * cross + st.const
