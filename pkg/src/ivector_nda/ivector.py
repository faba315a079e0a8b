"""Baum-Welch statistics, total-variability training and i-vector extraction.

Supervectors are component-major: entry g*d + j is dimension j of component g.
"""

from dataclasses import dataclass
import logging

import numpy as np

from . import io
from ._linalg import spd_inv_logdet, spd_solve

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SuffStats:
    """Zeroth (G,) and first-order (G, d) Baum-Welch statistics of one session."""

    zeroth: np.ndarray
    first: np.ndarray

    def __post_init__(self):
        N = np.asarray(self.zeroth, dtype=np.float64)
        F = np.atleast_2d(np.asarray(self.first, dtype=np.float64))
        if N.ndim != 1 or F.shape[0] != N.shape[0]:
            raise ValueError(f"stats shape mismatch: zeroth {N.shape}, first {F.shape}")
        if np.any(N < 0):
            raise ValueError("zeroth-order statistics must be non-negative")
        object.__setattr__(self, "zeroth", N)
        object.__setattr__(self, "first", F)

    def __add__(self, other):
        return SuffStats(self.zeroth + other.zeroth, self.first + other.first)

    @property
    def num_components(self):
        return self.zeroth.shape[0]

    @property
    def dim(self):
        return self.first.shape[1]

    def to_array(self):
        """Packs into a (G, 1 + d) array: zeroth in column 0."""
        return np.hstack([self.zeroth[:, None], self.first])

    @classmethod
    def from_array(cls, arr):
        arr = np.atleast_2d(arr)
        return cls(arr[:, 0].copy(), arr[:, 1:].copy())


def accumulate_stats(post, feat):
    """N_g = sum_t gamma_tg, F_g = sum_t gamma_tg * O_t."""
    post = np.atleast_2d(np.asarray(post, dtype=np.float64))
    feat = np.atleast_2d(np.asarray(feat, dtype=np.float64))
    if post.shape[0] != feat.shape[0]:
        raise ValueError(
            f"frame count mismatch: {post.shape[0]} posterior rows, {feat.shape[0]} feature rows"
        )
    return SuffStats(post.sum(axis=0), post.T @ feat)


def center_stats(stats, means):
    """Centres first-order stats around the UBM means: F_g - N_g * m_g."""
    means = np.atleast_2d(np.asarray(means, dtype=np.float64))
    if means.shape != stats.first.shape:
        raise ValueError(f"means shape {means.shape} != stats shape {stats.first.shape}")
    return SuffStats(stats.zeroth, stats.first - stats.zeroth[:, None] * means)


@dataclass(frozen=True)
class TotalVariabilityModel:
    """M(s) = m + T x(s) + eps, eps ~ N(0, diag(sigma)).

    Attributes:
      m: (G*d,) prior mean supervector (UBM means).
      T: (G*d, R) total-variability matrix.
      sigma: (G*d,) residual variances (UBM variances).
      num_components: G.
    """

    m: np.ndarray
    T: np.ndarray
    sigma: np.ndarray
    num_components: int

    def __post_init__(self):
        m = np.asarray(self.m, dtype=np.float64).ravel()
        T = np.atleast_2d(np.asarray(self.T, dtype=np.float64))
        sigma = np.asarray(self.sigma, dtype=np.float64).ravel()
        G = int(self.num_components)
        if G < 1 or m.size % G or T.shape[0] != m.size or sigma.size != m.size:
            raise ValueError(
                f"inconsistent TV model: G={G}, m {m.shape}, T {T.shape}, sigma {sigma.shape}"
            )
        if T.shape[1] > m.size:
            raise ValueError("rank R must not exceed G*d")
        if np.any(sigma <= 0) or not np.all(np.isfinite(T)) or not np.all(np.isfinite(m)):
            raise ValueError("TV model needs positive sigma and finite m, T")
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "T", T)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "num_components", G)

    @property
    def dim(self):
        return self.m.size // self.num_components

    @property
    def rank(self):
        return self.T.shape[1]

    def component_precisions(self):
        """T_g' Sigma_g^-1 T_g for every component, shape (G, R, R)."""
        G, d, R = self.num_components, self.dim, self.rank
        Tg = self.T.reshape(G, d, R)
        return np.einsum("gdr,gdq->grq", Tg / self.sigma.reshape(G, d, 1), Tg)

    def save(self, path):
        io.save_model(
            path,
            "tv_model",
            {"G": self.num_components, "d": self.dim, "R": self.rank,
             "m": self.m, "T": self.T, "sigma": self.sigma},
        )

    @classmethod
    def load(cls, path):
        obj = io.load_model(path, "tv_model")
        try:
            model = cls(np.array(obj["m"]), np.array(obj["T"]), np.array(obj["sigma"]), obj["G"])
        except (KeyError, ValueError) as e:
            raise io.FormatError(f"{path}: invalid TV model ({e})") from e
        if (model.dim, model.rank) != (obj.get("d"), obj.get("R")):
            raise io.FormatError(f"{path}: d/R scalars disagree with array shapes")
        return model


def _stack(stats):
    N = np.stack([s.zeroth for s in stats])
    F = np.stack([s.first.ravel() for s in stats])
    return N, F


def _posteriors(model, N, F, prec=None):
    """Per-session posterior means, covariances and log-likelihood terms."""
    if prec is None:
        prec = model.component_precisions()
    R = model.rank
    b = F @ (model.T / model.sigma[:, None])
    X = np.empty((N.shape[0], R))
    covs = np.empty((N.shape[0], R, R))
    obj = 0.0
    for s in range(N.shape[0]):
        L = np.eye(R) + np.tensordot(N[s], prec, axes=1)
        covs[s], logdet = spd_inv_logdet(L)
        X[s] = covs[s] @ b[s]
        obj += 0.5 * (b[s] @ X[s] - logdet)
    return X, covs, obj


def extract_ivector(model, stats):
    """Posterior mean x = (I + T' S^-1 N T)^-1 T' S^-1 F for centred stats."""
    if stats.first.shape != (model.num_components, model.dim):
        raise ValueError(
            f"stats shape {stats.first.shape} does not match model "
            f"({model.num_components}, {model.dim})"
        )
    if not (np.all(np.isfinite(stats.zeroth)) and np.all(np.isfinite(stats.first))):
        raise ValueError("non-finite statistics")
    L = np.eye(model.rank) + np.tensordot(stats.zeroth, model.component_precisions(), axes=1)
    b = model.T.T @ (stats.first.ravel() / model.sigma)
    return spd_solve(L, b)


def extract_ivectors(model, stats):
    """Vectorized extraction for a list of centred stats; returns (S, R)."""
    for s in stats:
        if not (np.all(np.isfinite(s.zeroth)) and np.all(np.isfinite(s.first))):
            raise ValueError("non-finite statistics")
    N, F = _stack(stats)
    return _posteriors(model, N, F)[0]


def tv_objective(model, stats):
    """Log-likelihood of the centred statistics up to a T-independent constant."""
    N, F = _stack(stats)
    return _posteriors(model, N, F)[2]


def train_tv_em(stats, ubm, rank, iters=5, seed=0, history=None):
    """Trains the total-variability matrix by EM on centred statistics.

    m and Sigma are taken from the UBM and never updated. T is initialised
    with i.i.d. Gaussian entries scaled by 0.1 * mean(sqrt(Sigma)).

    Args:
      stats: list of centred SuffStats.
      ubm: DiagonalGmm whose means/variances give m and Sigma.
      rank: R, the i-vector dimension.
      history: optional list receiving the objective (see ``tv_objective``)
        before each iteration and for the returned model.
    """
    if not stats:
        raise ValueError("empty statistics list")
    G, d = ubm.num_components, ubm.dim
    R = int(rank)
    if not 1 <= R <= G * d:
        raise ValueError(f"rank must be in [1, G*d={G * d}], got {R}")
    for s in stats:
        if s.first.shape != (G, d):
            raise ValueError(f"stats shape {s.first.shape} does not match UBM ({G}, {d})")
    if len(stats) < R:
        logger.warning("%d sessions for rank %d; T is poorly determined", len(stats), R)

    sigma = ubm.variances.ravel()
    rng = np.random.default_rng(seed)
    T = rng.standard_normal((G * d, R)) * (0.1 * np.mean(np.sqrt(sigma)))
    model = TotalVariabilityModel(ubm.means.ravel(), T, sigma, G)
    N, F = _stack(stats)

    for it in range(iters):
        X, covs, obj = _posteriors(model, N, F)
        if history is not None:
            history.append(obj)
        logger.debug("tv iter %d: objective %.6f", it, obj)
        Exx = covs + X[:, :, None] * X[:, None, :]
        A = np.einsum("sg,srq->grq", N, Exx)
        C = (F.T @ X).reshape(G, d, R)
        T_new = np.empty((G, d, R))
        for g in range(G):
            if N[:, g].sum() > 0:
                T_new[g] = spd_solve(A[g], C[g].T).T
            else:
                T_new[g] = model.T.reshape(G, d, R)[g]
        model = TotalVariabilityModel(model.m, T_new.reshape(G * d, R), sigma, G)
    if history is not None:
        history.append(_posteriors(model, N, F)[2])
    return model
