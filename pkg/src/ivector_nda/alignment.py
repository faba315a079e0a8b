"""Frame alignments: diagonal GMM-UBM training and posteriors, or external posteriors."""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
import logging

import numpy as np
from scipy.special import logsumexp

from . import io

logger = logging.getLogger(__name__)

VAR_FLOOR_FACTOR = 1e-4
POSTERIOR_SUM_TOL = 1e-3
SPLIT_OFFSET = 0.2


@dataclass(frozen=True)
class DiagonalGmm:
    """Mixture of diagonal Gaussians.

    Attributes:
      weights: (G,) mixture weights summing to one.
      means: (G, d) component means.
      variances: (G, d) positive diagonal variances.
    """

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        mu = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        var = np.atleast_2d(np.asarray(self.variances, dtype=np.float64))
        if w.ndim != 1 or mu.shape != var.shape or mu.shape[0] != w.shape[0]:
            raise ValueError(
                f"inconsistent GMM shapes: weights {w.shape}, means {mu.shape}, "
                f"variances {var.shape}"
            )
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(mu)) and np.all(np.isfinite(var))):
            raise ValueError("GMM parameters must be finite")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-10:
            raise ValueError(f"GMM weights must be a simplex (sum={w.sum()!r})")
        if np.any(var <= 0):
            raise ValueError("GMM variances must be positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "variances", var)

    @property
    def num_components(self):
        return self.weights.shape[0]

    @property
    def dim(self):
        return self.means.shape[1]

    def component_log_likelihoods(self, feat):
        """log(w_g) + log N(x_t; mu_g, diag(var_g)), shape (T, G)."""
        feat = np.atleast_2d(np.asarray(feat, dtype=np.float64))
        if feat.shape[1] != self.dim:
            raise ValueError(
                f"dimension mismatch: features have {feat.shape[1]} columns, GMM has {self.dim}"
            )
        prec = 1.0 / self.variances
        const = (
            np.log(self.weights)
            - 0.5 * self.dim * np.log(2 * np.pi)
            - 0.5 * np.sum(np.log(self.variances), axis=1)
            - 0.5 * np.sum(self.means**2 * prec, axis=1)
        )
        return const + feat @ (self.means * prec).T - 0.5 * (feat**2) @ prec.T

    def save(self, path):
        io.save_model(
            path,
            "diag_gmm",
            {"weights": self.weights, "means": self.means, "variances": self.variances},
        )

    @classmethod
    def load(cls, path):
        obj = io.load_model(path, "diag_gmm")
        try:
            return cls(np.array(obj["weights"]), np.array(obj["means"]), np.array(obj["variances"]))
        except (KeyError, ValueError) as e:
            raise io.FormatError(f"{path}: invalid GMM ({e})") from e


def gmm_posteriors(gmm, feat):
    """Frame posteriors gamma_tg, computed with log-sum-exp. Rows sum to one."""
    lls = gmm.component_log_likelihoods(feat)
    return np.exp(lls - logsumexp(lls, axis=1, keepdims=True))


def _accumulate(gmm, feat):
    lls = gmm.component_log_likelihoods(feat)
    frame_ll = logsumexp(lls, axis=1)
    post = np.exp(lls - frame_ll[:, None])
    return post.sum(axis=0), post.T @ feat, post.T @ feat**2, frame_ll.sum()


def _e_step(gmm, feats, n_jobs):
    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as ex:
            parts = list(ex.map(lambda f: _accumulate(gmm, f), feats))
    else:
        parts = [_accumulate(gmm, f) for f in feats]
    # fixed-order reduction keeps results independent of the worker count
    N, F, S, ll = parts[0]
    N, F, S = N.copy(), F.copy(), S.copy()
    for n, f, s, l in parts[1:]:
        N += n
        F += f
        S += s
        ll += l
    return N, F, S, ll


def _m_step(old, N, F, S, floor):
    keep = N > 1e-10 * N.sum()
    safe_n = np.where(keep, N, 1.0)[:, None]
    means = np.where(keep[:, None], F / safe_n, old.means)
    var = np.where(keep[:, None], S / safe_n - means**2, old.variances)
    var = np.maximum(var, floor)
    w = np.maximum(N, 0.0)
    return DiagonalGmm(w / w.sum(), means, var)


def _split(gmm):
    offset = SPLIT_OFFSET * np.sqrt(gmm.variances)
    means = np.concatenate([gmm.means - offset, gmm.means + offset])
    weights = np.concatenate([gmm.weights, gmm.weights]) / 2.0
    return DiagonalGmm(weights / weights.sum(), means, np.concatenate([gmm.variances] * 2))


def train_gmm_em(
    features,
    num_components,
    iters=10,
    seed=0,
    split_iters=3,
    subsample=None,
    n_jobs=1,
    history=None,
):
    """Trains a diagonal-covariance UBM by binary splitting and EM.

    Starts from the global Gaussian, doubles the component count by
    perturbing means by +-0.2 sigma, runs ``split_iters`` EM passes per level,
    then ``iters`` final passes at the target size.

    Args:
      features: list of (T_i, d) feature matrices.
      num_components: G, a power of two.
      iters: EM iterations at the final size.
      seed: seeds frame subsampling (the only random step).
      subsample: optional fraction of frames kept per recording.
      n_jobs: worker threads for the E-step; results do not depend on it.
      history: optional list; receives the total log-likelihood before each
        final iteration and once more for the returned model.

    Returns:
      DiagonalGmm
    """
    G = int(num_components)
    if G < 1 or G & (G - 1):
        raise ValueError(f"number of components must be a power of two, got {G}")
    feats = [np.atleast_2d(np.asarray(f, dtype=np.float64)) for f in features]
    if not feats:
        raise ValueError("no training features")
    if subsample is not None:
        if not 0 < subsample <= 1:
            raise ValueError("subsample must be in (0, 1]")
        rng = np.random.default_rng(seed)
        feats = [
            f[np.sort(rng.choice(len(f), max(1, int(round(subsample * len(f)))), replace=False))]
            for f in feats
        ]
    total = sum(len(f) for f in feats)
    if total < 10 * G:
        raise ValueError(f"insufficient frames: {total} frames for {G} components (need {10 * G})")

    # global moments via two passes for accuracy
    mean = sum(f.sum(axis=0) for f in feats) / total
    var = sum(((f - mean) ** 2).sum(axis=0) for f in feats) / total
    floor = VAR_FLOOR_FACTOR * np.maximum(var, np.finfo(float).tiny)
    gmm = DiagonalGmm(np.ones(1), mean[None, :], np.maximum(var, floor)[None, :])

    while gmm.num_components < G:
        gmm = _split(gmm)
        for _ in range(split_iters):
            N, F, S, _ = _e_step(gmm, feats, n_jobs)
            gmm = _m_step(gmm, N, F, S, floor)
        logger.debug("split to %d components", gmm.num_components)

    for it in range(iters):
        N, F, S, ll = _e_step(gmm, feats, n_jobs)
        if history is not None:
            history.append(ll)
        logger.debug("gmm iter %d: loglik/frame %.6f", it, ll / total)
        gmm = _m_step(gmm, N, F, S, floor)
    if history is not None:
        history.append(_e_step(gmm, feats, n_jobs)[3])
    return gmm


def gmm_from_posteriors(features, posteriors, n_jobs=1):
    """Single M-step turning externally supplied alignments into a diagonal GMM.

    Used when frame posteriors come from an outside model (e.g. DNN senones):
    the per-class means and variances centre the Baum-Welch statistics and
    seed the residual covariance of the total-variability model.
    """
    feats = [np.atleast_2d(np.asarray(f, dtype=np.float64)) for f in features]
    posts = [np.atleast_2d(np.asarray(p, dtype=np.float64)) for p in posteriors]
    if len(feats) != len(posts) or not feats:
        raise ValueError("need one posterior matrix per feature matrix")
    for f, p in zip(feats, posts):
        if f.shape[0] != p.shape[0]:
            raise ValueError(f"posterior rows ({p.shape[0]}) != feature rows ({f.shape[0]})")
    total = sum(len(f) for f in feats)
    mean = sum(f.sum(axis=0) for f in feats) / total
    var = sum(((f - mean) ** 2).sum(axis=0) for f in feats) / total
    floor = VAR_FLOOR_FACTOR * np.maximum(var, np.finfo(float).tiny)
    G, d = posts[0].shape[1], feats[0].shape[1]
    N, F, S = np.zeros(G), np.zeros((G, d)), np.zeros((G, d))
    for f, p in zip(feats, posts):
        N += p.sum(axis=0)
        F += p.T @ f
        S += p.T @ f**2
    fallback = DiagonalGmm(np.full(G, 1.0 / G), np.tile(mean, (G, 1)), np.tile(np.maximum(var, floor), (G, 1)))
    return _m_step(fallback, N, F, S, floor)


def validate_posteriors(post, name="posteriors"):
    """Checks a (T, G) matrix is row-stochastic; renormalizes rows within 1e-3 of one."""
    post = np.atleast_2d(np.asarray(post, dtype=np.float64))
    if not np.all(np.isfinite(post)) or np.any(post < 0) or np.any(post > 1 + POSTERIOR_SUM_TOL):
        raise ValueError(f"{name}: not a posterior matrix (entries outside [0, 1])")
    sums = post.sum(axis=1)
    bad = np.flatnonzero(np.abs(sums - 1.0) > POSTERIOR_SUM_TOL)
    if bad.size:
        raise ValueError(
            f"{name}: not a posterior matrix (row {bad[0]} sums to {sums[bad[0]]:.6g})"
        )
    return post / sums[:, None]


def load_external_posteriors(path):
    """Reads frame posteriors (e.g. DNN senone posteriors) from an FMAT file."""
    return validate_posteriors(io.read_fmat(path), str(path))
