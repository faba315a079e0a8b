"""Session-variability compensation: parametric LDA and nearest-neighbor NDA.

Both methods produce scatter pairs (between, within) that are turned into a
projection by the same generalized eigensolver, so NDA and LDA differ only
in how the scatters are built.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg as sla
from scipy.spatial.distance import cdist

from . import io
from ._linalg import sym

RIDGE = 1e-6
RANK_TOL = 1e-8
METRICS = ("cosine", "euclidean")


@dataclass(frozen=True)
class LabeledVectors:
    """Vectors X (N, d) with one class label per row."""

    X: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        labels = np.asarray(self.labels)
        if labels.shape != (X.shape[0],):
            raise ValueError(f"{labels.shape[0]} labels for {X.shape[0]} vectors")
        if not np.all(np.isfinite(X)):
            raise ValueError("vectors must be finite")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "labels", labels)

    @property
    def classes(self):
        return np.unique(self.labels)

    def class_indices(self):
        """Row indices per class, classes in sorted order, rows ascending."""
        return [np.flatnonzero(self.labels == c) for c in self.classes]


@dataclass(frozen=True)
class ScatterPair:
    between: np.ndarray
    within: np.ndarray


@dataclass(frozen=True)
class NdaConfig:
    """Nearest-neighbor discriminant analysis settings.

    ``unit_weights``, ``k_between`` and ``k_within`` exist so the LDA limit
    can be reached: ``k_between="all"`` uses every sample of the other pool
    (its mean), ``k_within="all"`` uses the class mean (the sample included).
    The weight function always uses ``K`` for both neighbor distances.
    """

    K: int = 10
    alpha: float = 1.0
    metric: str = "cosine"
    one_vs_rest: bool = True
    unit_weights: bool = False
    k_between: int | str | None = None
    k_within: int | str | None = None

    def __post_init__(self):
        if self.K < 1:
            raise ValueError(f"K must be >= 1, got {self.K}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}, got {self.metric!r}")
        for name in ("k_between", "k_within"):
            k = getattr(self, name)
            if not (k is None or k == "all" or (isinstance(k, int) and k >= 1)):
                raise ValueError(f"{name} must be None, 'all' or a positive int, got {k!r}")


@dataclass(frozen=True)
class Projection:
    """Linear map A (d, n); columns ordered by descending eigenvalue."""

    A: np.ndarray
    eigenvalues: np.ndarray = None
    info: dict = field(default_factory=dict)

    @property
    def input_dim(self):
        return self.A.shape[0]

    @property
    def output_dim(self):
        return self.A.shape[1]

    def save(self, path):
        fields = {"input_dim": self.input_dim, "output_dim": self.output_dim}
        fields.update(self.info)
        fields["A"] = self.A
        if self.eigenvalues is not None:
            fields["eigenvalues"] = self.eigenvalues
        io.save_model(path, "projection", fields)

    @classmethod
    def load(cls, path):
        obj = io.load_model(path, "projection")
        try:
            A = np.atleast_2d(np.array(obj.pop("A"), dtype=np.float64))
            ev = obj.pop("eigenvalues", None)
            shape = (obj.pop("input_dim"), obj.pop("output_dim"))
        except KeyError as e:
            raise io.FormatError(f"{path}: missing field {e}") from e
        if A.shape != shape:
            raise io.FormatError(f"{path}: A has shape {A.shape}, header says {shape}")
        obj.pop("format")
        return cls(A, None if ev is None else np.array(ev), obj)


def distances(x, pool, metric):
    """Distances from each row of x to each row of pool.

    Cosine distance is 1 - cosine similarity; zero vectors are rejected.
    """
    x = np.atleast_2d(x)
    pool = np.atleast_2d(pool)
    if metric == "cosine":
        if np.any(np.linalg.norm(x, axis=1) == 0) or np.any(np.linalg.norm(pool, axis=1) == 0):
            raise ValueError("cosine distance undefined for zero-norm vectors")
    elif metric != "euclidean":
        raise ValueError(f"unknown metric {metric!r}")
    return cdist(x, pool, metric=metric)


def knn(x, pool, K, metric="euclidean"):
    """Indices and distances of the K nearest pool rows; ties go to the lower index."""
    pool = np.atleast_2d(pool)
    if K < 1 or pool.shape[0] < K:
        raise ValueError(f"pool of {pool.shape[0]} samples is smaller than K={K}")
    d = distances(x, pool, metric)[0]
    order = np.argsort(d, kind="stable")[:K]
    return order, d[order]


def knn_local_mean(x, pool, K, metric="euclidean"):
    """Mean of the K nearest neighbors of x in pool."""
    idx, _ = knn(x, pool, K, metric)
    return np.atleast_2d(pool)[idx].mean(axis=0)


def weight_from_distances(d_own, d_other, alpha=1.0):
    """min(a, b) / (a + b) with a = d_own**alpha, b = d_other**alpha.

    Evaluated as r / (1 + r), r = (min/max)**alpha, which avoids overflow for
    large alpha. Both distances zero gives 0.5.
    """
    d_own = np.asarray(d_own, dtype=np.float64)
    d_other = np.asarray(d_other, dtype=np.float64)
    lo = np.minimum(d_own, d_other)
    hi = np.maximum(d_own, d_other)
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.where(hi > 0, lo / np.where(hi > 0, hi, 1.0), 1.0) ** alpha
    w = r / (1.0 + r)
    return w if w.ndim else float(w)


def nn_weight(x, own_pool, other_pool, K, alpha=1.0, metric="euclidean"):
    """Boundary weight of sample x; ``own_pool`` must already exclude x."""
    _, d_own = knn(x, own_pool, K, metric)
    _, d_other = knn(x, other_pool, K, metric)
    return weight_from_distances(d_own[-1], d_other[-1], alpha)


def lda_scatters(data):
    """Class-count-weighted between scatter and pooled (unnormalized) within scatter."""
    groups = data.class_indices()
    if len(groups) < 2:
        raise ValueError("LDA needs at least two classes")
    X = data.X
    mu = X.mean(axis=0)
    d = X.shape[1]
    Sb = np.zeros((d, d))
    Sw = np.zeros((d, d))
    for idx in groups:
        mi = X[idx].mean(axis=0)
        dm = mi - mu
        Sb += len(idx) * np.outer(dm, dm)
        Xc = X[idx] - mi
        Sw += Xc.T @ Xc
    return ScatterPair(sym(Sb), sym(Sw))


def _sorted_neighbors(D):
    return np.argsort(D, axis=1, kind="stable")


def _own_class_neighbors(D_own):
    """Sorted own-class neighbor order with the sample itself pushed last."""
    D = D_own.copy()
    np.fill_diagonal(D, np.inf)
    order = _sorted_neighbors(D)
    return order, np.take_along_axis(D, order, axis=1)


def _check_groups(data, min_size, what):
    groups = data.class_indices()
    if len(groups) < 2:
        raise ValueError("NDA needs at least two classes")
    small = [str(c) for c, idx in zip(data.classes, groups) if len(idx) < min_size]
    if small:
        raise ValueError(f"{what}: classes with fewer than {min_size} samples: {', '.join(small)}")
    return groups


def nda_between(data, cfg=NdaConfig()):
    """Nonparametric between-class scatter from weighted k-NN local gradients.

    In pairwise mode every ordered class pair (i, j), j != i, contributes;
    in one-vs-rest mode j is the pooled set of all samples outside class i.
    """
    X = data.X
    kb = cfg.K if cfg.k_between is None else cfg.k_between
    need_weights = not cfg.unit_weights
    groups = _check_groups(data, cfg.K + 1 if need_weights else 1, "own-class neighbors")
    D = distances(X, X, cfg.metric)
    d = X.shape[1]
    Sb = np.zeros((d, d))
    all_idx = np.arange(X.shape[0])
    for ci, idx_i in enumerate(groups):
        if cfg.one_vs_rest:
            pools = [(f"rest of {data.classes[ci]}", np.setdiff1d(all_idx, idx_i))]
        else:
            pools = [(str(data.classes[cj]), idx_j) for cj, idx_j in enumerate(groups) if cj != ci]
        if need_weights:
            _, own_d = _own_class_neighbors(D[np.ix_(idx_i, idx_i)])
            d_own = own_d[:, cfg.K - 1]
        for name, idx_j in pools:
            k = len(idx_j) if kb == "all" else kb
            if len(idx_j) < max(k, cfg.K if need_weights else 1):
                raise ValueError(
                    f"pool '{name}' has {len(idx_j)} samples, fewer than K={max(k, cfg.K)}"
                )
            Dij = D[np.ix_(idx_i, idx_j)]
            order = _sorted_neighbors(Dij)
            M = X[idx_j][order[:, :k]].mean(axis=1)
            diff = X[idx_i] - M
            if need_weights:
                d_other = np.take_along_axis(Dij, order[:, cfg.K - 1 : cfg.K], axis=1)[:, 0]
                w = weight_from_distances(d_own, d_other, cfg.alpha)
                Sb += (diff * w[:, None]).T @ diff
            else:
                Sb += diff.T @ diff
    return sym(Sb)


def nda_within(data, cfg=NdaConfig()):
    """Nonparametric within-class scatter: unit weights, k-NN local means
    inside each class with the sample itself excluded."""
    X = data.X
    kw = cfg.K if cfg.k_within is None else cfg.k_within
    groups = _check_groups(data, 1 if kw == "all" else kw + 1, "within-class neighbors")
    D = None if kw == "all" else distances(X, X, cfg.metric)
    d = X.shape[1]
    Sw = np.zeros((d, d))
    for idx in groups:
        Xi = X[idx]
        if kw == "all":
            M = Xi.mean(axis=0)
        else:
            order, _ = _own_class_neighbors(D[np.ix_(idx, idx)])
            M = Xi[order[:, :kw]].mean(axis=1)
        diff = Xi - M
        Sw += diff.T @ diff
    return sym(Sw)


def nda_scatters(data, cfg=NdaConfig()):
    return ScatterPair(nda_between(data, cfg), nda_within(data, cfg))


def numerical_rank(S, tol=RANK_TOL):
    s = np.linalg.svd(S, compute_uv=False)
    if s[0] == 0:
        return 0
    return int(np.sum(s > tol * s[0]))


def solve_projection(scatters, n, allow_rank_deficient=False):
    """Top-n generalized eigenvectors of (between, within + ridge).

    The within scatter is ridged by 1e-6 * trace / d. Columns satisfy
    A' (Sw + ridge) A = I, are ordered by descending eigenvalue, and each has
    its largest-magnitude entry positive.

    Raises:
      ValueError: if n exceeds the numerical rank of the between scatter
        (always the case for LDA with n > C - 1) unless allowed.
    """
    Sb = np.asarray(scatters.between, dtype=np.float64)
    Sw = np.asarray(scatters.within, dtype=np.float64)
    d = Sb.shape[0]
    if not 1 <= n <= d:
        raise ValueError(f"target dimension must be in [1, {d}], got {n}")
    rank = numerical_rank(Sb)
    if n > rank and not allow_rank_deficient:
        raise ValueError(
            f"between-class scatter has numerical rank {rank}; cannot extract {n} directions"
        )
    lam = RIDGE * np.trace(Sw) / d
    Sw_r = Sw + lam * np.eye(d)
    try:
        evals, evecs = sla.eigh(sym(Sb), sym(Sw_r))
    except sla.LinAlgError as e:
        raise ValueError(f"within-class scatter is singular even after ridge: {e}") from e
    evals = evals[::-1][:n]
    A = evecs[:, ::-1][:, :n]
    pivot = np.argmax(np.abs(A), axis=0)
    A = A * np.sign(A[pivot, np.arange(n)])
    return Projection(A, evals)


def apply_projection(proj, X):
    """Projects row vectors: Y = X A."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[-1] != proj.input_dim:
        raise ValueError(f"vectors have dim {X.shape[-1]}, projection expects {proj.input_dim}")
    return X @ proj.A


def fit_lda(data, n):
    proj = solve_projection(lda_scatters(data), n)
    return Projection(proj.A, proj.eigenvalues, {"method": "lda"})


def fit_nda(data, n, cfg=NdaConfig()):
    proj = solve_projection(nda_scatters(data, cfg), n)
    info = {
        "method": "nda",
        "K": cfg.K,
        "alpha": cfg.alpha,
        "metric": cfg.metric,
        "mode": "one_vs_rest" if cfg.one_vs_rest else "pairwise",
    }
    return Projection(proj.A, proj.eigenvalues, info)
