"""DET curves, equal error rate and normalized minimum detection cost.

A trial is accepted when its score is >= the threshold.
"""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CostParams:
    c_miss: float
    c_fa: float
    p_target: float

    def __post_init__(self):
        if self.c_miss <= 0 or self.c_fa <= 0 or not 0 < self.p_target < 1:
            raise ValueError(f"invalid cost parameters {self}")

    @property
    def normalizer(self):
        return min(self.c_miss * self.p_target, self.c_fa * (1 - self.p_target))


DCF08 = CostParams(c_miss=10.0, c_fa=1.0, p_target=0.01)
DCF10 = CostParams(c_miss=1.0, c_fa=1.0, p_target=0.001)


@dataclass(frozen=True)
class DetCurve:
    """Operating points ordered by increasing threshold.

    The last point has threshold +inf (reject everything).
    """

    thresholds: np.ndarray
    p_miss: np.ndarray
    p_fa: np.ndarray

    def write(self, path):
        with open(path, "w") as f:
            for th, pm, pf in zip(self.thresholds, self.p_miss, self.p_fa):
                f.write(f"{float(th)!r} {float(pm)!r} {float(pf)!r}\n")


def _split_scores(scores, is_target):
    scores = np.asarray(scores, dtype=np.float64)
    is_target = np.asarray(is_target, dtype=bool)
    if scores.shape != is_target.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be 1-d and of equal length")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    tar, non = scores[is_target], scores[~is_target]
    if tar.size == 0 or non.size == 0:
        raise ValueError("need at least one target and one nontarget trial")
    return np.sort(tar), np.sort(non)


def compute_det(scores, is_target):
    """One operating point per distinct score, plus the reject-all point."""
    tar, non = _split_scores(scores, is_target)
    thresholds = np.append(np.unique(np.concatenate([tar, non])), np.inf)
    p_miss = np.searchsorted(tar, thresholds, side="left") / tar.size
    p_fa = (non.size - np.searchsorted(non, thresholds, side="left")) / non.size
    return DetCurve(thresholds, p_miss, p_fa)


def eer(det):
    """Equal error rate, linearly interpolated where P_miss crosses P_fa."""
    diff = det.p_miss - det.p_fa
    k = int(np.argmax(diff >= 0))  # last point has diff = 1 > 0
    if k == 0:
        return float(det.p_miss[0])
    d0, d1 = diff[k - 1], diff[k]
    t = -d0 / (d1 - d0)
    return float(det.p_miss[k - 1] + t * (det.p_miss[k] - det.p_miss[k - 1]))


def min_dcf(det, params=DCF08):
    """Minimum detection cost normalized by the best trivial-system cost."""
    cost = (
        params.c_miss * params.p_target * det.p_miss
        + params.c_fa * (1 - params.p_target) * det.p_fa
    )
    return float(cost.min() / params.normalizer)


def evaluate(scores, is_target):
    """EER and minDCF08/minDCF10 in one pass."""
    det = compute_det(scores, is_target)
    return {"eer": eer(det), "min_dcf08": min_dcf(det, DCF08), "min_dcf10": min_dcf(det, DCF10)}
