"""LDA-vs-NDA comparison on identical inputs, reported like a results table."""

import numpy as np

from . import metrics
from .backend import fit_whitener, length_normalize, plda_score_pairs, train_plda_em
from .discriminant import LabeledVectors, NdaConfig, apply_projection, fit_lda, fit_nda


def split_by_speaker(data, train_fraction=0.5):
    """First ``train_fraction`` of the (sorted) speakers train, the rest are held out."""
    classes = data.classes
    n_train = int(round(train_fraction * len(classes)))
    if not 2 <= n_train < len(classes):
        raise ValueError(f"train fraction {train_fraction} leaves no usable split of {len(classes)} speakers")
    train_mask = np.isin(data.labels, classes[:n_train])
    return (
        LabeledVectors(data.X[train_mask], data.labels[train_mask]),
        LabeledVectors(data.X[~train_mask], data.labels[~train_mask]),
    )


def all_pairs_trials(labels):
    """Every unordered pair (i < j); returns (enroll idx, test idx, is_target)."""
    labels = np.asarray(labels)
    e, t = np.triu_indices(len(labels), k=1)
    return e, t, labels[e] == labels[t]


class Backend:
    """Whitening, length normalization and PLDA fitted on projected training data."""

    def __init__(self, train, plda_iters=10, seed=0):
        self.whitener = fit_whitener(train.X)
        Z = length_normalize(self.whitener(train.X))
        self.plda = train_plda_em(LabeledVectors(Z, train.labels), plda_iters, seed)

    def transform(self, X):
        return length_normalize(self.whitener(X))

    def score(self, enroll, test):
        return plda_score_pairs(self.plda, self.transform(enroll), self.transform(test))


def evaluate_projection(proj, train, test, plda_iters=10, seed=0):
    """Projects, fits the backend on train, scores all held-out pairs."""
    ptrain = LabeledVectors(apply_projection(proj, train.X), train.labels)
    Ytest = apply_projection(proj, test.X)
    backend = Backend(ptrain, plda_iters, seed)
    e, t, is_target = all_pairs_trials(test.labels)
    scores = backend.score(Ytest[e], Ytest[t])
    result = metrics.evaluate(scores, is_target)
    result["n_target"] = int(is_target.sum())
    result["n_nontarget"] = int((~is_target).sum())
    return result


def compare_projections(train, test, dim, nda_cfg=NdaConfig(), plda_iters=10, seed=0, projections=None):
    """Runs the LDA and NDA branches on the same data.

    Args:
      projections: optional {"LDA": Projection, "NDA": Projection} overriding
        the trained ones.

    Returns:
      dict with per-branch metrics and the relative EER/minDCF improvement of
      NDA over LDA (positive = NDA better).
    """
    projections = dict(projections or {})
    if "LDA" not in projections:
        projections["LDA"] = fit_lda(train, dim)
    if "NDA" not in projections:
        projections["NDA"] = fit_nda(train, dim, nda_cfg)
    rows = {name: evaluate_projection(projections[name], train, test, plda_iters, seed) for name in ("LDA", "NDA")}
    rel = {}
    for key in ("eer", "min_dcf08", "min_dcf10"):
        base = rows["LDA"][key]
        rel[key] = (base - rows["NDA"][key]) / base if base > 0 else 0.0
    return {"rows": rows, "relative_improvement": rel}


def format_report(report, prefix=""):
    lines = [f"{'System':<16}{'EER [%]':>9}{'minDCF08':>10}{'minDCF10':>10}"]
    for name, r in report["rows"].items():
        lines.append(
            f"{prefix + name:<16}{100 * r['eer']:>9.2f}{r['min_dcf08']:>10.3f}{r['min_dcf10']:>10.3f}"
        )
    rel = report["relative_improvement"]
    lines.append(
        f"{'NDA rel. gain':<16}{100 * rel['eer']:>8.1f}%{100 * rel['min_dcf08']:>9.1f}%{100 * rel['min_dcf10']:>9.1f}%"
    )
    return "\n".join(lines)
