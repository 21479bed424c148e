"""Scoring, ROC/AUC, recall, thresholds and report files.

Anomalous is the positive class throughout; a sample is flagged when its
score is ``>=`` the threshold.
"""

import csv
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.stats import rankdata

from .errors import ConfigurationError, MetricError
from .objectives import anomaly_score, normalize_scores, per_sample_l1

log = logging.getLogger(__name__)

HISTOGRAM_BINS = 50
ETA_SWEEP = tuple(round(0.1 * k, 1) for k in range(1, 10))


def _split(scores, labels):
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape:
        raise ValueError(f"scores {s.shape} and labels {y.shape} differ in shape")
    return s, y


def _require_both(y):
    if y.all() or not y.any():
        raise MetricError("metric undefined: need both normal and anomalous samples")


def roc_auc(scores, labels):
    """Rank-based AUC and the ROC curve.

    AUC is the probability that a random anomalous sample outscores a random
    normal one, ties counting one half. ``roc_points`` is a list of
    ``(fpr, tpr, threshold)`` starting at ``(0, 0, inf)`` and sweeping every
    distinct score downwards to ``(1, 1, min score)``.
    """
    s, y = _split(scores, labels)
    _require_both(y)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    # twice the Mann-Whitney U: an exact integer because average ranks are half-integers
    u2 = 2.0 * rankdata(s)[y].sum() - n_pos * (n_pos + 1)
    auc = u2 / (2.0 * n_pos * n_neg)
    return auc, roc_curve(s, y)


def roc_curve(scores, labels):
    s, y = _split(scores, labels)
    _require_both(y)
    n_pos, n_neg = y.sum(), (~y).sum()
    thresholds = np.unique(s)[::-1]
    points = [(0.0, 0.0, float("inf"))]
    for t in thresholds:
        flagged = s >= t
        points.append((float((flagged & ~y).sum() / n_neg), float((flagged & y).sum() / n_pos), float(t)))
    return points


def recall_at_threshold(scores, labels, threshold):
    s, y = _split(scores, labels)
    if not y.any():
        raise MetricError("recall undefined: no anomalous samples")
    return float((s[y] >= threshold).sum() / y.sum())


def select_threshold(scores, labels, policy="youden"):
    """Pick a decision threshold.

    ``"youden"`` maximizes TPR - FPR over the ROC points and returns the
    midpoint between the optimal score and the next lower distinct score;
    among equally good points the lowest threshold (highest recall) wins.
    ``("fixed", q)`` or ``"fixed:q"`` returns the q-quantile of the normal
    scores.
    """
    s, y = _split(scores, labels)
    kind, q = _parse_policy(policy)
    if kind == "fixed":
        if y.all():
            raise MetricError("fixed-quantile threshold needs normal samples")
        return float(np.quantile(s[~y], q))
    _require_both(y)
    distinct = np.unique(s)[::-1]
    if distinct.size == 1:
        log.warning("all scores equal %g; threshold degenerates to that value", distinct[0])
        return float(distinct[0])
    points = roc_curve(s, y)[1:]
    j = np.array([tpr - fpr for fpr, tpr, _ in points])
    best = int(np.flatnonzero(j == j.max())[-1])
    if best + 1 < distinct.size:
        return float((distinct[best] + distinct[best + 1]) / 2)
    return float(distinct[best])


def _parse_policy(policy):
    if isinstance(policy, (tuple, list)):
        kind, q = policy[0], float(policy[1])
    elif isinstance(policy, str) and policy.startswith("fixed"):
        kind, _, rest = policy.partition(":")
        q = float(rest) if rest else 0.95
    else:
        kind, q = policy, None
    if kind not in ("youden", "fixed"):
        raise ConfigurationError(f"unknown threshold policy {policy!r}")
    if kind == "fixed" and not 0.0 <= q <= 1.0:
        raise ConfigurationError(f"quantile must lie in [0, 1], got {q}")
    return kind, q


def per_class_recall(scores, labels, class_tags, threshold):
    """Recall restricted to the anomalous records of each class tag."""
    s, y = _split(scores, labels)
    tags = np.asarray(class_tags, dtype=object)
    out = {}
    for tag in sorted({t for t, a in zip(tags, y) if a}):
        sel = y & (tags == tag)
        if not sel.any():
            warnings.warn(f"class {tag!r} has no anomalous records; omitted")
            continue
        out[str(tag)] = recall_at_threshold(s[sel], y[sel], threshold)
    return out


def aggregate_image_score(patch_scores, how="max"):
    p = np.asarray(patch_scores, dtype=np.float64)
    if p.size == 0:
        raise ValueError("no patch scores to aggregate")
    if how == "max":
        return float(p.max())
    if how == "mean":
        return float(p.mean())
    raise ConfigurationError(f"unknown aggregation {how!r}")


# --- scoring -------------------------------------------------------------------

@dataclass
class AnomalyScoreVector:
    sample_ids: list
    raw: np.ndarray
    normalized: np.ndarray
    labels: np.ndarray
    class_tags: list
    a_g: np.ndarray = None
    a_d: np.ndarray = None
    eta: float = 0.9

    def __len__(self):
        return len(self.raw)

    def rows(self):
        for i in range(len(self)):
            yield (self.sample_ids[i], self.class_tags[i], int(self.labels[i]),
                   float(self.raw[i]), float(self.normalized[i]))


@torch.no_grad()
def score_components(generator, discriminator, images, batch_size=64):
    """Per-sample reconstruction distance ``a_g`` and feature distance ``a_d``."""
    was = generator.training, discriminator.training
    generator.eval()
    discriminator.eval()
    try:
        a_g, a_d = [], []
        dtype = next(generator.parameters()).dtype
        for start in range(0, len(images), batch_size):
            x = torch.as_tensor(images[start:start + batch_size]).to(dtype)
            x_hat = generator(x)
            f = discriminator(torch.cat([x, x_hat])).features
            a_g.append(per_sample_l1(x, x_hat))
            a_d.append(per_sample_l1(f[:len(x)], f[len(x):]))
        return torch.cat(a_g).double().numpy(), torch.cat(a_d).double().numpy()
    finally:
        generator.train(was[0])
        discriminator.train(was[1])


def score_dataset(generator, discriminator, dataset, eta=0.9, batch_size=64, reference=None,
                  aggregate=None):
    """Score every sample of an :class:`~densegan.data.ImageSet`.

    With ``aggregate="max"`` (or ``"mean"``) patch scores sharing a source
    group are pooled into one image score before normalization.
    """
    cfg = generator.config
    expected = (cfg.input_channels, cfg.input_size, cfg.input_size)
    if tuple(dataset.images.shape[1:]) != expected:
        raise ConfigurationError(
            f"model expects samples of shape {expected}, dataset has {tuple(dataset.images.shape[1:])}")
    a_g, a_d = score_components(generator, discriminator, dataset.images, batch_size)
    raw = np.asarray(anomaly_score(a_g, a_d, eta), dtype=np.float64)
    ids, labels, tags = list(dataset.ids), np.asarray(dataset.labels), list(dataset.class_tags)
    if aggregate:
        order = list(dict.fromkeys(dataset.groups))
        index = {g: k for k, g in enumerate(order)}
        buckets = [[] for _ in order]
        for k, g in enumerate(dataset.groups):
            buckets[index[g]].append(k)
        raw = np.array([aggregate_image_score(raw[b], aggregate) for b in buckets])
        a_g = np.array([aggregate_image_score(a_g[b], aggregate) for b in buckets])
        a_d = np.array([aggregate_image_score(a_d[b], aggregate) for b in buckets])
        labels = np.array([labels[b].max() for b in buckets])
        tags = [tags[b[0]] for b in buckets]
        ids = order
    return AnomalyScoreVector(ids, raw, normalize_scores(raw, reference), labels, tags, a_g, a_d, eta)


# --- reports -------------------------------------------------------------------

@dataclass
class EvalReport:
    auc: float
    recall: float
    threshold: float
    threshold_policy: str
    eta: float
    roc_points: list
    histogram_edges: list
    histogram: dict
    per_class_recall: dict
    n_normal: int
    n_anomalous: int
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        d["roc_points"] = [[fpr, tpr, _enc(t)] for fpr, tpr, t in self.roc_points]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["roc_points"] = [(fpr, tpr, _dec(t)) for fpr, tpr, t in d["roc_points"]]
        return cls(**d)


def _enc(t):
    return "inf" if t == float("inf") else t


def _dec(t):
    return float("inf") if t == "inf" else t


def score_histogram(normalized, labels, bins=HISTOGRAM_BINS):
    edges = np.linspace(0.0, 1.0, bins + 1)
    y = np.asarray(labels).astype(bool)
    v = np.asarray(normalized)
    hist = {
        "normal": np.histogram(v[~y], edges)[0].tolist(),
        "anomalous": np.histogram(v[y], edges)[0].tolist(),
    }
    return edges.tolist(), hist


def eta_sweep(vector, etas=ETA_SWEEP):
    """AUC of the blended score for each eta, recomputed from the components."""
    y = np.asarray(vector.labels)
    return {f"{eta:g}": float(roc_auc(anomaly_score(vector.a_g, vector.a_d, eta), y)[0]) for eta in etas}


def evaluate(vector, policy="youden"):
    """Build an :class:`EvalReport` from normalized scores.

    When the vector carries its score components, ``extra["eta_sweep_auc"]``
    holds the AUC for eta = 0.1, 0.2, ..., 0.9.
    """
    s, y = vector.normalized, np.asarray(vector.labels)
    auc, points = roc_auc(s, y)
    threshold = select_threshold(s, y, policy)
    edges, hist = score_histogram(s, y)
    return EvalReport(
        auc=float(auc),
        recall=recall_at_threshold(s, y, threshold),
        threshold=threshold,
        threshold_policy=policy if isinstance(policy, str) else f"{policy[0]}:{policy[1]}",
        eta=float(vector.eta),
        roc_points=points,
        histogram_edges=edges,
        histogram=hist,
        per_class_recall=per_class_recall(s, y, vector.class_tags, threshold),
        n_normal=int((y == 0).sum()),
        n_anomalous=int((y == 1).sum()),
        extra={"eta_sweep_auc": eta_sweep(vector)} if vector.a_g is not None else {},
    )


def emit_report(report, out_dir, vector=None, plots=True, prefix="report"):
    """Write ``<prefix>.json``, ROC and histogram CSVs, the score CSV (when
    ``vector`` is given) and PNG plots into ``out_dir``. Returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"report": out / f"{prefix}.json", "roc": out / f"{prefix}_roc.csv",
             "histogram": out / f"{prefix}_histogram.csv"}
    paths["report"].write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    with open(paths["roc"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fpr", "tpr", "threshold"])
        w.writerows([fpr, tpr, _enc(t)] for fpr, tpr, t in report.roc_points)
    with open(paths["histogram"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_low", "bin_high", "normal", "anomalous"])
        e = report.histogram_edges
        for k in range(len(e) - 1):
            w.writerow([e[k], e[k + 1], report.histogram["normal"][k], report.histogram["anomalous"][k]])
    if vector is not None:
        paths["scores"] = out / f"{prefix}_scores.csv"
        write_scores(vector, paths["scores"])
    if plots:
        paths.update(_plot(report, out, prefix))
    return paths


def write_scores(vector, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "class_tag", "label", "raw_score", "normalized_score"])
        w.writerows(vector.rows())


def load_report(path):
    return EvalReport.from_dict(json.loads(Path(path).read_text()))


def _plot(report, out, prefix):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    e = np.asarray(report.histogram_edges)
    centers, width = (e[:-1] + e[1:]) / 2, np.diff(e)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.bar(centers, report.histogram["normal"], width, alpha=0.6, label="normal")
    ax.bar(centers, report.histogram["anomalous"], width, alpha=0.6, label="anomalous")
    ax.axvline(report.threshold, color="k", lw=1, ls="--")
    ax.set_xlabel("normalized anomaly score")
    ax.set_ylabel("count")
    ax.legend()
    fig.tight_layout()
    hist_png = out / f"{prefix}_histogram.png"
    fig.savefig(hist_png, dpi=100)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(4, 4))
    pts = np.array([(p[0], p[1]) for p in report.roc_points])
    ax.plot(pts[:, 0], pts[:, 1], label=f"AUC = {report.auc:.3f}")
    ax.plot([0, 1], [0, 1], color="grey", lw=0.8, ls=":")
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.legend(loc="lower right")
    fig.tight_layout()
    roc_png = out / f"{prefix}_roc.png"
    fig.savefig(roc_png, dpi=100)
    plt.close(fig)
    return {"histogram_png": hist_png, "roc_png": roc_png}
