"""Baselines and metrics: Lloyd k-means, majority-vote cluster labeling,
F1 scores, bootstrap confidence intervals, rater-agreement kappas, and the
label hierarchy with its level-up operation.

All metric functions are pure; k-means is deterministic per seed.
"""

from __future__ import annotations

import json
import warnings
from collections import Counter
from dataclasses import dataclass
from importlib import resources

import numpy as np
from scipy.optimize import linear_sum_assignment
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.utils.validation import check_is_fitted

from .validation import check_embeddings

OTHER_LABEL = "Other"


class LloydKMeans(BaseEstimator, ClusterMixin):
    """Lloyd iterations from k-means++-style seeding, run to a fixed point.

    Converges when no assignment changes (or at ``max_iters``). An empty
    cluster is re-seeded to the point farthest from its assigned centroid,
    which keeps exactly k non-empty clusters.
    """

    def __init__(self, n_clusters=20, seed=0, max_iters=100):
        self.n_clusters = n_clusters
        self.seed = seed
        self.max_iters = max_iters

    def _seed_centroids(self, X, rng):
        n = len(X)
        centroids = np.empty((self.n_clusters, X.shape[1]))
        centroids[0] = X[rng.integers(n)]
        closest = np.full(n, np.inf)
        for j in range(1, self.n_clusters):
            d = ((X - centroids[j - 1]) ** 2).sum(axis=1)
            closest = np.minimum(closest, d)
            total = closest.sum()
            if total == 0.0:
                centroids[j] = X[rng.integers(n)]
                continue
            centroids[j] = X[rng.choice(n, p=closest / total)]
        return centroids

    def fit(self, X, y=None):
        X = check_embeddings(X)
        if self.n_clusters > len(X):
            raise ValueError(f"n_clusters {self.n_clusters} > n_samples {len(X)}")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        rng = np.random.default_rng(self.seed)
        centroids = self._seed_centroids(X, rng)
        labels = np.full(len(X), -1, dtype=np.int64)
        for it in range(self.max_iters):
            d = ((X[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
            new_labels = d.argmin(axis=1)
            assigned_d = d[np.arange(len(X)), new_labels]
            for j in range(self.n_clusters):
                members = new_labels == j
                if members.any():
                    centroids[j] = X[members].mean(axis=0)
                else:
                    farthest = int(assigned_d.argmax())
                    centroids[j] = X[farthest]
                    new_labels[farthest] = j
                    assigned_d[farthest] = 0.0  # keep other empties off this point
            if (new_labels == labels).all():
                break
            labels = new_labels
        self.cluster_centers_ = centroids
        self.labels_ = labels
        self.n_iter_ = it + 1
        return self

    def predict(self, X):
        check_is_fitted(self, "cluster_centers_")
        X = check_embeddings(X)
        d = ((X[:, None, :] - self.cluster_centers_[None, :, :]) ** 2).sum(axis=2)
        return d.argmin(axis=1)


def kmeans(embeddings, k: int, seed: int = 0, max_iters: int = 100) -> np.ndarray:
    """Cluster ids for each embedding row under deterministic Lloyd k-means."""
    return LloydKMeans(n_clusters=k, seed=seed, max_iters=max_iters).fit(embeddings).labels_


@dataclass
class ClusterLabelEntry:
    label: str
    votes: int
    total: int


@dataclass
class ClusterLabelMap:
    """Per-cluster mapped label with its vote count."""

    entries: dict[int, ClusterLabelEntry]

    def label_of(self, cluster_id: int) -> str:
        return self.entries[int(cluster_id)].label

    def to_json(self) -> dict:
        return {
            str(c): {"label": e.label, "votes": e.votes, "total": e.total}
            for c, e in sorted(self.entries.items())
        }

    @classmethod
    def from_json(cls, blob: dict) -> "ClusterLabelMap":
        return cls(
            {
                int(c): ClusterLabelEntry(e["label"], e["votes"], e["total"])
                for c, e in blob.items()
            }
        )


def majority_vote_mapping(cluster_ids, truth_labels, n_clusters: int | None = None) -> ClusterLabelMap:
    """Map each cluster to the modal truth label of its member windows.

    Ties break toward the globally more frequent label, then
    lexicographically. A cluster with no members maps to "Other" with zero
    votes.
    """
    cluster_ids = np.asarray(cluster_ids)
    truth_labels = list(truth_labels)
    if len(cluster_ids) != len(truth_labels):
        raise ValueError("cluster_ids and truth_labels must be parallel")
    if n_clusters is None:
        n_clusters = int(cluster_ids.max()) + 1 if len(cluster_ids) else 0
    global_counts = Counter(truth_labels)
    entries = {}
    for c in range(n_clusters):
        members = [truth_labels[i] for i in np.nonzero(cluster_ids == c)[0]]
        if not members:
            entries[c] = ClusterLabelEntry(OTHER_LABEL, 0, 0)
            continue
        counts = Counter(members)
        best = max(counts.items(), key=lambda kv: (kv[1], global_counts[kv[0]], _rev(kv[0])))
        entries[c] = ClusterLabelEntry(best[0], best[1], len(members))
    return ClusterLabelMap(entries)


class _rev(str):
    """Reverses lexicographic comparison so max() picks the smallest string."""

    def __lt__(self, other):
        return str.__gt__(self, other)

    def __gt__(self, other):
        return str.__lt__(self, other)


def _per_class_f1(predicted, truth):
    classes = sorted(set(truth) | set(predicted))
    index = {c: i for i, c in enumerate(classes)}
    p = np.array([index[x] for x in predicted])
    t = np.array([index[x] for x in truth])
    f1 = {}
    support = {}
    for c, i in index.items():
        tp = int(((p == i) & (t == i)).sum())
        fp = int(((p == i) & (t != i)).sum())
        fn = int(((p != i) & (t == i)).sum())
        denom = 2 * tp + fp + fn
        f1[c] = 2 * tp / denom if denom else 0.0
        support[c] = tp + fn
    return f1, support


def f1_scores(predicted_labels, truth_labels, mode: str = "weighted") -> float:
    """Per-class F1 aggregated by truth support (weighted) or unweighted (macro).

    Classes that appear only in the predictions contribute an F1 of 0 to the
    macro average and nothing to the weighted one (zero support).
    """
    predicted = list(predicted_labels)
    truth = list(truth_labels)
    if not predicted or len(predicted) != len(truth):
        raise ValueError("need equal-length, non-empty label sequences")
    if mode not in ("weighted", "macro"):
        raise ValueError(f"mode must be 'weighted' or 'macro', got {mode!r}")
    f1, support = _per_class_f1(predicted, truth)
    if mode == "macro":
        return float(np.mean([f1[c] for c in f1]))
    total = sum(support.values())
    return float(sum(f1[c] * support[c] for c in f1) / total)


def bootstrap_ci(per_day_metric_fn, test_days, replicates: int = 1000, seed: int = 0):
    """Percentile bootstrap over test days.

    Resamples the day list with replacement, re-evaluates
    ``per_day_metric_fn(days)`` per replicate, and returns
    (mean, lower95, upper95) at the (2.5, 97.5) percentiles.
    """
    days = list(test_days)
    if replicates < 100:
        raise ValueError(f"need at least 100 replicates, got {replicates}")
    if len(days) < 2:
        warnings.warn("fewer than 2 test days: interval degenerates to a point", stacklevel=2)
        v = float(per_day_metric_fn(days))
        return v, v, v
    rng = np.random.default_rng(seed)
    values = np.empty(replicates)
    for r in range(replicates):
        resampled = [days[i] for i in rng.integers(0, len(days), size=len(days))]
        values[r] = per_day_metric_fn(resampled)
    lo, hi = np.percentile(values, [2.5, 97.5])
    return float(values.mean()), float(lo), float(hi)


def cohens_kappa(pairs) -> float:
    """Two-rater chance-corrected agreement.

    With total chance agreement (p_e = 1, a single shared category), the
    score is defined as 1 when observed agreement is also total, else 0.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("need at least one rating pair")
    n = len(pairs)
    a_counts = Counter(a for a, _ in pairs)
    b_counts = Counter(b for _, b in pairs)
    p_o = sum(1 for a, b in pairs if a == b) / n
    categories = set(a_counts) | set(b_counts)
    p_e = sum((a_counts[c] / n) * (b_counts[c] / n) for c in categories)
    if p_e >= 1.0 - 1e-12:
        return 1.0 if p_o >= 1.0 - 1e-12 else 0.0
    return (p_o - p_e) / (1.0 - p_e)


def fleiss_kappa(counts) -> float:
    """Multi-rater agreement over an items x categories count matrix.

    Every row must sum to the same rater count n >= 2. When a single
    category receives every rating, agreement is trivially total and the
    score is defined as 1 (with a warning).
    """
    table = np.asarray(counts, dtype=np.float64)
    if table.ndim != 2 or table.size == 0:
        raise ValueError("counts must be a non-empty 2-d matrix")
    row_sums = table.sum(axis=1)
    n = row_sums[0]
    if not (row_sums == n).all():
        raise ValueError(f"inconsistent row sums: {sorted(set(row_sums.tolist()))}")
    if n < 2:
        raise ValueError("need at least 2 ratings per item")
    N = len(table)
    p_cat = table.sum(axis=0) / (N * n)
    p_i = ((table * table).sum(axis=1) - n) / (n * (n - 1))
    p_bar = p_i.mean()
    p_e = float((p_cat * p_cat).sum())
    if p_e >= 1.0 - 1e-12:
        warnings.warn("single category used everywhere: kappa defined as 1.0", stacklevel=2)
        return 1.0
    return float((p_bar - p_e) / (1.0 - p_e))


class LabelHierarchy:
    """Tree of annotation labels; every non-root has exactly one parent."""

    def __init__(self, roots, parent: dict[str, str]):
        self.roots = list(roots)
        self.parent = dict(parent)
        self.nodes = set(self.roots) | set(self.parent) | set(self.parent.values())
        for root in self.roots:
            if root in self.parent:
                raise ValueError(f"root {root!r} must not have a parent")
        for child, par in self.parent.items():
            if par not in self.nodes:
                raise ValueError(f"parent {par!r} of {child!r} is not a node")
        # Acyclicity: walking up from any node must reach a root.
        for node in self.nodes:
            seen = set()
            cur = node
            while cur not in self.roots:
                if cur in seen or cur not in self.parent:
                    raise ValueError(f"hierarchy is not rooted at {node!r}")
                seen.add(cur)
                cur = self.parent[cur]

    def __contains__(self, label: str) -> bool:
        return label in self.nodes

    def level_up(self, label: str) -> str:
        if label not in self.nodes:
            raise ValueError(f"unknown label: {label!r}")
        return self.parent.get(label, label)

    def to_json(self) -> dict:
        return {"roots": self.roots, "parent": self.parent}

    @classmethod
    def from_json(cls, blob: dict) -> "LabelHierarchy":
        return cls(blob["roots"], blob["parent"])

    @classmethod
    def load(cls, path) -> "LabelHierarchy":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))

    def as_tree(self) -> dict:
        """Nested {label, children} structure for UI consumption."""
        children: dict[str, list[str]] = {}
        for child, par in self.parent.items():
            children.setdefault(par, []).append(child)

        def build(node):
            return {"label": node, "children": [build(c) for c in sorted(children.get(node, []))]}

        return {"roots": [build(r) for r in self.roots]}


def default_hierarchy() -> LabelHierarchy:
    """The hierarchy shipped with the package (editable data file)."""
    ref = resources.files("pdlkit.data").joinpath("label_hierarchy.json")
    return LabelHierarchy.from_json(json.loads(ref.read_text(encoding="utf-8")))


def level_up(label: str, hierarchy: LabelHierarchy) -> str:
    return hierarchy.level_up(label)


def hungarian_accuracy(cluster_ids, truth_labels) -> float:
    """Accuracy under the best one-to-one cluster-to-label matching."""
    cluster_ids = np.asarray(cluster_ids)
    truth = list(truth_labels)
    classes = sorted(set(truth))
    index = {c: i for i, c in enumerate(classes)}
    n_clusters = int(cluster_ids.max()) + 1
    table = np.zeros((n_clusters, len(classes)), dtype=np.int64)
    for cid, label in zip(cluster_ids, truth):
        table[int(cid), index[label]] += 1
    rows, cols = linear_sum_assignment(-table)
    return float(table[rows, cols].sum() / len(truth))


def unified_casas_labels() -> dict[str, dict[str, str]]:
    """Editable per-dataset mapping from raw CASAS labels to unified categories."""
    ref = resources.files("pdlkit.data").joinpath("casas_label_map.json")
    return json.loads(ref.read_text(encoding="utf-8"))


def unify_truth_labels(labels, dataset: str) -> list[str]:
    """Apply the per-dataset unification table; unknown labels map to Other."""
    table = unified_casas_labels().get(dataset, {})
    out = []
    for lab in labels:
        if lab == "No Label":
            out.append(lab)
        else:
            out.append(table.get(lab, OTHER_LABEL))
    return out
