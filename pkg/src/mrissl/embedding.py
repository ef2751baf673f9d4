"""Feature-space analysis: 2-D t-SNE scatter plus KMeans clustering."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from itertools import permutations

import numpy as np
from scipy.optimize import linear_sum_assignment
from sklearn.cluster import KMeans
from sklearn.manifold import TSNE
from sklearn.metrics import adjusted_rand_score


@dataclass
class EmbeddingResult:
    coordinates: np.ndarray  # (N, 2)
    clusters: np.ndarray  # (N,)
    labels: np.ndarray  # (N,)
    agreement: float  # adjusted Rand index between clusters and labels
    matched_accuracy: float  # accuracy under the best one-to-one cluster -> label map
    paths: tuple[str, ...] = ()

    def to_csv(self, class_names=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["path", "x", "y", "label", "cluster"])
        for i in range(len(self.labels)):
            label = class_names[self.labels[i]] if class_names is not None else int(self.labels[i])
            path = self.paths[i] if self.paths else ""
            w.writerow([path, f"{self.coordinates[i, 0]:.6f}", f"{self.coordinates[i, 1]:.6f}", label,
                        int(self.clusters[i])])
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "n": int(len(self.labels)),
            "k": int(len(np.unique(self.clusters))),
            "adjusted_rand_index": self.agreement,
            "matched_accuracy": self.matched_accuracy,
        }


def matched_accuracy(clusters: np.ndarray, labels: np.ndarray) -> float:
    """Fraction correct after the best one-to-one relabelling of clusters (Hungarian)."""
    cs, ls = np.unique(clusters), np.unique(labels)
    table = np.zeros((len(cs), len(ls)), dtype=np.int64)
    np.add.at(table, (np.searchsorted(cs, clusters), np.searchsorted(ls, labels)), 1)
    rows, cols = linear_sum_assignment(-table)
    return float(table[rows, cols].sum() / len(labels))


def brute_force_matched_accuracy(clusters: np.ndarray, labels: np.ndarray) -> float:
    """Exhaustive version of :func:`matched_accuracy`; only for a handful of clusters."""
    cs, ls = list(np.unique(clusters)), list(np.unique(labels))
    targets = ls + [None] * max(0, len(cs) - len(ls))
    best = 0
    for perm in permutations(targets, len(cs)):
        mapping = dict(zip(cs, perm))
        best = max(best, sum(mapping[c] == l for c, l in zip(clusters, labels)))
    return best / len(labels)


def embed_and_cluster(features: np.ndarray, labels: np.ndarray, k: int = 17, seed: int = 0,
                      perplexity: float = 30.0, max_iter: int = 1000, paths=()) -> EmbeddingResult:
    """t-SNE to two dimensions and KMeans with ``k`` clusters on the raw features.

    Perplexity is capped at ``n - 1`` so small sets still embed.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    n = len(features)
    if n == 0:
        raise ValueError("no samples to embed")
    if n < k:
        raise ValueError(f"{n} samples is fewer than k={k} clusters")
    if n > 1:
        tsne = TSNE(n_components=2, perplexity=min(perplexity, n - 1), max_iter=max(max_iter, 250),
                    method="exact", init="pca", random_state=seed)
        coords = tsne.fit_transform(features)
    else:
        coords = np.zeros((1, 2))
    clusters = KMeans(n_clusters=k, n_init=10, random_state=seed).fit_predict(features)
    return EmbeddingResult(
        coordinates=coords,
        clusters=clusters,
        labels=labels,
        agreement=float(adjusted_rand_score(labels, clusters)),
        matched_accuracy=matched_accuracy(clusters, labels),
        paths=tuple(paths),
    )
