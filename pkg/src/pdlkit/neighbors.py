"""Exact h-nearest-neighbor graph over window embeddings, cosine similarity.

Exact (not approximate) on purpose: CASAS-scale corpora fit a blocked
all-pairs computation, and a reproducible graph matters more than speed.
Ties are broken toward the lower window id so the graph is a pure function
of the embeddings.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

from .validation import check_embeddings


def cosine_similarity(a, b) -> float:
    """sim(a, b) = a.b / (||a|| ||b||); rejects zero-norm vectors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"expected two equal-length vectors, got {a.shape} and {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity undefined for a zero-norm vector")
    return float(np.dot(a, b) / (na * nb))


@dataclass
class NeighborGraph:
    """Per-node ordered neighbor lists with similarity scores.

    ``neighbor_ids[i]`` are window ids sorted by (similarity desc, id asc);
    ``indices[i]`` are the same neighbors as positions into the embedding
    matrix the graph was built from.
    """

    window_ids: np.ndarray   # (n,)
    neighbor_ids: np.ndarray  # (n, h)
    sims: np.ndarray          # (n, h)
    h: int

    def __post_init__(self):
        self._pos = {int(w): i for i, w in enumerate(self.window_ids)}

    def __len__(self) -> int:
        return len(self.window_ids)

    @property
    def indices(self) -> np.ndarray:
        lookup = self._pos
        return np.vectorize(lambda w: lookup[int(w)])(self.neighbor_ids).astype(np.int64)

    def neighbors_of(self, window_id: int) -> tuple[np.ndarray, np.ndarray]:
        i = self._pos[int(window_id)]
        return self.neighbor_ids[i], self.sims[i]

    def to_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for i in range(len(self)):
                rec = {
                    "window_id": int(self.window_ids[i]),
                    "neighbors": [int(x) for x in self.neighbor_ids[i]],
                    "sims": [float(x) for x in self.sims[i]],
                }
                fh.write(json.dumps(rec, separators=(",", ":")) + "\n")

    @classmethod
    def from_jsonl(cls, path) -> "NeighborGraph":
        wids, nbrs, sims = [], [], []
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                rec = json.loads(line)
                wids.append(rec["window_id"])
                nbrs.append(rec["neighbors"])
                sims.append(rec["sims"])
        if not wids:
            raise ValueError(f"no records in {path}")
        return cls(
            np.array(wids, dtype=np.int64),
            np.array(nbrs, dtype=np.int64),
            np.array(sims, dtype=np.float64),
            h=len(nbrs[0]),
        )


def build_knn(embeddings, h: int, window_ids=None, block_size: int = 256) -> NeighborGraph:
    """The h most cosine-similar other windows for every window, exactly.

    Ties at equal similarity go to the lower window id. If ``h`` is not
    smaller than the population, it degrades to population - 1 with a
    warning. Boundary ties are handled exactly: the candidate set always
    includes every vector tied with the h-th best before the final sort.
    """
    X = check_embeddings(embeddings)
    n = len(X)
    if n < 2:
        raise ValueError(f"need at least 2 embeddings, got {n}")
    if h < 1:
        raise ValueError(f"h must be >= 1, got {h}")
    if h >= n:
        warnings.warn(f"h={h} >= population {n}; using {n - 1} neighbors", stacklevel=2)
        h = n - 1
    if window_ids is None:
        window_ids = np.arange(n, dtype=np.int64)
    else:
        window_ids = np.asarray(window_ids, dtype=np.int64)
        if len(window_ids) != n:
            raise ValueError("window_ids length mismatch")

    norms = np.linalg.norm(X, axis=1)
    if (norms == 0.0).any():
        bad = int(np.nonzero(norms == 0.0)[0][0])
        raise ValueError(f"zero-norm embedding at row {bad}")
    unit = X / norms[:, None]

    # Columns ordered by ascending window id make a stable sort break ties
    # toward the lower id automatically.
    order = np.argsort(window_ids, kind="stable")
    unit_sorted = unit[order]
    ids_sorted = window_ids[order]

    out_ids = np.empty((n, h), dtype=np.int64)
    out_sims = np.empty((n, h), dtype=np.float64)
    for start in range(0, n, block_size):
        stop = min(start + block_size, n)
        sims_block = unit_sorted[start:stop] @ unit_sorted.T
        for r in range(stop - start):
            row = sims_block[r]
            row[start + r] = -np.inf  # no self-loop
            # h-th best value, then every candidate >= it (covers boundary ties)
            kth = np.partition(row, n - h)[n - h]
            cand = np.nonzero(row >= kth)[0]
            top = cand[np.argsort(-row[cand], kind="stable")][:h]
            out_ids[start + r] = ids_sorted[top]
            out_sims[start + r] = row[top]

    # Rows back in caller order.
    inv = np.empty(n, dtype=np.int64)
    inv[order] = np.arange(n)
    return NeighborGraph(window_ids, out_ids[inv], np.clip(out_sims[inv], -1.0, 1.0), h)
