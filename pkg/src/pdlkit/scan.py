"""Clustering-head fine-tuning with the neighbor-consistency objective.

The pre-trained encoder keeps training, but the masked-token head is
replaced by a k-way softmax head. The loss pulls each window and its
nearest neighbors toward the same cluster while an entropy term keeps the
batch assignment distribution from collapsing onto few clusters.

The entropy term here is written so that *minimizing* the combined loss
drives the batch distribution toward uniform: ``entropy_term`` returns
sum(P log P) (the negative entropy), bounded in [-ln k, 0].
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.utils.validation import check_is_fitted

from .encoder import CLS_ID, EncoderConfig, _SGD, backward, forward
from .validation import check_prob_vector, check_token_matrix

_LOG_CLAMP = 1e-12


@dataclass
class ClusterHead:
    """Softmax projection from the [CLS] state to k cluster logits."""

    w: np.ndarray  # (embed_dim, k)
    b: np.ndarray  # (k,)

    @property
    def k(self) -> int:
        return self.w.shape[1]

    def __post_init__(self):
        if self.k < 2:
            raise ValueError(f"need at least 2 clusters, got {self.k}")
        if not (np.isfinite(self.w).all() and np.isfinite(self.b).all()):
            raise ValueError("non-finite head weights")

    def save(self, path) -> None:
        blob = {"v": 1, "k": self.k, "w": self.w.tolist(), "b": self.b.tolist()}
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(blob, fh)

    @classmethod
    def load(cls, path) -> "ClusterHead":
        with open(path, "r", encoding="utf-8") as fh:
            blob = json.load(fh)
        return cls(np.array(blob["w"], dtype=np.float64), np.array(blob["b"], dtype=np.float64))


@dataclass
class ScanConfig:
    entropy_weight: float = 2.0
    epochs: int = 20
    learning_rate: float = 0.1
    batch_size: int = 64
    neighbors_per_anchor: int = 1
    momentum: float = 0.9
    restarts: int = 4        # random-head warmups; best probe loss continues
    warmup_epochs: int = 2   # training epochs per warmup candidate
    seed: int = 0

    def __post_init__(self):
        if self.entropy_weight < 0:
            raise ValueError("entropy_weight must be >= 0")
        if self.neighbors_per_anchor < 1:
            raise ValueError("neighbors_per_anchor must be >= 1")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")


def init_head(embed_dim: int, k: int, rng: np.random.Generator) -> ClusterHead:
    return ClusterHead(rng.normal(0.0, 0.02, size=(embed_dim, k)), np.zeros(k))


def _softmax_rows(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _head_probs(params, config, head, tokens):
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    input_ids = np.concatenate(
        (np.full((len(tokens), 1), CLS_ID, dtype=np.int64), tokens), axis=1
    )
    _, cls, cache = forward(params, config, input_ids)
    probs = _softmax_rows(cls @ head.w + head.b)
    return probs, cls, cache


def cluster_probs(params, config: EncoderConfig, head: ClusterHead, window_tokens) -> np.ndarray:
    """Softmax cluster-membership probabilities for one window."""
    probs, _, _ = _head_probs(params, config, head, window_tokens)
    return probs[0]


def consistency_loss(anchor_probs, neighbor_probs) -> float:
    """-log of the probability that the pair lands in the same cluster.

    That probability is the dot product of the two membership vectors,
    clamped at 1e-12 so degenerate disjoint one-hots stay finite.
    """
    pa = check_prob_vector(anchor_probs)
    pn = check_prob_vector(neighbor_probs)
    if pa.shape != pn.shape:
        raise ValueError("probability vectors must have the same length")
    return float(-np.log(max(float(np.dot(pa, pn)), _LOG_CLAMP)))


def entropy_term(mean_batch_probs) -> float:
    """sum(P log P) of the batch-mean assignment distribution (0 log 0 = 0).

    Bounded in [-ln k, 0]; the minimum is attained at the uniform
    distribution, so adding this term with positive weight and minimizing
    pushes assignments toward balance.
    """
    p = check_prob_vector(mean_batch_probs)
    nz = p[p > 0]
    return float(np.sum(nz * np.log(nz)))


def scan_loss(anchor_probs, neighbor_probs, entropy_weight: float) -> float:
    """Mean pair consistency loss + weighted entropy of the mean anchor probs."""
    pa = np.atleast_2d(np.asarray(anchor_probs, dtype=np.float64))
    pn = np.atleast_2d(np.asarray(neighbor_probs, dtype=np.float64))
    if pa.shape != pn.shape or len(pa) == 0:
        raise ValueError("need a non-empty batch of matching (anchor, neighbor) prob pairs")
    dots = np.clip((pa * pn).sum(axis=1), _LOG_CLAMP, None)
    cons = float(-np.log(dots).mean())
    return cons + entropy_weight * entropy_term(pa.mean(axis=0))


def scan_loss_and_grads(
    params: dict,
    config: EncoderConfig,
    head: ClusterHead,
    anchor_tokens,
    neighbor_tokens,
    entropy_weight: float,
):
    """Loss plus gradients w.r.t. head and encoder parameters for one batch."""
    pa, cls_a, cache_a = _head_probs(params, config, head, anchor_tokens)
    pn, cls_n, cache_n = _head_probs(params, config, head, neighbor_tokens)
    B = len(pa)

    raw_dots = (pa * pn).sum(axis=1)
    dots = np.clip(raw_dots, _LOG_CLAMP, None)
    cons = -np.log(dots).mean()
    mean_pa = pa.mean(axis=0)
    ent = entropy_term(mean_pa)
    loss = float(cons + entropy_weight * ent)

    live = (raw_dots > _LOG_CLAMP).astype(np.float64)  # clamp kills the gradient
    dpa = -(pn / dots[:, None]) * (live / B)[:, None]
    dpn = -(pa / dots[:, None]) * (live / B)[:, None]
    if entropy_weight > 0:
        with np.errstate(divide="ignore"):
            dmean = np.where(mean_pa > 0, np.log(mean_pa) + 1.0, 0.0)
        dpa = dpa + entropy_weight * dmean[None, :] / B

    dza = pa * (dpa - (dpa * pa).sum(axis=1, keepdims=True))
    dzn = pn * (dpn - (dpn * pn).sum(axis=1, keepdims=True))

    head_grads = {
        "w": cls_a.T @ dza + cls_n.T @ dzn,
        "b": dza.sum(axis=0) + dzn.sum(axis=0),
    }
    dcls_a = dza @ head.w.T
    dcls_n = dzn @ head.w.T
    enc_grads = backward(params, config, cache_a, dcls=dcls_a)
    for name, g in backward(params, config, cache_n, dcls=dcls_n).items():
        enc_grads[name] += g
    return loss, enc_grads, head_grads


@dataclass
class ClusterAssignment:
    window_id: int
    probs: np.ndarray
    cluster_id: int
    confidence: float


class AssignmentSet:
    """Columnar per-window cluster assignments (id, probs, argmax, max)."""

    def __init__(self, window_ids, probs):
        self.window_ids = np.asarray(window_ids, dtype=np.int64)
        self.probs = np.asarray(probs, dtype=np.float64)
        if len(self.window_ids) != len(self.probs):
            raise ValueError("column lengths disagree")
        self.cluster_ids = self.probs.argmax(axis=1)
        self.confidences = self.probs.max(axis=1)

    @property
    def k(self) -> int:
        return self.probs.shape[1]

    def __len__(self) -> int:
        return len(self.window_ids)

    def __getitem__(self, i: int) -> ClusterAssignment:
        return ClusterAssignment(
            int(self.window_ids[i]),
            self.probs[i],
            int(self.cluster_ids[i]),
            float(self.confidences[i]),
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def to_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for i in range(len(self)):
                rec = {
                    "window_id": int(self.window_ids[i]),
                    "cluster": int(self.cluster_ids[i]),
                    "confidence": float(self.confidences[i]),
                    "probs": [float(x) for x in self.probs[i]],
                }
                fh.write(json.dumps(rec, separators=(",", ":")) + "\n")

    @classmethod
    def from_jsonl(cls, path) -> "AssignmentSet":
        wids, probs = [], []
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                rec = json.loads(line)
                wids.append(rec["window_id"])
                probs.append(rec["probs"])
        if not wids:
            raise ValueError(f"no records in {path}")
        return cls(np.array(wids), np.array(probs))


def assign_all(
    params: dict,
    config: EncoderConfig,
    head: ClusterHead,
    token_windows,
    window_ids=None,
    batch_size: int = 256,
) -> AssignmentSet:
    """One assignment per window, including windows never seen in training."""
    X = check_token_matrix(token_windows, config.vocab_size)
    if window_ids is None:
        window_ids = np.arange(len(X), dtype=np.int64)
    probs = np.empty((len(X), head.k))
    for start in range(0, len(X), batch_size):
        batch_probs, _, _ = _head_probs(params, config, head, X[start : start + batch_size])
        probs[start : start + len(batch_probs)] = batch_probs
    return AssignmentSet(window_ids, probs)


class _ScanState:
    """One fine-tuning candidate: parameters, head, optimizers, rng stream."""

    def __init__(self, params, config, k, scan_config, seed):
        self.params = copy.deepcopy(params)
        self.rng = np.random.default_rng(seed)
        self.head = init_head(config.embed_dim, k, self.rng)
        self.enc_opt = _SGD(scan_config.learning_rate, scan_config.momentum)
        self.head_opt = _SGD(scan_config.learning_rate, scan_config.momentum)

    def train_epochs(self, config, X, nbrs, scan_config, n_epochs):
        n = len(X)
        npa = scan_config.neighbors_per_anchor
        for _ in range(n_epochs):
            perm = self.rng.permutation(n)
            for start in range(0, n, scan_config.batch_size):
                anchor_rows = np.repeat(perm[start : start + scan_config.batch_size], npa)
                picks = self.rng.integers(0, nbrs.shape[1], size=len(anchor_rows))
                neighbor_rows = nbrs[anchor_rows, picks]
                loss, enc_grads, head_grads = scan_loss_and_grads(
                    self.params, config, self.head, X[anchor_rows], X[neighbor_rows],
                    scan_config.entropy_weight,
                )
                if not np.isfinite(loss):
                    raise RuntimeError(f"non-finite SCAN loss: {loss}")
                self.enc_opt.step(self.params, enc_grads)
                self.head_opt.step({"w": self.head.w, "b": self.head.b}, head_grads)

    def probe_loss(self, config, X, nbrs, scan_config, max_probe=1024):
        """Objective on a fixed probe set; used to rank warmup candidates."""
        rows = np.arange(min(len(X), max_probe))
        pa, _, _ = _head_probs(self.params, config, self.head, X[rows])
        pn, _, _ = _head_probs(self.params, config, self.head, X[nbrs[rows, 0]])
        dots = np.clip((pa * pn).sum(axis=1), _LOG_CLAMP, None)
        cons = float(-np.log(dots).mean())
        return cons + scan_config.entropy_weight * entropy_term(pa.mean(axis=0))


def fine_tune_scan(
    params: dict,
    config: EncoderConfig,
    token_windows,
    neighbor_indices,
    k: int,
    scan_config: ScanConfig,
    window_ids=None,
) -> tuple[dict, ClusterHead, AssignmentSet]:
    """Fine-tune the encoder plus a fresh random head under the SCAN objective.

    ``neighbor_indices`` holds, for each window row, the positions of its
    nearest neighbors within ``token_windows``. Several random head
    initializations are warmed up briefly and the one with the lowest probe
    objective continues training: the head starts in a flat region where
    plain SGD occasionally falls into a collapsed or merged basin, and the
    probe loss cleanly separates those basins. The input parameters are not
    mutated. Deterministic for a fixed ``scan_config.seed``.
    """
    X = check_token_matrix(token_windows, config.vocab_size)
    nbrs = np.asarray(neighbor_indices, dtype=np.int64)
    if len(nbrs) != len(X):
        raise ValueError("neighbor_indices must have one row per window")

    warmup = min(scan_config.warmup_epochs, scan_config.epochs)
    best = None
    for r in range(scan_config.restarts):
        state = _ScanState(params, config, k, scan_config, scan_config.seed + 7919 * r)
        state.train_epochs(config, X, nbrs, scan_config, warmup)
        if scan_config.restarts == 1:
            best = state
            break
        loss = state.probe_loss(config, X, nbrs, scan_config)
        if best is None or loss < best_loss:
            best, best_loss = state, loss
    best.train_epochs(config, X, nbrs, scan_config, scan_config.epochs - warmup)

    assignments = assign_all(best.params, config, best.head, X, window_ids=window_ids)
    return best.params, best.head, assignments


class ScanClusterer(BaseEstimator, ClusterMixin):
    """Sklearn-style wrapper around the neighbor-consistency fine-tuning.

    Takes a fitted :class:`~pdlkit.encoder.MaskedSequenceEncoder`; ``fit``
    needs the token matrix plus precomputed neighbor row indices.
    """

    def __init__(
        self,
        encoder=None,
        n_clusters=20,
        entropy_weight=2.0,
        epochs=20,
        learning_rate=0.1,
        batch_size=64,
        neighbors_per_anchor=1,
        momentum=0.9,
        restarts=4,
        warmup_epochs=2,
        seed=0,
    ):
        self.encoder = encoder
        self.n_clusters = n_clusters
        self.entropy_weight = entropy_weight
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.neighbors_per_anchor = neighbors_per_anchor
        self.momentum = momentum
        self.restarts = restarts
        self.warmup_epochs = warmup_epochs
        self.seed = seed

    def fit(self, X, y=None, neighbors=None):
        if self.encoder is None or not hasattr(self.encoder, "params_"):
            raise ValueError("ScanClusterer needs a fitted MaskedSequenceEncoder")
        if neighbors is None:
            raise ValueError("fit requires neighbors=<(n, h) row-index array>")
        scan_config = ScanConfig(
            entropy_weight=self.entropy_weight,
            epochs=self.epochs,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            neighbors_per_anchor=self.neighbors_per_anchor,
            momentum=self.momentum,
            restarts=self.restarts,
            warmup_epochs=self.warmup_epochs,
            seed=self.seed,
        )
        self.config_ = self.encoder.config_
        self.params_, self.head_, assignments = fine_tune_scan(
            self.encoder.params_, self.config_, X, neighbors, self.n_clusters, scan_config
        )
        self.labels_ = assignments.cluster_ids
        self.proba_ = assignments.probs
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "params_")
        return assign_all(self.params_, self.config_, self.head_, X).probs

    def predict(self, X):
        return self.predict_proba(X).argmax(axis=1)
