"""Transformer encoder trained from scratch with a masked-token objective.

The encoder is a small post-layernorm transformer implemented directly in
numpy with hand-written backpropagation, in 64-bit floats throughout. That
keeps training bit-reproducible for a fixed seed and lets the analytic
gradients be checked against finite differences.

A ``[CLS]`` token is always prepended (during pre-training and at embedding
time), and its final-layer state is the window embedding.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import erf
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .validation import check_token_matrix

PAD_ID, MASK_ID, CLS_ID, UNK_ID = 0, 1, 2, 3

_LN_EPS = 1e-12
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


@dataclass
class EncoderConfig:
    vocab_size: int
    embed_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    feedforward_dim: int | None = None
    max_seq_len: int = 21  # window length + 1 for [CLS]
    mask_fraction: float = 0.15
    learning_rate: float = 0.5
    epochs: int = 20
    batch_size: int = 64
    momentum: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.feedforward_dim is None:
            self.feedforward_dim = 4 * self.embed_dim
        if self.embed_dim % self.num_heads != 0:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )
        if not (0.0 < self.mask_fraction < 1.0):
            raise ValueError(f"mask_fraction must be in (0, 1), got {self.mask_fraction}")
        if self.vocab_size <= UNK_ID:
            raise ValueError("vocab_size must cover the special tokens")


def init_params(config: EncoderConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Random initialization: N(0, 0.02) weights, zero biases, unit LN scales."""
    d, f, v = config.embed_dim, config.feedforward_dim, config.vocab_size
    p: dict[str, np.ndarray] = {}

    def w(shape):
        return rng.normal(0.0, 0.02, size=shape)

    p["token_embed"] = w((v, d))
    p["pos_embed"] = w((config.max_seq_len, d))
    for i in range(config.num_layers):
        pre = f"layers.{i}."
        for name in ("wq", "wk", "wv", "wo"):
            p[pre + f"attn.{name}"] = w((d, d))
        for name in ("bq", "bk", "bv", "bo"):
            p[pre + f"attn.{name}"] = np.zeros(d)
        p[pre + "ln1.g"] = np.ones(d)
        p[pre + "ln1.b"] = np.zeros(d)
        p[pre + "ffn.w1"] = w((d, f))
        p[pre + "ffn.b1"] = np.zeros(f)
        p[pre + "ffn.w2"] = w((f, d))
        p[pre + "ffn.b2"] = np.zeros(d)
        p[pre + "ln2.g"] = np.ones(d)
        p[pre + "ln2.b"] = np.zeros(d)
    p["mlm.w"] = w((d, v))
    p["mlm.b"] = np.zeros(v)
    return p


def _gelu(x):
    """Exact gelu; returns (value, phi) with phi cached for the backward pass."""
    phi = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    return x * phi, phi


def _gelu_grad(x, phi):
    return phi + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI


def _layernorm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    ivar = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = xc * ivar
    return g * xhat + b, (xhat, ivar)


def _layernorm_backward(dy, cache, g):
    xhat, ivar = cache
    dg = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    db = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * g
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = ivar * (dxhat - m1 - xhat * m2)
    return dx, dg, db


def _softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def forward(params: dict, config: EncoderConfig, input_ids) -> tuple[np.ndarray, np.ndarray, dict]:
    """Run the encoder over a batch of id sequences.

    Returns per-position vocabulary logits, the [CLS] embedding (final-layer
    state at position 0), and the activation cache needed for ``backward``.
    """
    ids = np.atleast_2d(np.asarray(input_ids))
    check_token_matrix(ids, config.vocab_size)
    B, S = ids.shape
    if S > config.max_seq_len:
        raise ValueError(f"sequence length {S} exceeds max_seq_len {config.max_seq_len}")
    H = config.num_heads
    dh = config.embed_dim // H
    scale = 1.0 / np.sqrt(dh)

    x = params["token_embed"][ids] + params["pos_embed"][:S]
    cache: dict = {"ids": ids, "x0": x, "layers": []}
    for i in range(config.num_layers):
        pre = f"layers.{i}."
        lc: dict = {"x_in": x}
        q = x @ params[pre + "attn.wq"] + params[pre + "attn.bq"]
        k = x @ params[pre + "attn.wk"] + params[pre + "attn.bk"]
        v = x @ params[pre + "attn.wv"] + params[pre + "attn.bv"]
        qh = np.ascontiguousarray(q.reshape(B, S, H, dh).transpose(0, 2, 1, 3))
        kh = np.ascontiguousarray(k.reshape(B, S, H, dh).transpose(0, 2, 1, 3))
        vh = np.ascontiguousarray(v.reshape(B, S, H, dh).transpose(0, 2, 1, 3))
        att = _softmax(qh @ kh.transpose(0, 1, 3, 2) * scale)
        ctx = (att @ vh).transpose(0, 2, 1, 3).reshape(B, S, config.embed_dim)
        attn_out = ctx @ params[pre + "attn.wo"] + params[pre + "attn.bo"]
        r1 = x + attn_out
        n1, ln1_cache = _layernorm(r1, params[pre + "ln1.g"], params[pre + "ln1.b"])
        ffn_pre = n1 @ params[pre + "ffn.w1"] + params[pre + "ffn.b1"]
        ffn_act, ffn_phi = _gelu(ffn_pre)
        ffn_out = ffn_act @ params[pre + "ffn.w2"] + params[pre + "ffn.b2"]
        r2 = n1 + ffn_out
        x, ln2_cache = _layernorm(r2, params[pre + "ln2.g"], params[pre + "ln2.b"])
        lc.update(
            qh=qh, kh=kh, vh=vh, att=att, ctx=ctx, n1=n1,
            ln1=ln1_cache, ln2=ln2_cache, ffn_pre=ffn_pre, ffn_act=ffn_act, ffn_phi=ffn_phi,
        )
        cache["layers"].append(lc)
    cache["x_final"] = x
    logits = x @ params["mlm.w"] + params["mlm.b"]
    return logits, x[:, 0, :].copy(), cache


def backward(
    params: dict,
    config: EncoderConfig,
    cache: dict,
    dlogits: np.ndarray | None = None,
    dcls: np.ndarray | None = None,
) -> dict[str, np.ndarray]:
    """Backpropagate gradients of a scalar loss through the encoder.

    ``dlogits`` is the loss gradient at the MLM logits (B, S, V) and/or
    ``dcls`` at the [CLS] embedding (B, D); either may be None.
    """
    ids = cache["ids"]
    B, S = ids.shape
    H = config.num_heads
    dh = config.embed_dim // H
    scale = 1.0 / np.sqrt(dh)
    grads: dict[str, np.ndarray] = {}

    D = config.embed_dim
    dx = np.zeros((B, S, D))
    if dlogits is not None:
        xf = cache["x_final"]
        grads["mlm.w"] = xf.reshape(-1, D).T @ dlogits.reshape(-1, dlogits.shape[-1])
        grads["mlm.b"] = dlogits.sum(axis=(0, 1))
        dx += dlogits @ params["mlm.w"].T
    else:
        grads["mlm.w"] = np.zeros_like(params["mlm.w"])
        grads["mlm.b"] = np.zeros_like(params["mlm.b"])
    if dcls is not None:
        dx[:, 0, :] += dcls

    def _mat_grad(a, b):
        # sum over batch and position: (B,S,M) x (B,S,N) -> (M,N)
        return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])

    for i in reversed(range(config.num_layers)):
        pre = f"layers.{i}."
        lc = cache["layers"][i]
        dr2, grads[pre + "ln2.g"], grads[pre + "ln2.b"] = _layernorm_backward(
            dx, lc["ln2"], params[pre + "ln2.g"]
        )
        dn1 = dr2.copy()
        dffn_out = dr2
        grads[pre + "ffn.w2"] = _mat_grad(lc["ffn_act"], dffn_out)
        grads[pre + "ffn.b2"] = dffn_out.sum(axis=(0, 1))
        dffn_pre = (dffn_out @ params[pre + "ffn.w2"].T) * _gelu_grad(
            lc["ffn_pre"], lc["ffn_phi"]
        )
        grads[pre + "ffn.w1"] = _mat_grad(lc["n1"], dffn_pre)
        grads[pre + "ffn.b1"] = dffn_pre.sum(axis=(0, 1))
        dn1 += dffn_pre @ params[pre + "ffn.w1"].T
        dr1, grads[pre + "ln1.g"], grads[pre + "ln1.b"] = _layernorm_backward(
            dn1, lc["ln1"], params[pre + "ln1.g"]
        )
        dx_in = dr1.copy()
        dattn_out = dr1
        grads[pre + "attn.wo"] = _mat_grad(lc["ctx"], dattn_out)
        grads[pre + "attn.bo"] = dattn_out.sum(axis=(0, 1))
        dctx = np.ascontiguousarray(
            (dattn_out @ params[pre + "attn.wo"].T).reshape(B, S, H, dh).transpose(0, 2, 1, 3)
        )
        att, vh = lc["att"], lc["vh"]
        datt = dctx @ vh.transpose(0, 1, 3, 2)
        dvh = att.transpose(0, 1, 3, 2) @ dctx
        dscores = att * (datt - (datt * att).sum(axis=-1, keepdims=True))
        dqh = (dscores @ lc["kh"]) * scale
        dkh = (dscores.transpose(0, 1, 3, 2) @ lc["qh"]) * scale
        dq = dqh.transpose(0, 2, 1, 3).reshape(B, S, D)
        dk = dkh.transpose(0, 2, 1, 3).reshape(B, S, D)
        dv = dvh.transpose(0, 2, 1, 3).reshape(B, S, D)
        x_in = lc["x_in"]
        for name, dmat in (("wq", dq), ("wk", dk), ("wv", dv)):
            grads[pre + f"attn.{name}"] = _mat_grad(x_in, dmat)
            grads[pre + f"attn.b{name[1]}"] = dmat.sum(axis=(0, 1))
        dx_in += dq @ params[pre + "attn.wq"].T
        dx_in += dk @ params[pre + "attn.wk"].T
        dx_in += dv @ params[pre + "attn.wv"].T
        dx = dx_in

    grads["pos_embed"] = np.zeros_like(params["pos_embed"])
    grads["pos_embed"][:S] = dx.sum(axis=0)
    grads["token_embed"] = np.zeros_like(params["token_embed"])
    np.add.at(grads["token_embed"], ids, dx)
    return grads


@dataclass
class MaskedExample:
    """One window prepared for masked-token training."""

    input_ids: np.ndarray      # (length + 1,) with [CLS] at position 0
    mask_positions: np.ndarray  # indices into input_ids (never 0)
    target_ids: np.ndarray      # original tokens at the masked positions


def apply_mask(window_tokens, mask_fraction: float, seed: int) -> MaskedExample:
    """Replace floor(p * l) distinct sensor-token positions with [MASK].

    Position 0 ([CLS], prepended here) and [PAD] positions are never
    selected. Deterministic for a fixed (window, seed).
    """
    tokens = np.asarray(window_tokens, dtype=np.int64)
    if tokens.ndim != 1:
        raise ValueError("apply_mask expects a single window")
    if not (0.0 < mask_fraction < 1.0):
        raise ValueError(f"mask_fraction must be in (0, 1), got {mask_fraction}")
    length = len(tokens)
    n_mask = int(np.floor(mask_fraction * length))
    if n_mask == 0:
        raise ValueError(
            f"floor({mask_fraction} * {length}) = 0 masked positions: no training signal"
        )
    eligible = np.nonzero(tokens != PAD_ID)[0]
    if len(eligible) < n_mask:
        raise ValueError("fewer non-pad positions than requested masks")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(eligible, size=n_mask, replace=False)
    chosen.sort()
    input_ids = np.concatenate(([CLS_ID], tokens))
    positions = chosen + 1  # shift for the prepended [CLS]
    targets = input_ids[positions].copy()
    input_ids[positions] = MASK_ID
    return MaskedExample(input_ids, positions, targets)


def mlm_loss(logits, targets, mask_positions) -> float:
    """Mean negative log-probability of the true tokens at masked positions."""
    logits = np.asarray(logits, dtype=np.float64)
    positions = np.asarray(mask_positions, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.int64)
    if positions.size == 0:
        raise ValueError("mask set is empty")
    if logits.ndim != 2:
        raise ValueError("mlm_loss expects (seq_len, vocab) logits for one sequence")
    sel = logits[positions]
    logp = sel - sel.max(axis=-1, keepdims=True)
    logp = logp - np.log(np.exp(logp).sum(axis=-1, keepdims=True))
    return float(-logp[np.arange(len(positions)), targets].mean())


def _batch_mlm_loss_and_grad(logits, rows, cols, targets):
    """Loss plus d(loss)/d(logits) over all masked positions in a batch."""
    total = len(rows)
    sel = logits[rows, cols]
    shifted = sel - sel.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    loss = float(-logp[np.arange(total), targets].mean())
    dsel = np.exp(logp)
    dsel[np.arange(total), targets] -= 1.0
    dlogits = np.zeros_like(logits)
    dlogits[rows, cols] = dsel / total
    return loss, dlogits


def _mask_batch(tokens, mask_fraction, rng):
    """Vectorized masking of a (B, l) token batch; returns inputs and targets."""
    B, length = tokens.shape
    n_mask = int(np.floor(mask_fraction * length))
    if n_mask == 0:
        raise ValueError("mask_fraction too small for this window length")
    order = np.argsort(rng.random((B, length)), axis=1)
    pad_free = tokens != PAD_ID
    input_ids = np.concatenate(
        (np.full((B, 1), CLS_ID, dtype=np.int64), tokens.astype(np.int64)), axis=1
    )
    rows_list, cols_list = [], []
    for b in range(B):
        picks = order[b][pad_free[b][order[b]]][:n_mask]
        rows_list.append(np.full(n_mask, b, dtype=np.int64))
        cols_list.append(np.sort(picks) + 1)
    rows = np.concatenate(rows_list)
    cols = np.concatenate(cols_list)
    targets = input_ids[rows, cols].copy()
    input_ids[rows, cols] = MASK_ID
    return input_ids, rows, cols, targets


class _SGD:
    """Plain stochastic gradient descent, with optional momentum."""

    def __init__(self, learning_rate: float, momentum: float = 0.0):
        self.lr = learning_rate
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict) -> None:
        for name, g in grads.items():
            if self.momentum > 0.0:
                v = self.velocity.get(name)
                v = self.momentum * v + g if v is not None else g.copy()
                self.velocity[name] = v
                params[name] -= self.lr * v
            else:
                params[name] -= self.lr * g


def train_mlm(token_windows, config: EncoderConfig) -> tuple[dict, list[float]]:
    """Pre-train the encoder with the masked-token objective.

    Returns the trained parameters and the per-epoch mean loss trace.
    Fully deterministic for a fixed config (seed included).
    """
    X = check_token_matrix(token_windows, config.vocab_size)
    if len(X) == 0:
        raise ValueError("no training windows")
    if X.shape[1] + 1 > config.max_seq_len:
        raise ValueError(
            f"window length {X.shape[1]} + [CLS] exceeds max_seq_len {config.max_seq_len}"
        )
    rng = np.random.default_rng(config.seed)
    params = init_params(config, rng)
    optimizer = _SGD(config.learning_rate, config.momentum)
    trace: list[float] = []
    n = len(X)
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, n, config.batch_size):
            batch = X[perm[start : start + config.batch_size]]
            input_ids, rows, cols, targets = _mask_batch(batch, config.mask_fraction, rng)
            logits, _, cache = forward(params, config, input_ids)
            loss, dlogits = _batch_mlm_loss_and_grad(logits, rows, cols, targets)
            if not np.isfinite(loss):
                raise RuntimeError(
                    f"non-finite MLM loss at epoch {epoch}, batch {n_batches}: {loss}"
                )
            grads = backward(params, config, cache, dlogits=dlogits)
            optimizer.step(params, grads)
            epoch_loss += loss
            n_batches += 1
        trace.append(epoch_loss / n_batches)
    return params, trace


def embed_all(params: dict, config: EncoderConfig, token_windows, batch_size: int = 256) -> np.ndarray:
    """One [CLS] embedding per window, order preserved, no masking."""
    X = check_token_matrix(token_windows, config.vocab_size)
    out = np.empty((len(X), config.embed_dim))
    for start in range(0, len(X), batch_size):
        batch = X[start : start + batch_size].astype(np.int64)
        input_ids = np.concatenate(
            (np.full((len(batch), 1), CLS_ID, dtype=np.int64), batch), axis=1
        )
        _, cls, _ = forward(params, config, input_ids)
        out[start : start + len(batch)] = cls
    return out


_PARAMS_MAGIC = b"PDLE"
_PARAMS_VERSION = 1


def save_params(path, params: dict, config: EncoderConfig) -> None:
    """Self-describing binary: version header, shape table, float64 LE data."""
    names = sorted(params)
    header = {
        "format_version": _PARAMS_VERSION,
        "config": asdict(config),
        "tensors": [{"name": n, "shape": list(params[n].shape)} for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PARAMS_MAGIC)
        fh.write(struct.pack("<II", _PARAMS_VERSION, len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(params[n], dtype="<f8").tobytes())


def load_params(path) -> tuple[dict, EncoderConfig]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _PARAMS_MAGIC:
            raise ValueError(f"not an encoder parameters file: magic {magic!r}")
        version, header_len = struct.unpack("<II", fh.read(8))
        if version != _PARAMS_VERSION:
            raise ValueError(f"unsupported parameters format version {version}")
        header = json.loads(fh.read(header_len).decode("utf-8"))
        params = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(shape)
            params[entry["name"]] = data.astype(np.float64).copy()
    config = EncoderConfig(**header["config"])
    return params, config


def save_loss_trace(path, trace) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,loss\n")
        for epoch, loss in enumerate(trace):
            fh.write(f"{epoch},{loss!r}\n")


class MaskedSequenceEncoder(BaseEstimator, TransformerMixin):
    """Sklearn-style wrapper: fit on token windows, transform to embeddings.

    ``X`` is an integer matrix of shape (n_windows, window_length) of
    vocabulary ids (without [CLS]; it is prepended internally).
    """

    def __init__(
        self,
        vocab_size=None,
        embed_dim=64,
        num_layers=2,
        num_heads=4,
        feedforward_dim=None,
        mask_fraction=0.15,
        learning_rate=0.5,
        epochs=20,
        batch_size=64,
        momentum=0.0,
        seed=0,
    ):
        self.vocab_size = vocab_size
        self.embed_dim = embed_dim
        self.num_layers = num_layers
        self.num_heads = num_heads
        self.feedforward_dim = feedforward_dim
        self.mask_fraction = mask_fraction
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.momentum = momentum
        self.seed = seed

    def _make_config(self, X) -> EncoderConfig:
        vocab_size = self.vocab_size
        if vocab_size is None:
            vocab_size = int(X.max()) + 1
            warnings.warn(
                f"vocab_size not given; inferred {vocab_size} from the data", stacklevel=2
            )
        return EncoderConfig(
            vocab_size=vocab_size,
            embed_dim=self.embed_dim,
            num_layers=self.num_layers,
            num_heads=self.num_heads,
            feedforward_dim=self.feedforward_dim,
            max_seq_len=X.shape[1] + 1,
            mask_fraction=self.mask_fraction,
            learning_rate=self.learning_rate,
            epochs=self.epochs,
            batch_size=self.batch_size,
            momentum=self.momentum,
            seed=self.seed,
        )

    def fit(self, X, y=None):
        X = check_token_matrix(X, self.vocab_size)
        self.config_ = self._make_config(X)
        self.params_, self.loss_trace_ = train_mlm(X, self.config_)
        return self

    def transform(self, X):
        check_is_fitted(self, "params_")
        X = check_token_matrix(X, self.config_.vocab_size)
        return embed_all(self.params_, self.config_, X)
