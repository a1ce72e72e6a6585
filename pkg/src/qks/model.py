"""Query-based knowledge sharing head.

Spatial features are projected to width ``d``; ``m`` label-agnostic query
tokens are refined by an ``L``-layer decoder (self-attention among tokens,
cross-attention into the features, feed-forward); each label is then scored
by its best inner product against the refined tokens.

All heavy functions take a leading batch axis. The single-image helpers at
the bottom wrap them with ``B = 1``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import numerics as nx
from .numerics import Rng, ShapeError, Tensor, check_finite
from .prompt_pool import LabelEmbeddingTable

NORM_MODES = ("literal", "prenorm")
LOSS_KINDS = ("classification", "ranking")

# The key projection carries no bias: a key bias adds the same constant to a
# whole score row and cancels inside the softmax, so its gradient is zero.
_ATTN_PARAMS = ("wq", "bq", "wk", "wv", "bv", "wo", "bo")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    m: int = 12
    L: int = 7
    d: int = 512
    heads: int = 8
    ffn_mult: int = 4
    C: int = 768
    H: int = 14
    W: int = 14
    norm_mode: str = "prenorm"
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.m < 1:
            raise ConfigError(f"m must be >= 1, got {self.m}")
        if self.L < 1:
            raise ConfigError(f"L must be >= 1, got {self.L}")
        if self.heads < 1 or self.d % self.heads:
            raise ConfigError(f"d={self.d} not divisible by heads={self.heads}")
        if self.d % 2:
            raise ConfigError(f"d={self.d} must be even for 2D position encoding")
        if self.norm_mode not in NORM_MODES:
            raise ConfigError(f"norm_mode must be one of {NORM_MODES}")
        if min(self.C, self.H, self.W, self.ffn_mult) < 1:
            raise ConfigError("C, H, W and ffn_mult must be positive")

    @property
    def HW(self) -> int:
        return self.H * self.W

    @property
    def head_dim(self) -> int:
        return self.d // self.heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        fields = cls.__dataclass_fields__
        return cls(**{k: v for k, v in d.items() if k in fields})


@dataclass
class ScoreVector:
    scores: Tensor
    argmax_token: np.ndarray
    cross_attention_trace: Optional[Tensor] = None


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def param_shapes(cfg: ModelConfig) -> Dict[str, tuple]:
    d, hdim = cfg.d, cfg.d * cfg.ffn_mult
    shapes = {
        "proj.weight": (cfg.C, d),
        "proj.bias": (d,),
        "query_init": (cfg.m, d),
        "query_pos": (cfg.m, d),
    }
    for l in range(cfg.L):
        pre = f"layers.{l}."
        for block in ("self", "cross"):
            for k in _ATTN_PARAMS:
                shapes[f"{pre}{block}.{k}"] = (d, d) if k.startswith("w") else (d,)
        shapes[pre + "ffn.w1"] = (d, hdim)
        shapes[pre + "ffn.b1"] = (hdim,)
        shapes[pre + "ffn.w2"] = (hdim, d)
        shapes[pre + "ffn.b2"] = (d,)
        if cfg.norm_mode == "prenorm":
            for n in ("norm1", "norm2", "norm3"):
                shapes[f"{pre}{n}.gain"] = (d,)
                shapes[f"{pre}{n}.bias"] = (d,)
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> Dict[str, Tensor]:
    """Glorot-uniform weights, zero biases, unit norm gains and
    N(0, 0.02^2) query tokens and query position encodings."""
    rng = Rng(seed, 0x51)
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name in ("query_init", "query_pos"):
            params[name] = rng.normal(0.02, shape, dtype)
        elif leaf == "gain":
            params[name] = np.ones(shape, dtype=dtype)
        elif len(shape) == 2:
            lim = math.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-lim, lim, shape, dtype)
        else:
            params[name] = np.zeros(shape, dtype=dtype)
    return params


def spatial_position_encoding(H: int, W: int, d: int, dtype=np.float32) -> Tensor:
    """Fixed 2D sinusoidal encoding, ``HW x d``.

    The first ``d/2`` channels encode the row, the last ``d/2`` the column.
    Channel ``c`` of a half uses frequency ``10000^(-2k/(d/2))`` with
    ``k = c // 2``, sin on even ``c`` and cos on odd ``c``.
    """
    half = d // 2
    c = np.arange(half)
    freq = 1.0 / (10000.0 ** (2.0 * (c // 2) / half))

    def axis_code(pos):
        ang = pos[:, None] * freq[None, :]
        return np.where(c % 2 == 0, np.sin(ang), np.cos(ang))

    rows = axis_code(np.arange(H, dtype=np.float64))
    cols = axis_code(np.arange(W, dtype=np.float64))
    enc = np.empty((H, W, d))
    enc[:, :, :half] = rows[:, None, :]
    enc[:, :, half:] = cols[None, :, :]
    return enc.reshape(H * W, d).astype(dtype)


# ---------------------------------------------------------------------------
# attention block
# ---------------------------------------------------------------------------


def _mha_forward(xq, xk, xv, p, pre, heads):
    B, nq, d = xq.shape
    nk = xk.shape[1]
    dh = d // heads
    q = nx.linear(xq, p[pre + "wq"], p[pre + "bq"])
    k = nx.linear(xk, p[pre + "wk"])
    v = nx.linear(xv, p[pre + "wv"], p[pre + "bv"])
    qh = q.reshape(B, nq, heads, dh).transpose(0, 2, 1, 3)
    kh = k.reshape(B, nk, heads, dh).transpose(0, 2, 1, 3)
    vh = v.reshape(B, nk, heads, dh).transpose(0, 2, 1, 3)
    scale = 1.0 / math.sqrt(dh)
    s = qh @ kh.transpose(0, 1, 3, 2)
    s *= scale
    a = nx.softmax_rows_unchecked(s)
    o = (a @ vh).transpose(0, 2, 1, 3).reshape(B, nq, d)
    out = nx.linear(o, p[pre + "wo"], p[pre + "bo"])
    return out, a, (xq, xk, xv, qh, kh, vh, a, o, scale)


def _mha_backward(dout, cache, p, pre, grads):
    xq, xk, xv, qh, kh, vh, a, o, scale = cache
    B, nq, d = xq.shape
    nk = xk.shape[1]
    heads, dh = qh.shape[1], qh.shape[3]
    do, grads[pre + "wo"], grads[pre + "bo"] = nx.linear_backward(dout, o, p[pre + "wo"])
    doh = do.reshape(B, nq, heads, dh).transpose(0, 2, 1, 3)
    da = doh @ vh.transpose(0, 1, 3, 2)
    dvh = a.transpose(0, 1, 3, 2) @ doh
    ds = nx.softmax_rows_backward(da, a) * scale
    dqh = ds @ kh
    dkh = ds.transpose(0, 1, 3, 2) @ qh
    dq = dqh.transpose(0, 2, 1, 3).reshape(B, nq, d)
    dk = dkh.transpose(0, 2, 1, 3).reshape(B, nk, d)
    dv = dvh.transpose(0, 2, 1, 3).reshape(B, nk, d)
    dxq, grads[pre + "wq"], grads[pre + "bq"] = nx.linear_backward(dq, xq, p[pre + "wq"])
    dxk, grads[pre + "wk"], _ = nx.linear_backward(dk, xk, p[pre + "wk"], with_bias=False)
    dxv, grads[pre + "wv"], grads[pre + "bv"] = nx.linear_backward(dv, xv, p[pre + "wv"])
    return dxq, dxk, dxv


# ---------------------------------------------------------------------------
# decoder layer
# ---------------------------------------------------------------------------


def _norm(x, p, name, cfg):
    if cfg.norm_mode == "literal":
        return x, None
    return nx.layernorm_forward(x, p[name + ".gain"], p[name + ".bias"], cfg.ln_eps)


def _norm_backward(dy, cache, name, grads):
    if cache is None:
        return dy
    dx, grads[name + ".gain"], grads[name + ".bias"] = nx.layernorm_backward(dy, cache)
    return dx


def _layer_forward(Q, F, Fk, p, l, cfg):
    """One decoder layer on a batch. ``Fk`` is ``F + spatial_pos``."""
    pre = f"layers.{l}."
    qpos = p["query_pos"]

    n1, c1 = _norm(Q, p, pre + "norm1", cfg)
    x1 = n1 + qpos
    sa, a_self, csa = _mha_forward(x1, x1, n1, p, pre + "self.", cfg.heads)
    Q1 = Q + sa

    n2, c2 = _norm(Q1, p, pre + "norm2", cfg)
    ca, a_cross, cca = _mha_forward(n2 + qpos, Fk, F, p, pre + "cross.", cfg.heads)
    Q2 = Q1 + ca

    n3, c3 = _norm(Q2, p, pre + "norm3", cfg)
    h = nx.linear(n3, p[pre + "ffn.w1"], p[pre + "ffn.b1"])
    g, cdf = nx.gelu_forward(h)
    Q3 = Q2 + nx.linear(g, p[pre + "ffn.w2"], p[pre + "ffn.b2"])

    cache = (c1, csa, c2, cca, c3, n3, h, g, cdf)
    return Q3, a_cross, cache


def _layer_backward(dQ3, cache, p, l, grads):
    """Return ``(dQ, dF, dFk)`` and fill ``grads`` for this layer."""
    pre = f"layers.{l}."
    c1, csa, c2, cca, c3, n3, h, g, cdf = cache

    dg, grads[pre + "ffn.w2"], grads[pre + "ffn.b2"] = nx.linear_backward(dQ3, g, p[pre + "ffn.w2"])
    dh = nx.gelu_backward(dg, h, cdf)
    dn3, grads[pre + "ffn.w1"], grads[pre + "ffn.b1"] = nx.linear_backward(dh, n3, p[pre + "ffn.w1"])
    dQ2 = dQ3 + _norm_backward(dn3, c3, pre + "norm3", grads)

    dxq, dFk, dF = _mha_backward(dQ2, cca, p, pre + "cross.", grads)
    dqpos = dxq.sum(axis=0)
    dQ1 = dQ2 + _norm_backward(dxq, c2, pre + "norm2", grads)

    dx1q, dx1k, dn1 = _mha_backward(dQ1, csa, p, pre + "self.", grads)
    dx1 = dx1q + dx1k
    dqpos = dqpos + dx1.sum(axis=0)
    dQ = dQ1 + _norm_backward(dn1 + dx1, c1, pre + "norm1", grads)
    return dQ, dF, dFk, dqpos


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _loss_masks(targets, train_mask):
    targets = np.asarray(targets, dtype=bool)
    train_mask = np.asarray(train_mask, dtype=bool)
    if targets.ndim == 1:
        targets = targets[None]
    if np.any(targets & ~train_mask):
        raise ValueError("positives must be a subset of the training labels")
    pos = targets
    neg = ~targets & train_mask
    return pos, neg


def classification_loss_batch(scores, targets, train_mask):
    """Per-image sigmoid cross-entropy on raw scores.

    Returns ``(loss_per_image, dloss/dscores)``; labels outside
    ``train_mask`` contribute nothing and receive zero gradient.
    """
    s = np.atleast_2d(scores)
    pos, neg = _loss_masks(targets, train_mask)
    if np.any(~(pos | neg).any(axis=1)):
        raise ValueError("classification loss needs at least one positive or negative label")
    loss = np.where(pos, nx.softplus(-s), 0.0) + np.where(neg, nx.softplus(s), 0.0)
    sig = nx.sigmoid(s)
    grad = np.where(pos, sig - 1.0, 0.0) + np.where(neg, sig, 0.0)
    return loss.sum(axis=1), grad.astype(s.dtype)


def ranking_loss_batch(scores, targets, train_mask):
    """Mean over (positive, negative) pairs of ``max(0, 1 + s_n - s_p)``."""
    s = np.atleast_2d(scores)
    pos, neg = _loss_masks(targets, train_mask)
    npos, nneg = pos.sum(axis=1), neg.sum(axis=1)
    if np.any(npos == 0) or np.any(nneg == 0):
        raise ValueError("ranking loss needs at least one positive and one negative label")
    # margin[b, p, n] = 1 + s_n - s_p
    margin = 1.0 + s[:, None, :] - s[:, :, None]
    pair = pos[:, :, None] & neg[:, None, :]
    active = pair & (margin > 0)
    w = (1.0 / (npos * nneg)).astype(s.dtype)
    loss = np.where(active, margin, 0.0).sum(axis=(1, 2)) * w
    act = active.astype(s.dtype) * w[:, None, None]
    grad = act.sum(axis=1) - act.sum(axis=2)
    return loss, grad.astype(s.dtype)


def _index_mask(n, idx):
    mask = np.zeros(n, dtype=bool)
    mask[np.asarray(list(idx), dtype=int)] = True
    return mask


def _raw_scores(scores):
    return scores.scores if isinstance(scores, ScoreVector) else np.asarray(scores)


def classification_loss(scores, positives, seen):
    """Loss and score-gradient for one image.

    ``positives`` and ``seen`` are label index collections; negatives are the
    seen labels that are not positive. Unseen labels get zero gradient.
    """
    s = _raw_scores(scores)
    loss, grad = classification_loss_batch(
        s[None], _index_mask(s.size, positives), _index_mask(s.size, seen)
    )
    return float(loss[0]), grad[0]


def ranking_loss(scores, positives, seen):
    s = _raw_scores(scores)
    loss, grad = ranking_loss_batch(
        s[None], _index_mask(s.size, positives), _index_mask(s.size, seen)
    )
    return float(loss[0]), grad[0]


_LOSSES = {"classification": classification_loss_batch, "ranking": ranking_loss_batch}


# ---------------------------------------------------------------------------
# the head
# ---------------------------------------------------------------------------


class QksHead:
    """Parameters plus the fixed spatial encoding for one configuration."""

    def __init__(self, cfg: ModelConfig, params: Dict[str, Tensor]):
        self.cfg = cfg
        self.params = params
        dtype = params["query_init"].dtype
        self.spatial_pos = spatial_position_encoding(cfg.H, cfg.W, cfg.d, dtype)
        expected = param_shapes(cfg)
        for name, shape in expected.items():
            if name not in params:
                raise ConfigError(f"missing parameter {name}")
            if params[name].shape != shape:
                raise ShapeError(f"{name}: expected {shape}, got {params[name].shape}")

    @classmethod
    def initialize(cls, cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> "QksHead":
        return cls(cfg, init_params(cfg, seed, dtype))

    @property
    def dtype(self):
        return self.params["query_init"].dtype

    def _check_input(self, x):
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 2:
            x = x[None]
        if x.ndim != 3 or x.shape[1:] != (self.cfg.HW, self.cfg.C):
            raise ShapeError(
                f"features must be (B, {self.cfg.HW}, {self.cfg.C}), got {x.shape}"
            )
        return check_finite(x, "input features")

    def project(self, x):
        x = self._check_input(x)
        return nx.linear(x, self.params["proj.weight"], self.params["proj.bias"])

    def extract(self, F, keep_caches=False):
        """Run the decoder on projected features ``F`` (B, HW, d)."""
        p, cfg = self.params, self.cfg
        B = F.shape[0]
        Fk = F + self.spatial_pos
        Q = np.broadcast_to(p["query_init"], (B, cfg.m, cfg.d)).copy()
        attn, caches = [], []
        for l in range(cfg.L):
            Q, a, cache = _layer_forward(Q, F, Fk, p, l, cfg)
            attn.append(a)
            if keep_caches:
                caches.append(cache)
        check_finite(Q, "query tokens")
        return Q, attn, caches

    def forward(self, x, labels: LabelEmbeddingTable | Tensor, trace: bool = False):
        """Scores for a batch. Returns ``(scores (B, n), argmax (B, n),
        trace (B, L, heads, m, HW) or None)``."""
        F = self.project(x)
        Q, attn, _ = self.extract(F)
        T = _label_vectors(labels, self.dtype)
        sc, arg = _share(Q, T)
        tr = np.stack(attn, axis=1) if trace else None
        return sc, arg, tr

    def loss_and_grads(self, x, labels, targets, train_mask, loss_kind="classification"):
        """Batch-mean loss and gradients for every trainable parameter.

        ``targets`` is (B, n_labels) boolean, ``train_mask`` (n_labels,)
        selects the labels that take part in the loss.
        """
        if loss_kind not in _LOSSES:
            raise ValueError(f"unknown loss kind {loss_kind!r}")
        p, cfg = self.params, self.cfg
        x = self._check_input(x)
        B = x.shape[0]
        train_mask = np.asarray(train_mask, dtype=bool)
        cols = np.flatnonzero(train_mask)
        T = _label_vectors(labels, self.dtype)[cols]
        targets = np.asarray(targets, dtype=bool).reshape(B, -1)[:, cols]

        F = nx.linear(x, p["proj.weight"], p["proj.bias"])
        Q, _, caches = self.extract(F, keep_caches=True)
        sc, arg = _share(Q, T)
        per_image, dsc = _LOSSES[loss_kind](sc, targets, np.ones(cols.size, bool))
        loss = per_image.mean()
        check_finite(np.asarray(loss), "loss")
        dsc = (dsc / B).astype(self.dtype)

        grads: Dict[str, Tensor] = {}
        # only the winning token of each label receives the score gradient
        dS = np.zeros((B, cfg.m, cols.size), dtype=self.dtype)
        np.put_along_axis(dS, arg[:, None, :], dsc[:, None, :], axis=1)
        dQ = dS @ T
        dF = np.zeros_like(F)
        dqpos = np.zeros_like(p["query_pos"])
        for l in reversed(range(cfg.L)):
            dQ, dFl, dFkl, dqp = _layer_backward(dQ, caches[l], p, l, grads)
            dF += dFl + dFkl
            dqpos += dqp
        grads["query_init"] = dQ.sum(axis=0)
        grads["query_pos"] = dqpos
        _, grads["proj.weight"], grads["proj.bias"] = nx.linear_backward(dF, x, p["proj.weight"])
        return float(loss), grads


def _label_vectors(labels, dtype):
    T = labels.vectors if isinstance(labels, LabelEmbeddingTable) else labels
    return np.asarray(T, dtype=dtype)


def _share(Q, T):
    if Q.shape[-1] != T.shape[-1]:
        raise ShapeError(f"token width {Q.shape[-1]} != label width {T.shape[-1]}")
    S = Q @ T.T  # (B, m, n)
    arg = S.argmax(axis=1)  # first maximum: ties go to the smallest token index
    sc = np.take_along_axis(S, arg[:, None, :], axis=1)[:, 0, :]
    return sc, arg


# ---------------------------------------------------------------------------
# single-image API
# ---------------------------------------------------------------------------


def project_features(raw: Tensor, params: Dict[str, Tensor]) -> Tensor:
    w = params["proj.weight"]
    raw = np.asarray(raw, dtype=w.dtype)
    if raw.shape[-1] != w.shape[0]:
        raise ShapeError(f"features have {raw.shape[-1]} channels, projection expects {w.shape[0]}")
    return nx.linear(raw, w, params["proj.bias"])


def decoder_layer(q_prev, feats, params, layer: int, cfg: ModelConfig):
    """Apply decoder layer ``layer`` to one image's tokens ``(m, d)`` and
    projected features ``(HW, d)``. Returns the new tokens and the
    cross-attention weights ``(heads, m, HW)``."""
    dtype = params["query_init"].dtype
    q_prev = np.asarray(q_prev, dtype=dtype)
    feats = np.asarray(feats, dtype=dtype)
    if q_prev.shape != (cfg.m, cfg.d) or feats.shape != (cfg.HW, cfg.d):
        raise ShapeError(f"decoder_layer got tokens {q_prev.shape} and features {feats.shape}")
    spos = spatial_position_encoding(cfg.H, cfg.W, cfg.d, dtype)
    Q, a, _ = _layer_forward(q_prev[None], feats[None], (feats + spos)[None], params, layer, cfg)
    return Q[0], a[0]


def extract_knowledge(feats, params, cfg: ModelConfig):
    """Tokens after all ``L`` layers and the stacked cross-attention trace
    ``(L, heads, m, HW)``."""
    head = QksHead(cfg, params)
    Q, attn, _ = head.extract(np.asarray(feats, dtype=head.dtype)[None])
    return Q[0], np.stack([a[0] for a in attn])


def share_knowledge(q_tokens, labels) -> ScoreVector:
    Q = np.asarray(q_tokens)
    T = _label_vectors(labels, Q.dtype)
    sc, arg = _share(Q[None], T)
    return ScoreVector(sc[0], arg[0])


def forward(features, labels, params, cfg: ModelConfig, trace: bool = False) -> ScoreVector:
    head = QksHead(cfg, params)
    sc, arg, tr = head.forward(features, labels, trace=trace)
    return ScoreVector(sc[0], arg[0], tr[0] if trace else None)


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------


def gradient_check(cfg: ModelConfig, seed: int = 0, loss_kind: str = "classification",
                   h: float = 1e-5, tol: float = 1e-4, batch: int = 2,
                   n_labels: int = 6, n_seen: int = 4, query_std: float = None):
    """Finite-difference check of ``loss_and_grads`` on a random float64
    problem. Returns the per-tensor report of :func:`numerics.grad_check`.

    ``query_std`` overrides the N(0, 0.02^2) query initialization; the
    literal mode needs larger tokens, otherwise first-layer self-attention
    gradients sit near the finite-difference noise floor.
    """
    params = init_params(cfg, seed, np.float64)
    rng = np.random.default_rng(seed)
    if query_std is not None:
        params["query_init"] = rng.normal(scale=query_std, size=(cfg.m, cfg.d))
        params["query_pos"] = rng.normal(scale=query_std, size=(cfg.m, cfg.d))
    x = rng.normal(size=(batch, cfg.HW, cfg.C))
    labels = rng.normal(size=(n_labels, cfg.d))
    seen = np.zeros(n_labels, bool)
    seen[:n_seen] = True
    targets = np.zeros((batch, n_labels), bool)
    for b in range(batch):
        targets[b, rng.choice(n_seen, size=1 + b % 2, replace=False)] = True

    def f(p):
        return QksHead(cfg, p).loss_and_grads(x, labels, targets, seen, loss_kind)

    return nx.grad_check(f, params, h=h, tol=tol)
