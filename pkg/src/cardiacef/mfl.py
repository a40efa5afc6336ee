"""Frame aggregation: attention pooling (MFL) and its ablation variants.

Frame features are a (B, C) tensor. Scores use the row-vector convention
``s = tanh(tanh(F W1) W2) W3`` so each row of ``F`` is scored
independently; the projection is ``W_proj @ f_agg``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .encoder import uniform_init
from .exceptions import ConfigError, ShapeError

AGGREGATORS = (
    "mfl", "mfl_no_proj", "mfl_nonlinear_proj", "mfl_gru",
    "mean_pool", "multi_head", "multi_head_gru",
)

# permutation of frame order leaves these unchanged
ORDER_FREE = ("mfl", "mfl_no_proj", "mfl_nonlinear_proj", "mean_pool", "multi_head")


@dataclass
class MFLParams:
    W1: dc.Tensor
    W2: dc.Tensor
    W3: dc.Tensor
    W_proj: dc.Tensor

    @classmethod
    def init(cls, dim, hidden=(64, 32), rng=None, dtype=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        dtype = dtype or dc.get_default_dtype()
        h1, h2 = hidden
        return cls(
            W1=uniform_init(rng, (dim, h1), dim, dtype),
            W2=uniform_init(rng, (h1, h2), h1, dtype),
            W3=uniform_init(rng, (h2, 1), h2, dtype),
            W_proj=uniform_init(rng, (dim, dim), dim, dtype),
        )

    def named(self, prefix="mfl"):
        return {f"{prefix}.{k}": getattr(self, k) for k in ("W1", "W2", "W3", "W_proj")}


@dataclass
class AttentionWeights:
    alpha: dc.Tensor

    def __len__(self):
        return self.alpha.shape[0]


def score_frames(F, p):
    if F.ndim != 2 or F.shape[0] < 1:
        raise ShapeError(f"frame features must be (B, C) with B >= 1, got {F.shape}")
    if F.shape[1] != p.W1.shape[0]:
        raise ShapeError(f"feature dim {F.shape[1]} does not match W1 {p.W1.shape}")
    h = dc.tanh(dc.matmul(F, p.W1))
    h = dc.tanh(dc.matmul(h, p.W2))
    s = dc.matmul(h, p.W3)
    return dc.reshape(s, (F.shape[0],))


def normalize_weights(scores):
    return AttentionWeights(dc.softmax(scores))


def aggregate(F, weights):
    alpha = weights.alpha if isinstance(weights, AttentionWeights) else weights
    if alpha.shape[0] != F.shape[0]:
        raise ShapeError(f"{alpha.shape[0]} weights for {F.shape[0]} frames")
    out = dc.matmul(dc.reshape(alpha, (1, F.shape[0])), F)
    return dc.reshape(out, (F.shape[1],))


def project(f_agg, p, kind="mfl"):
    if kind == "mfl_no_proj":
        return f_agg
    c = f_agg.shape[0]
    out = dc.reshape(dc.matmul(p.W_proj, dc.reshape(f_agg, (c, 1))), (c,))
    if kind == "mfl_nonlinear_proj":
        out = dc.tanh(out)
    return out


# ------------------------------------------------------------------ GRU

@dataclass
class GRUParams:
    Wz: dc.Tensor
    Wr: dc.Tensor
    Wn: dc.Tensor
    Uz: dc.Tensor
    Ur: dc.Tensor
    Un: dc.Tensor

    @classmethod
    def init(cls, dim, rng, dtype):
        return cls(*(uniform_init(rng, (dim, dim), dim, dtype) for _ in range(6)))

    def named(self, prefix="gru"):
        return {f"{prefix}.{k}": getattr(self, k) for k in ("Wz", "Wr", "Wn", "Uz", "Ur", "Un")}


def gru_sequence(F, g):
    """Run a bias-free single-layer GRU over the rows of F; returns all hidden states."""
    b, c = F.shape
    h = dc.Tensor(np.zeros((1, c), dtype=F.dtype))
    xz, xr, xn = dc.matmul(F, g.Wz), dc.matmul(F, g.Wr), dc.matmul(F, g.Wn)
    outs = []
    for t in range(b):
        z = dc.sigmoid(dc.add(xz[t:t + 1], dc.matmul(h, g.Uz)))
        r = dc.sigmoid(dc.add(xr[t:t + 1], dc.matmul(h, g.Ur)))
        n = dc.tanh(dc.add(xn[t:t + 1], dc.matmul(dc.mul(r, h), g.Un)))
        h = dc.add(dc.mul(dc.sub(1.0, z), n), dc.mul(z, h))
        outs.append(h)
    return dc.concat(outs, axis=0)


# ------------------------------------------------------------ multi-head

@dataclass
class MultiHeadParams:
    Wq: dc.Tensor
    Wk: dc.Tensor
    Wv: dc.Tensor
    n_heads: int = 4

    @classmethod
    def init(cls, dim, n_heads, rng, dtype):
        if dim % n_heads:
            raise ConfigError(f"feature dim {dim} not divisible by {n_heads} heads")
        return cls(*(uniform_init(rng, (dim, dim), dim, dtype) for _ in range(3)), n_heads=n_heads)

    def named(self, prefix="mha"):
        return {f"{prefix}.{k}": getattr(self, k) for k in ("Wq", "Wk", "Wv")}


def multi_head_pool(F, m):
    b, c = F.shape
    d = c // m.n_heads
    q, k, v = dc.matmul(F, m.Wq), dc.matmul(F, m.Wk), dc.matmul(F, m.Wv)
    heads = []
    for i in range(m.n_heads):
        cols = slice(i * d, (i + 1) * d)
        att = dc.softmax(dc.scale(dc.matmul(q[:, cols], dc.transpose(k[:, cols])), 1.0 / math.sqrt(d)))
        heads.append(dc.matmul(att, v[:, cols]))
    return dc.mean(dc.concat(heads, axis=1), axis=0)


# ------------------------------------------------------------- dispatch

@dataclass
class AggregatorVariant:
    kind: str
    mfl: MFLParams | None = None
    gru: GRUParams | None = None
    mha: MultiHeadParams | None = None

    @classmethod
    def create(cls, kind, dim, seed=0, hidden=(64, 32), n_heads=4, dtype=None):
        if kind not in AGGREGATORS:
            raise ConfigError(f"unknown aggregator {kind!r}; expected one of {AGGREGATORS}")
        dtype = dtype or dc.get_default_dtype()
        rng = np.random.default_rng([seed, 202])
        out = cls(kind)
        if kind.startswith("mfl"):
            out.mfl = MFLParams.init(dim, hidden, rng, dtype)
        if kind.endswith("gru"):
            out.gru = GRUParams.init(dim, rng, dtype)
        if kind.startswith("multi_head"):
            out.mha = MultiHeadParams.init(dim, n_heads, rng, dtype)
        return out

    def parameters(self):
        named = {}
        for block in (self.mfl, self.gru, self.mha):
            if block is not None:
                named.update(block.named())
        return named


def mfl_forward(F, variant):
    kind = variant.kind
    if kind not in AGGREGATORS:
        raise ConfigError(f"unknown aggregator {kind!r}")
    if F.ndim != 2 or F.shape[0] < 1:
        raise ShapeError(f"frame features must be (B, C), got {F.shape}")
    if kind == "mean_pool":
        return dc.mean(F, axis=0)
    if variant.gru is not None:
        F = gru_sequence(F, variant.gru)
    if kind.startswith("multi_head"):
        return multi_head_pool(F, variant.mha)
    weights = normalize_weights(score_frames(F, variant.mfl))
    proj_kind = "mfl" if kind == "mfl_gru" else kind
    return project(aggregate(F, weights), variant.mfl, proj_kind)
