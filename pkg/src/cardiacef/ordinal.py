"""Coarse-to-fine ordinal regression head.

Coarse stage: cosine similarity between the video feature and one
prototype per EF bin, scaled by 1/temperature, gives class logits.
Fine stage: a small MLP predicts a bounded shift per bin and the estimate is
``y* = sum_i p_i * b_i / (1 + delta_i)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .encoder import build_prototypes, uniform_init
from .exceptions import ConfigError, ContractError, ValidationError

BIN_SCHEMES = ("uniform", "clinical4")
SHIFT_BOUND = 0.5


@dataclass(frozen=True)
class BinSpec:
    edges: tuple

    def __post_init__(self):
        e = np.asarray(self.edges, dtype=float)
        if e.ndim != 1 or e.size < 2:
            raise ConfigError("need at least two bin edges")
        if not np.all(np.diff(e) > 0):
            raise ConfigError(f"bin edges must be strictly ascending: {self.edges}")
        if e[0] != 0.0 or e[-1] != 100.0:
            raise ConfigError("bin edges must span [0, 100]")

    @classmethod
    def uniform(cls, k=10):
        if k < 1:
            raise ConfigError(f"bin count must be >= 1, got {k}")
        return cls(tuple(float(v) for v in np.linspace(0.0, 100.0, k + 1)))

    @classmethod
    def clinical4(cls):
        return cls((0.0, 30.0, 45.0, 55.0, 100.0))

    @classmethod
    def from_scheme(cls, scheme="uniform", k=10):
        if scheme == "uniform":
            return cls.uniform(k)
        if scheme == "clinical4":
            return cls.clinical4()
        raise ConfigError(f"unknown bin scheme {scheme!r}; expected one of {BIN_SCHEMES}")

    @property
    def K(self):
        return len(self.edges) - 1

    @property
    def centers(self):
        e = np.asarray(self.edges)
        return 0.5 * (e[:-1] + e[1:])


def assign_bin(ef, bins):
    """Bin index with edges[i] <= ef < edges[i+1]; ef == 100 goes to the last bin."""
    ef_arr = np.asarray(ef, dtype=float)
    if np.any(~np.isfinite(ef_arr)) or np.any(ef_arr < 0) or np.any(ef_arr > 100):
        raise ValidationError(f"ejection fraction out of [0, 100]: {ef}")
    idx = np.searchsorted(np.asarray(bins.edges), ef_arr, side="right") - 1
    idx = np.minimum(idx, bins.K - 1)
    return int(idx) if idx.ndim == 0 else idx


@dataclass
class OrdinalPrediction:
    logits: dc.Tensor
    p: dc.Tensor
    delta: dc.Tensor
    y_star: dc.Tensor


@dataclass
class RegressorParams:
    W1: dc.Tensor
    b1: dc.Tensor
    W2: dc.Tensor
    b2: dc.Tensor

    @classmethod
    def init(cls, dim, k, hidden=32, rng=None, dtype=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        dtype = dtype or dc.get_default_dtype()
        return cls(
            W1=uniform_init(rng, (dim, hidden), dim, dtype),
            b1=uniform_init(rng, (hidden,), dim, dtype),
            W2=uniform_init(rng, (hidden, k), hidden, dtype),
            b2=uniform_init(rng, (k,), hidden, dtype),
        )

    def named(self, prefix="regressor"):
        return {f"{prefix}.{k}": getattr(self, k) for k in ("W1", "b1", "W2", "b2")}


def _rows(x):
    return x if x.ndim == 2 else dc.reshape(x, (1, x.shape[0]))


def _unrows(x, single):
    return dc.reshape(x, x.shape[1:]) if single else x


def similarity_logits(video_feat, prototypes, temperature=0.07):
    if temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    protos = getattr(prototypes, "matrix", prototypes)
    single = video_feat.ndim == 1
    f = dc.l2_normalize(_rows(video_feat))
    w = dc.l2_normalize(protos)
    logits = dc.scale(dc.matmul(f, dc.transpose(w)), 1.0 / temperature)
    return _unrows(logits, single)


def classify(video_feat, prototypes, temperature=0.07):
    return dc.softmax(similarity_logits(video_feat, prototypes, temperature))


def predict_shifts(video_feat, params):
    single = video_feat.ndim == 1
    h = dc.tanh(dc.add_bias(dc.matmul(_rows(video_feat), params.W1), params.b1))
    raw = dc.add_bias(dc.matmul(h, params.W2), params.b2)
    return _unrows(dc.scale(dc.tanh(raw), SHIFT_BOUND), single)


def expected_value(p, delta, bins):
    """``sum_i p_i * b_i / (1 + delta_i)`` over the last axis."""
    if p.shape != delta.shape or p.shape[-1] != bins.K:
        raise ContractError(f"p {p.shape} / delta {delta.shape} do not match {bins.K} bins")
    if np.any(1.0 + delta.data <= 0):
        raise ContractError("1 + delta must be positive")
    centers = dc.Tensor(np.broadcast_to(bins.centers.astype(p.dtype), p.shape).copy())
    shifted = dc.div(centers, dc.add(delta, 1.0))
    return dc.sum(dc.mul(p, shifted), axis=-1)


def loss_or(logits, y_star, label_ef, bins, loss_kind="mae", huber_delta=1.0):
    """Cross-entropy on the bin of ``label_ef`` plus the regression loss on ``y_star``."""
    labels = np.asarray(label_ef, dtype=float)
    target = dc.Tensor(labels.astype(y_star.dtype))
    ce = dc.cross_entropy_from_logits(logits, assign_bin(labels, bins))
    return dc.add(ce, dc.regression_loss(y_star, target, loss_kind, huber_delta))


class OrdinalHead:
    """Prototype classifier plus shift regressor for one bin layout."""

    def __init__(self, bins, dim, temperature=0.07, hidden=32, seed=0, dtype=None):
        dtype = dtype or dc.get_default_dtype()
        self.bins = bins
        self.temperature = temperature
        self.prototypes = build_prototypes(bins, dim, seed=seed, dtype=dtype)
        self.regressor = RegressorParams.init(dim, bins.K, hidden, np.random.default_rng([seed, 303]), dtype)

    def parameters(self):
        named = {"prototypes": self.prototypes.matrix}
        named.update(self.regressor.named())
        return named

    def __call__(self, video_feat):
        logits = similarity_logits(video_feat, self.prototypes, self.temperature)
        p = dc.softmax(logits)
        delta = predict_shifts(video_feat, self.regressor)
        return OrdinalPrediction(logits, p, delta, expected_value(p, delta, self.bins))
