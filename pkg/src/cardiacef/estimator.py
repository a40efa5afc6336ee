"""scikit-learn compatible regressor wrapping the full training recipe."""

from __future__ import annotations

import json
import logging
import time

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.exceptions import NotFittedError

from . import diffcore as dc
from .data import VideoClip, frame_sample
from .encoder import load_checkpoint, save_checkpoint
from .exceptions import ConfigError, NumericalError, ValidationError
from .mfl import AGGREGATORS
from .model import CardiacCLIPModel
from .optim import OPTIMIZERS, cosine_multiplier, optimizer_step, OptimizerState
from .ordinal import BinSpec, loss_or

logger = logging.getLogger(__name__)


def check_videos(X):
    """Return a list of float32 (T, 1, H, W) arrays, all with the same square H == W."""
    if isinstance(X, VideoClip):
        X = [X]
    if isinstance(X, np.ndarray) and X.dtype != object:
        # (T, H, W) and (T, 1, H, W) are single videos; (N, T, H, W) and (N, T, 1, H, W) batches
        if X.ndim == 3 or (X.ndim == 4 and X.shape[1] == 1):
            X = [X]
    out = []
    for item in X:
        arr = item.frames if isinstance(item, VideoClip) else np.asarray(item, dtype=np.float32)
        if arr.ndim == 3:
            arr = arr[:, None]
        if arr.ndim != 4 or arr.shape[1] != 1 or arr.shape[0] < 1:
            raise ValidationError(f"each video must be (T, H, W) or (T, 1, H, W), got {arr.shape}")
        if arr.shape[2] != arr.shape[3]:
            raise ValidationError(f"frames must be square, got {arr.shape[2]}x{arr.shape[3]}")
        if not np.all(np.isfinite(arr)):
            raise ValidationError("video contains non-finite pixels")
        out.append(arr.astype(np.float32, copy=False))
    if not out:
        raise ValidationError("no videos given")
    if len({a.shape[2] for a in out}) != 1:
        raise ValidationError("videos differ in resolution")
    return out


def check_targets(y, n):
    y = np.asarray(y, dtype=float).reshape(-1)
    if y.shape[0] != n:
        raise ValidationError(f"{y.shape[0]} targets for {n} videos")
    if np.any(~np.isfinite(y)) or np.any(y < 0) or np.any(y > 100):
        raise ValidationError("ejection fraction targets must lie in [0, 100]")
    return y


def _batches(n, size):
    for i in range(0, n, size):
        yield slice(i, min(i + size, n))


class CardiacEFRegressor(RegressorMixin, TransformerMixin, BaseEstimator):
    """Few-shot ejection-fraction regressor for grayscale echo clips.

    ``X`` is a sequence of clips, each ``(T, H, W)`` or ``(T, 1, H, W)``, or
    :class:`~cardiacef.data.VideoClip` objects. ``y`` holds EF in percent.
    ``transform`` returns the aggregated video representation fed to the
    ordinal head.
    """

    def __init__(self, learning_rate=5e-5, epochs=100, batch_size=2, clip_length=48, clip_stride=2,
                 optimizer="radam", aggregator="mfl", echozoom=True, upsample="bilinear",
                 bins=10, bin_scheme="uniform", reg_loss="mae", huber_delta=1.0, temperature=0.07,
                 stage_channels=(8, 16, 32), mfl_hidden=(64, 32), regressor_hidden=32, n_heads=4,
                 weight_decay=0.0, grad_clip=None, precision="float32", val_every=1,
                 random_state=0, verbose=False):
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.clip_length = clip_length
        self.clip_stride = clip_stride
        self.optimizer = optimizer
        self.aggregator = aggregator
        self.echozoom = echozoom
        self.upsample = upsample
        self.bins = bins
        self.bin_scheme = bin_scheme
        self.reg_loss = reg_loss
        self.huber_delta = huber_delta
        self.temperature = temperature
        self.stage_channels = stage_channels
        self.mfl_hidden = mfl_hidden
        self.regressor_hidden = regressor_hidden
        self.n_heads = n_heads
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.precision = precision
        self.val_every = val_every
        self.random_state = random_state
        self.verbose = verbose

    # -------------------------------------------------------------- setup

    def _validate_params(self):
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.aggregator not in AGGREGATORS:
            raise ConfigError(f"unknown aggregator {self.aggregator!r}")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")
        for name in ("learning_rate", "epochs", "batch_size", "clip_length", "clip_stride",
                     "temperature", "huber_delta", "val_every"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)!r}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")

    @property
    def _dtype(self):
        return np.float64 if self.precision == "float64" else np.float32

    def _build(self, resolution):
        return CardiacCLIPModel(
            BinSpec.from_scheme(self.bin_scheme, self.bins), resolution=resolution,
            stage_channels=self.stage_channels, aggregator=self.aggregator,
            echozoom=self.echozoom, upsample=self.upsample, temperature=self.temperature,
            mfl_hidden=self.mfl_hidden, regressor_hidden=self.regressor_hidden,
            n_heads=self.n_heads, seed=self.random_state, dtype=self._dtype)

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("CardiacEFRegressor is not fitted yet")

    # ------------------------------------------------------------ training

    def fit(self, X, y, eval_set=None):
        """Train end to end; ``eval_set=(X_val, y_val)`` enables best-validation-MAE selection."""
        self._validate_params()
        videos = check_videos(X)
        y = check_targets(y, len(videos))
        val = None
        if eval_set is not None:
            xv = check_videos(eval_set[0])
            val = (xv, check_targets(eval_set[1], len(xv)))

        model = self._build(videos[0].shape[2])
        params = model.parameters()
        state = OptimizerState()
        rng = np.random.default_rng([self.random_state, 7])
        history, best = [], None
        n = len(videos)

        with dc.precision(self._dtype):
            for epoch in range(self.epochs):
                t0 = time.perf_counter()
                lr = self.learning_rate * cosine_multiplier(epoch, self.epochs)
                order = rng.permutation(n)
                losses = []
                for step, sl in enumerate(_batches(n, self.batch_size)):
                    idx = order[sl]
                    clips = [frame_sample(videos[i], self.clip_length, self.clip_stride, rng=rng)
                             for i in idx]
                    pred = model(clips)
                    loss = loss_or(pred.logits, pred.y_star, y[idx], model.bins,
                                   self.reg_loss, self.huber_delta)
                    value = float(loss.data)
                    if not np.isfinite(value):
                        raise NumericalError(f"non-finite loss at epoch {epoch}, step {step}")
                    loss.backward()
                    grads = {}
                    for name, t in params.items():
                        grads[name] = np.zeros_like(t.data) if t.grad is None else t.grad
                        t.grad = None
                    if self.grad_clip:
                        norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
                        if norm > self.grad_clip:
                            grads = {k: g * (self.grad_clip / norm) for k, g in grads.items()}
                    raw = {k: t.data for k, t in params.items()}
                    if self.weight_decay:
                        for arr in raw.values():
                            arr -= arr.dtype.type(lr * self.weight_decay) * arr
                    optimizer_step(self.optimizer, raw, grads, state, lr)
                    losses.append(value)

                record = {"epoch": epoch, "lr": lr, "train_loss": float(np.mean(losses)),
                          "seconds": time.perf_counter() - t0}
                last = epoch == self.epochs - 1
                if val is not None and ((epoch + 1) % self.val_every == 0 or last):
                    pv = self._predict_with(model, val[0])
                    resid = pv - val[1]
                    record["val_mae"] = float(np.mean(np.abs(resid)))
                    record["val_rmse"] = float(np.sqrt(np.mean(resid * resid)))
                    if best is None or record["val_mae"] < best[0]:
                        best = (record["val_mae"], epoch, {k: t.data.copy() for k, t in params.items()})
                history.append(record)
                if self.verbose:
                    logger.info("epoch %d lr %.3g loss %.4f%s", epoch, lr, record["train_loss"],
                                f" val_mae {record['val_mae']:.3f}" if "val_mae" in record else "")

        if best is not None:
            model.load_state(best[2])
            self.best_epoch_ = best[1]
            self.best_val_mae_ = best[0]
        self.model_ = model
        self.history_ = history
        self.resolution_ = videos[0].shape[2]
        return self

    # ----------------------------------------------------------- inference

    def _predict_outputs(self, model, videos, chunk=8):
        ys, ps, feats = [], [], []
        with dc.no_grad(), dc.precision(self._dtype):
            for sl in _batches(len(videos), chunk):
                clips = [frame_sample(v, self.clip_length, self.clip_stride, offset=0) for v in videos[sl]]
                f = model.video_features(clips)
                pred = model.head(f)
                ys.append(pred.y_star.data)
                ps.append(pred.p.data)
                feats.append(f.data)
        return np.concatenate(ys), np.concatenate(ps), np.concatenate(feats)

    def _predict_with(self, model, videos):
        return self._predict_outputs(model, videos)[0].astype(float)

    def predict(self, X):
        self._check_fitted()
        return self._predict_with(self.model_, check_videos(X))

    def predict_proba(self, X):
        """Bin probabilities of the coarse stage, shape (n_videos, K)."""
        self._check_fitted()
        return self._predict_outputs(self.model_, check_videos(X))[1]

    def transform(self, X):
        self._check_fitted()
        return self._predict_outputs(self.model_, check_videos(X))[2]

    # ------------------------------------------------------------- storage

    def save(self, path):
        """Write the ``EFK1`` parameter file to ``path`` and hyperparameters to ``path + '.json'``."""
        self._check_fitted()
        save_checkpoint(path, self.model_.parameters())
        meta = {"params": _jsonable(self.get_params()), "resolution": self.resolution_}
        with open(path + ".json", "w", encoding="utf-8") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path):
        with open(path + ".json", encoding="utf-8") as fh:
            meta = json.load(fh)
        params = {k: tuple(v) if isinstance(v, list) else v for k, v in meta["params"].items()}
        est = cls(**params)
        est.model_ = est._build(meta["resolution"])
        est.model_.load_state(load_checkpoint(path))
        est.resolution_ = meta["resolution"]
        est.history_ = []
        return est


def _jsonable(params):
    return {k: list(v) if isinstance(v, tuple) else v for k, v in params.items()}
