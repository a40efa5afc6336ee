"""Training/evaluation orchestration, ablation grids, metrics CSV and the gradient suite."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
from dataclasses import dataclass, fields

import numpy as np

from . import diffcore as dc
from .data import few_shot_sample
from .echozoom import ZoomConfig, echozoom_forward
from .encoder import EncoderConfig, FrameEncoder
from .estimator import CardiacEFRegressor
from .exceptions import ConfigError
from .mfl import AGGREGATORS, AggregatorVariant, mfl_forward
from .ordinal import BinSpec, OrdinalHead, loss_or

logger = logging.getLogger(__name__)

METRICS_HEADER = ("setting", "shots", "seed", "mae", "rmse", "wall_seconds")


@dataclass
class TrainConfig:
    learning_rate: float = 5e-5
    epochs: int = 100
    batch_size: int = 2
    clip_length: int = 48
    clip_stride: int = 2
    optimizer: str = "radam"
    schedule: str = "cosine"
    aggregator: str = "mfl"
    echozoom: bool = True
    upsample: str = "bilinear"
    bins: int = 10
    bin_scheme: str = "uniform"
    reg_loss: str = "mae"
    huber_delta: float = 1.0
    temperature: float = 0.07
    stage_channels: tuple = (8, 16, 32)
    mfl_hidden: tuple = (64, 32)
    regressor_hidden: int = 32
    n_heads: int = 4
    weight_decay: float = 0.0
    grad_clip: float | None = None
    precision: str = "float32"
    val_every: int = 1
    seed: int = 0
    shots: int = 1
    name: str = "default"

    def __post_init__(self):
        if self.schedule != "cosine":
            raise ConfigError("only the cosine-to-zero schedule is implemented")
        if self.aggregator not in AGGREGATORS:
            raise ConfigError(f"unknown aggregator {self.aggregator!r}")
        self.stage_channels = tuple(self.stage_channels)
        self.mfl_hidden = tuple(self.mfl_hidden)

    @classmethod
    def from_dict(cls, values):
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(**values)

    @classmethod
    def from_json(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_estimator(self):
        est_keys = CardiacEFRegressor().get_params().keys()
        values = dataclasses.asdict(self)
        kwargs = {k: values[k] for k in est_keys if k in values}
        kwargs["random_state"] = self.seed
        return CardiacEFRegressor(**kwargs)


@dataclass
class MetricsRow:
    setting: str
    shots: int
    seed: object
    mae: float
    rmse: float
    wall_seconds: float = 0.0

    def as_csv(self):
        return [self.setting, self.shots, self.seed, repr(float(self.mae)), repr(float(self.rmse)),
                f"{self.wall_seconds:.3f}"]


def mae_rmse(pred, target):
    r = np.asarray(pred, dtype=float) - np.asarray(target, dtype=float)
    return float(np.mean(np.abs(r))), float(np.sqrt(np.mean(r * r)))


def write_metrics_csv(path, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for row in rows:
            w.writerow(row.as_csv())


def read_metrics_csv(path):
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


# ------------------------------------------------------------------- training

def _split_arrays(manifest, clips, split):
    rows = sorted(manifest.split(split).rows, key=lambda r: r.file_name)
    return [clips[r.file_name] for r in rows], np.array([r.ef for r in rows]), [r.file_name for r in rows]


def train(cfg, manifest, clips, use_val=True):
    """Fit on the ``cfg.shots``-shot TRAIN subset; VAL (if present) picks the best epoch."""
    subset = few_shot_sample(manifest, cfg.shots, seed=cfg.seed)
    X, y, _ = _split_arrays(subset, clips, "TRAIN")
    eval_set = None
    if use_val and len(manifest.split("VAL")):
        xv, yv, _ = _split_arrays(manifest, clips, "VAL")
        eval_set = (xv, yv)
    est = cfg.to_estimator()
    est.fit(X, y, eval_set=eval_set)
    return est


def epoch_rows(est, cfg):
    """One metrics row per epoch that was validated."""
    return [MetricsRow(f"{cfg.name}/epoch{h['epoch']}", cfg.shots, cfg.seed, h["val_mae"],
                       h["val_rmse"], h["seconds"])
            for h in est.history_ if "val_mae" in h]


def evaluate(est, manifest, clips, split="TEST", setting="eval", shots=0, seed=0):
    X, y, names = _split_arrays(manifest, clips, split)
    if not X:
        raise ConfigError(f"split {split} is empty")
    t0 = time.perf_counter()
    pred = est.predict(X)
    mae, rmse = mae_rmse(pred, y)
    return MetricsRow(setting, shots, seed, mae, rmse, time.perf_counter() - t0)


# ------------------------------------------------------------------- ablation

ABLATION_AXES = {
    "components": [
        ("base", {"aggregator": "mean_pool", "echozoom": False}),
        ("mfl", {"aggregator": "mfl", "echozoom": False}),
        ("echozoom", {"aggregator": "mean_pool", "echozoom": True}),
        ("full", {"aggregator": "mfl", "echozoom": True}),
    ],
    "frame_length": [(f"len{n}", {"clip_length": n}) for n in (16, 36, 48, 54, 64, 96, 128)],
    "mfl": [(k, {"aggregator": k}) for k in ("mfl", "mfl_no_proj", "mfl_nonlinear_proj", "mfl_gru")],
    "loss": [(k, {"reg_loss": k}) for k in ("mae", "smooth_l1", "huber", "mse")],
    "aggregation": [(k, {"aggregator": k}) for k in ("mfl", "multi_head", "multi_head_gru")],
}


def ablation_grid(axis, base):
    if axis not in ABLATION_AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; expected one of {sorted(ABLATION_AXES)}")
    return [base.replace(name=name, **changes) for name, changes in ABLATION_AXES[axis]]


def ablate(grid, seeds, manifest, clips, split="TEST"):
    """Train and evaluate every config for every seed.

    Returns per-run rows followed by, for each config, a ``seed="mean"`` row
    and a ``seed="std"`` row. A failing grid point is logged and recorded
    with NaN metrics; the rest of the grid still runs.
    """
    rows, summary = [], []
    for cfg in grid:
        runs = []
        for seed in seeds:
            point = cfg.replace(seed=seed)
            t0 = time.perf_counter()
            try:
                est = train(point, manifest, clips)
                row = evaluate(est, manifest, clips, split, cfg.name, cfg.shots, seed)
            except Exception as exc:  # one bad grid point must not stop the grid
                logger.error("grid point %s seed %s failed: %s", cfg.name, seed, exc)
                row = MetricsRow(cfg.name, cfg.shots, seed, float("nan"), float("nan"))
            row.wall_seconds = time.perf_counter() - t0
            rows.append(row)
            runs.append(row)
        maes = np.array([r.mae for r in runs])
        rmses = np.array([r.rmse for r in runs])
        wall = float(np.sum([r.wall_seconds for r in runs]))
        summary.append(MetricsRow(cfg.name, cfg.shots, "mean", float(np.mean(maes)), float(np.mean(rmses)), wall))
        summary.append(MetricsRow(cfg.name, cfg.shots, "std", float(np.std(maes)), float(np.std(rmses)), wall))
    return rows + summary


# -------------------------------------------------------------- gradient suite

def _t(rng, *shape, scale=1.0):
    return dc.Tensor(scale * rng.standard_normal(shape), requires_grad=True)


def _op_cases(rng):
    """(name, f, inputs) triples for every primitive op."""
    w = {}
    label = int(rng.integers(0, 10))

    def head(key, out):
        if key not in w:
            w[key] = dc.Tensor(rng.standard_normal(out.shape))
        return dc.sum(dc.mul(out, w[key]))

    cases = [
        ("matmul", lambda a, b: head("mm", dc.matmul(a, b)), [_t(rng, 3, 4), _t(rng, 4, 2)]),
        ("conv2d_s1p1", lambda x, k: head("c1", dc.conv2d(x, k, 1, 1)), [_t(rng, 2, 8, 8), _t(rng, 3, 2, 3, 3)]),
        ("conv2d_s2p1", lambda x, k: head("c2", dc.conv2d(x, k, 2, 1)), [_t(rng, 2, 2, 8, 8), _t(rng, 3, 2, 3, 3)]),
        ("conv2d_s2p1_edge", lambda x, k: head("c4", dc.conv2d(x, k, 2, 1, "edge")),
         [_t(rng, 2, 7, 7), _t(rng, 3, 2, 3, 3)]),
        ("conv2d_s1p0", lambda x, k: head("c3", dc.conv2d(x, k, 1, 0)), [_t(rng, 1, 6, 6), _t(rng, 2, 1, 3, 3)]),
        ("tanh", lambda x: head("th", dc.tanh(x)), [_t(rng, 6)]),
        ("sigmoid", lambda x: head("sg", dc.sigmoid(x)), [_t(rng, 6)]),
        ("softmax", lambda x: head("sm", dc.softmax(x)), [_t(rng, 8)]),
        ("softmax_rows", lambda x: head("smr", dc.softmax(x, axis=-1)), [_t(rng, 3, 5)]),
        ("avg_pool2d", lambda x: head("ap", dc.avg_pool2d(x, 2)), [_t(rng, 2, 4, 6)]),
        ("global_avg_pool", lambda x: head("gp", dc.global_avg_pool(x)), [_t(rng, 3, 4, 4)]),
        ("add", lambda a, b: head("ad", dc.add(a, b)), [_t(rng, 5), _t(rng, 5)]),
        ("sub", lambda a, b: head("sb", dc.sub(a, b)), [_t(rng, 5), _t(rng, 5)]),
        ("mul", lambda a, b: head("ml", dc.mul(a, b)), [_t(rng, 5), _t(rng, 5)]),
        ("div", lambda a, b: head("dv", dc.div(a, dc.add(dc.mul(b, b), 1.0))), [_t(rng, 5), _t(rng, 5)]),
        ("scale", lambda a: head("sc", dc.scale(a, -2.5)), [_t(rng, 5)]),
        ("scalar_mul", lambda a, s: head("sm2", dc.mul(a, s)), [_t(rng, 4), _t(rng)]),
        ("sum_axis", lambda a: head("su", dc.sum(a, axis=1)), [_t(rng, 3, 4)]),
        ("mean_axis", lambda a: head("mn", dc.mean(a, axis=0)), [_t(rng, 3, 4)]),
        ("reshape_transpose", lambda a: head("rt", dc.transpose(dc.reshape(a, (4, 3)))), [_t(rng, 3, 4)]),
        ("getitem_concat", lambda a: head("gc", dc.concat([a[:, 1:], a[:, :2]], axis=1)), [_t(rng, 3, 4)]),
        ("add_bias", lambda a, b: head("ab", dc.add_bias(a, b, axis=1)), [_t(rng, 2, 3, 4, 4), _t(rng, 3)]),
        ("l2_normalize", lambda a: head("l2", dc.l2_normalize(a)), [_t(rng, 3, 5)]),
        ("upsample_bilinear", lambda a: head("ub", dc.upsample2x(a, "bilinear")), [_t(rng, 1, 4, 4)]),
        ("upsample_nearest", lambda a: head("un", dc.upsample2x(a, "nearest")), [_t(rng, 1, 4, 4)]),
        ("cross_entropy", lambda a: dc.cross_entropy_from_logits(a, label), [_t(rng, 10)]),
        ("cross_entropy_rows", lambda a: dc.cross_entropy_from_logits(a, [1, 3]), [_t(rng, 2, 5)]),
    ]
    target = dc.Tensor(rng.standard_normal(6) * 3)
    for kind in dc.REGRESSION_LOSSES:
        cases.append((f"regression_{kind}",
                      lambda p, k=kind: dc.regression_loss(p, target, k, 1.0), [_t(rng, 6, scale=3.0)]))
    return cases


def _composite_cases(rng, seed):
    cases = []
    b, c = 5, 8
    for kind in AGGREGATORS:
        with dc.precision(np.float64):
            var = AggregatorVariant.create(kind, c, seed=seed, hidden=(6, 4), n_heads=2)
        F = _t(rng, b, c)
        params = list(var.parameters().values())
        w = dc.Tensor(rng.standard_normal(c))
        cases.append((f"mfl_forward[{kind}]",
                      lambda F_, *ps, v=var, w=w: dc.sum(dc.mul(mfl_forward(F_, v), w)), [F] + params))

    with dc.precision(np.float64):
        enc = FrameEncoder(EncoderConfig(stage_channels=(2, 3)), seed=seed)
    img = dc.Tensor(rng.random((1, 8, 8)), requires_grad=True)
    for mode in ("bilinear", "nearest"):
        zc = ZoomConfig(base_res=8, upsample=mode)
        wz = dc.Tensor(rng.standard_normal((3, 2, 2)))
        cases.append((f"echozoom_forward[{mode}]",
                      lambda im, *ps, zc=zc, wz=wz: dc.sum(dc.mul(echozoom_forward(im, enc, zc), wz)),
                      [img] + list(enc.params.values())))

    bins = BinSpec.uniform(5)
    with dc.precision(np.float64):
        head = OrdinalHead(bins, c, temperature=0.5, hidden=6, seed=seed)
    feats = _t(rng, 2, c)
    labels = rng.uniform(5, 95, size=2)

    def ordinal_loss(f, *ps):
        pred = head(f)
        return loss_or(pred.logits, pred.y_star, labels, bins, "mae")

    cases.append(("loss_or", ordinal_loss, [feats] + list(head.parameters().values())))
    return cases


def gradcheck_all(seeds=5, include_ops=True, include_composites=True):
    reports = []
    with dc.precision(np.float64):
        for seed in range(seeds):
            rng = np.random.default_rng(seed)
            cases = []
            if include_ops:
                cases += _op_cases(rng)
            if include_composites:
                cases += _composite_cases(rng, seed)
            for name, f, inputs in cases:
                reports.append(dc.gradcheck(f, inputs, op_name=f"{name}#seed{seed}"))
    return reports
