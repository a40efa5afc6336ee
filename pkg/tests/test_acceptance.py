"""Acceptance suite: one test per criterion; results are summarised at the end of the run.

The end-to-end comparison trains 12 models and takes about four minutes on
a single core. Set CARDIACEF_SKIP_E2E=1 to skip it during development.
"""

import math
import os
import time

import numpy as np
import pytest

from cardiacef import diffcore as dc
from cardiacef.data import (Manifest, ManifestRow, SyntheticConfig, few_shot_sample,
                            make_synthetic_dataset, read_manifest)
from cardiacef.echozoom import ZoomConfig, assemble_feature_map, echozoom_forward, split_tiles
from cardiacef.encoder import EncoderConfig, FrameEncoder
from cardiacef.harness import (TrainConfig, ablate, ablation_grid, evaluate, gradcheck_all,
                               mae_rmse, read_metrics_csv, train, write_metrics_csv)
from cardiacef.mfl import (AGGREGATORS, ORDER_FREE, AggregatorVariant, MFLParams, aggregate,
                           mfl_forward, normalize_weights, score_frames)
from cardiacef.model import CardiacCLIPModel
from cardiacef.ordinal import BinSpec, expected_value

# Desk-scale settings for the end-to-end comparison: 16x16 frames and 16-frame
# clips (one full cycle at stride 2). Full-size frames and 48-frame clips do
# not fit the time budget on a CPU.
E2E_DATA = SyntheticConfig(resolution=16, seed=100)
E2E_TRAIN = dict(clip_length=16, learning_rate=1e-3, epochs=100)
E2E_SEEDS = (0, 1, 2)
E2E_BUDGET_S = 20 * 60


def _detail(request, text):
    request.node.user_properties.append(("detail", text))


@pytest.mark.criterion("gradient suite")
def test_gradient_suite(request):
    t0 = time.perf_counter()
    reports = gradcheck_all(seeds=5)
    elapsed = time.perf_counter() - t0
    worst = max(reports, key=lambda r: r.max_rel_error)
    names = {r.op_name.split("#")[0] for r in reports}
    _detail(request, f"{len(reports)} checks, worst {worst.op_name} {worst.max_rel_error:.2e}, {elapsed:.1f}s")
    assert {"mfl_forward[" + k + "]" for k in AGGREGATORS} <= names
    assert {"echozoom_forward[bilinear]", "echozoom_forward[nearest]", "loss_or"} <= names
    assert worst.max_rel_error <= 1e-4
    assert elapsed <= 60


@pytest.mark.criterion("MFL invariants")
def test_mfl_invariants(request):
    rng = np.random.default_rng(2024)
    variants = {k: None for k in ORDER_FREE}
    with dc.precision("float64"):
        for k in variants:
            variants[k] = AggregatorVariant.create(k, 6, seed=1, hidden=(8, 4), n_heads=2)
        params = MFLParams.init(6, (8, 4), np.random.default_rng(5))
        worst_perm = worst_shift = worst_sum = 0.0
        for _ in range(200):
            b = int(rng.integers(1, 17))
            F = rng.standard_normal((b, 6)) * rng.uniform(0.1, 5)
            s = score_frames(dc.Tensor(F), params)
            alpha = normalize_weights(s).alpha.data
            worst_sum = max(worst_sum, abs(alpha.sum() - 1))
            shifted = normalize_weights(dc.Tensor(s.data + rng.uniform(-50, 50))).alpha.data
            worst_shift = max(worst_shift, np.abs(shifted - alpha).max())
            agg = aggregate(dc.Tensor(F), dc.Tensor(alpha)).data
            assert np.all(agg >= F.min(axis=0) - 1e-12) and np.all(agg <= F.max(axis=0) + 1e-12)
            perm = rng.permutation(b)
            for v in variants.values():
                a = mfl_forward(dc.Tensor(F), v).data
                p = mfl_forward(dc.Tensor(F[perm]), v).data
                worst_perm = max(worst_perm, np.abs(a - p).max())
    _detail(request, f"sum {worst_sum:.1e}, shift {worst_shift:.1e}, permutation {worst_perm:.1e}")
    assert worst_sum <= 1e-6 and worst_shift <= 1e-9 and worst_perm <= 1e-9


def _direct_expected(p, delta, centers):
    total = 0.0
    for i in range(len(p)):
        total += p[i] * centers[i] / (1.0 + delta[i])
    return total


@pytest.mark.criterion("ordinal decoding oracle")
def test_ordinal_oracle(request):
    rng = np.random.default_rng(77)
    worst = 0.0
    with dc.precision("float64"):
        for _ in range(1000):
            k = int(rng.integers(1, 21))
            inner = sorted(rng.choice(np.arange(1, 100), size=k - 1, replace=False)) if k > 1 else []
            bins = BinSpec(tuple([0.0] + [float(v) for v in inner] + [100.0]))
            p = rng.dirichlet(np.ones(k) * rng.uniform(0.1, 3))
            d = rng.uniform(-0.5, 0.5, k)
            got = expected_value(dc.Tensor(p), dc.Tensor(d), bins).item()
            worst = max(worst, abs(got - _direct_expected(p, d, bins.centers)))
            i = int(rng.integers(0, k))
            onehot = expected_value(dc.Tensor(np.eye(k)[i]), dc.Tensor(np.zeros(k)), bins).item()
            assert onehot == bins.centers[i]
    _detail(request, f"max deviation {worst:.1e}")
    assert worst <= 1e-12


@pytest.mark.criterion("EchoZoom invariants")
def test_echozoom_invariants(request):
    bins = BinSpec.uniform(10)
    on = CardiacCLIPModel(bins, resolution=32, echozoom=True, seed=0).parameters()
    off = CardiacCLIPModel(bins, resolution=32, echozoom=False, seed=0).parameters()
    assert {k: v.shape for k, v in on.items()} == {k: v.shape for k, v in off.items()}

    with dc.precision("float64"):
        enc = FrameEncoder(EncoderConfig(), seed=0)
        worst = 0.0
        for c in (0.0, 0.3, 1.0):
            img = dc.Tensor(np.full((1, 112, 112), c))
            fused = echozoom_forward(img, enc, ZoomConfig(upsample="nearest")).data
            worst = max(worst, np.abs(fused - enc.feature_maps(img).data).max())
        big = np.random.default_rng(0).random((1, 224, 224))
        tiles = split_tiles(dc.Tensor(big), ZoomConfig())
        assert assemble_feature_map(tiles).data.tobytes() == big.tobytes()
    _detail(request, f"{len(on)} parameter tensors, constant-image deviation {worst:.1e}")
    assert worst <= 1e-9


def _component_means(rows):
    return {r.setting: r.mae for r in rows if r.seed == "mean"}


@pytest.mark.criterion("synthetic end-to-end component ordering")
@pytest.mark.skipif(os.environ.get("CARDIACEF_SKIP_E2E") == "1", reason="CARDIACEF_SKIP_E2E=1")
def test_synthetic_end_to_end(request):
    t0 = time.perf_counter()
    manifest, clips = make_synthetic_dataset(1, 20, 80, seed=100, cfg=E2E_DATA, test_per_class=3)
    assert len(manifest.split("TRAIN")) == 61 and len(manifest.split("TEST")) == 183
    grid = ablation_grid("components", TrainConfig(**E2E_TRAIN))
    rows = ablate(grid, E2E_SEEDS, manifest, clips)
    elapsed = time.perf_counter() - t0
    m = _component_means(rows)
    _detail(request, ", ".join(f"{k} {v:.2f}" for k, v in m.items()) + f"; {elapsed:.0f}s")
    print("per-run test MAE:", [(r.setting, r.seed, round(r.mae, 3)) for r in rows])
    assert m["full"] <= m["mfl"] <= m["base"]
    assert m["full"] <= m["echozoom"] <= m["base"]
    assert m["full"] <= m["base"] - 0.3
    assert elapsed <= E2E_BUDGET_S


@pytest.mark.criterion("few-shot counts")
def test_few_shot_counts(request):
    rng = np.random.default_rng(3)
    rows, sizes = [], {}
    for cls in range(1, 101):
        size = int(rng.integers(0, 12))
        if cls in (1, 100):
            size = max(size, 1)
        sizes[cls] = size
        for j in range(size):
            ef = min(cls + rng.uniform(0, 1), 100.0)
            rows.append(ManifestRow(f"v{cls:03d}_{j:02d}", ef, "TRAIN"))
    rows.append(ManifestRow("edge_zero", 0.4, "TRAIN"))
    sizes[1] += 1
    manifest = Manifest(rows)
    for n in (1, 2, 4, 8):
        sub = few_shot_sample(manifest, n, seed=0)
        got = {}
        for r in sub:
            cls = min(max(int(math.floor(r.ef)), 1), 100)
            got[cls] = got.get(cls, 0) + 1
        assert got == {c: min(n, s) for c, s in sizes.items() if s}
    path = os.environ.get("ECHONET_FILELIST")
    if path:
        real = read_manifest(path)
        counts = [len(few_shot_sample(real, n, seed=0)) for n in (1, 2, 4, 8)]
        _detail(request, f"EchoNet counts {counts}")
        assert counts == [84, 162, 307, 570]
    else:
        _detail(request, "synthetic coverage checked; EchoNet manifest not supplied")


@pytest.mark.criterion("determinism")
def test_determinism(request, tmp_path):
    cfg_data = SyntheticConfig(resolution=16, total_frames=12, seed=4)
    manifest, clips = make_synthetic_dataset(1, 30, 39, seed=4, cfg=cfg_data, val_per_class=1, test_per_class=1)
    cfg = TrainConfig(epochs=3, clip_length=6, learning_rate=1e-3, stage_channels=(4, 8),
                      mfl_hidden=(8, 4), regressor_hidden=8, precision="float64", seed=11)
    texts = []
    for run in range(2):
        est = train(cfg, manifest, clips)
        row = evaluate(est, manifest, clips, "TEST", "determinism", cfg.shots, cfg.seed)
        path = tmp_path / f"run{run}.csv"
        write_metrics_csv(path, [row])
        # wall-clock time is the only column allowed to differ between runs
        texts.append([{k: v for k, v in r.items() if k != "wall_seconds"} for r in read_metrics_csv(path)])
    _detail(request, f"test MAE {texts[0][0]['mae']}")
    assert texts[0] == texts[1]


@pytest.mark.criterion("evaluator algebra")
def test_evaluator_algebra(request):
    assert mae_rmse([3.0, 4.0], [3.0, 4.0]) == (0.0, 0.0)
    mae, rmse = mae_rmse([2.0, -2.0], [0.0, 0.0])
    assert abs(mae - 2) <= 1e-12 and abs(rmse - 2) <= 1e-12
    mae, rmse = mae_rmse([0.0, 4.0], [0.0, 0.0])
    assert abs(mae - 2) <= 1e-12 and abs(rmse - math.sqrt(8)) <= 1e-12
    rng = np.random.default_rng(0)
    for _ in range(500):
        n = int(rng.integers(1, 50))
        mae, rmse = mae_rmse(rng.uniform(0, 100, n), rng.uniform(0, 100, n))
        assert rmse >= mae >= 0
    _detail(request, "[0,4] -> 2 / sqrt(8)")
