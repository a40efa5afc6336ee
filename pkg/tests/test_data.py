import os
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cardiacef.data import (CLIP_MAGIC, Manifest, ManifestRow, SyntheticConfig, VideoClip,
                            few_shot_sample, frame_sample, gen_clip, make_synthetic_dataset,
                            measured_ef, read_clip, read_dataset, read_manifest, render_masks,
                            sample_indices, write_clip, write_dataset, write_manifest)
from cardiacef.exceptions import ConfigError, ContractError, FormatError, ValidationError

SMALL = SyntheticConfig(resolution=64, total_frames=40)


def test_config_validation():
    with pytest.raises(ConfigError):
        SyntheticConfig(cycle_period=4)
    with pytest.raises(ConfigError):
        SyntheticConfig(ef_range=(-1, 90))


def test_gen_clip_shape_and_range():
    clip = gen_clip(50, SMALL, seed=1)
    assert clip.frames.shape == (40, 1, 64, 64) and clip.frames.dtype == np.float32
    assert clip.frames.min() >= 0 and clip.frames.max() <= 1
    assert clip.ef_label == 50


def test_gen_clip_out_of_range():
    with pytest.raises(ValidationError):
        gen_clip(95, SMALL)
    with pytest.raises(ValidationError):
        gen_clip(5, SMALL)


def test_zero_ef_constant_area():
    cfg = SyntheticConfig(resolution=112, ef_range=(0.0, 100.0))
    assert measured_ef(render_masks(0.0, cfg, seed=3)) <= 1.0


def test_ef60_area_oracle():
    cfg = SyntheticConfig()
    assert abs(measured_ef(render_masks(60.0, cfg, seed=0)) - 60.0) <= 2.0


def test_label_fidelity_random_values():
    cfg = SyntheticConfig()
    rng = np.random.default_rng(123)
    for i, ef in enumerate(rng.uniform(10, 90, 20)):
        assert abs(measured_ef(render_masks(ef, cfg, seed=i)) - ef) <= 2.0


def test_gen_clip_deterministic():
    a, b = gen_clip(42.5, SMALL, seed=9), gen_clip(42.5, SMALL, seed=9)
    assert a.frames.tobytes() == b.frames.tobytes()
    assert gen_clip(42.5, SMALL, seed=10).frames.tobytes() != a.frames.tobytes()


def test_cavity_darker_than_background():
    cfg = SyntheticConfig(resolution=64, total_frames=4, noise_sigma=0.0)
    clip = gen_clip(50, cfg, seed=0)
    cav = render_masks(50, cfg, seed=0)
    assert clip.frames[:, 0][cav].mean() < clip.frames[:, 0][~cav].mean() - 0.3


def test_sample_indices_examples():
    np.testing.assert_array_equal(sample_indices(175, 48, 2, 0), np.arange(0, 95, 2))
    np.testing.assert_array_equal(sample_indices(10, 48, 2, 0), (2 * np.arange(48)) % 10)
    with pytest.raises(ContractError):
        sample_indices(0)
    with pytest.raises(ValidationError):
        sample_indices(10, 0)


@given(st.integers(1, 200), st.integers(1, 130), st.integers(1, 4), st.integers(0, 300))
@settings(max_examples=100, deadline=None)
def test_sample_length_and_bounds(t, length, stride, offset):
    idx = sample_indices(t, length, stride, offset)
    assert len(idx) == length and idx.min() >= 0 and idx.max() < t


def test_frame_sample_offsets():
    frames = np.arange(175, dtype=np.float32).reshape(175, 1, 1, 1)
    out = frame_sample(frames, 48, 2)
    np.testing.assert_array_equal(out[:, 0, 0, 0], np.arange(0, 95, 2))
    rng = np.random.default_rng(0)
    for _ in range(20):
        got = frame_sample(frames, 48, 2, rng=rng)[:, 0, 0, 0]
        assert got.shape == (48,) and np.all(np.diff(got) == 2) and got[-1] < 175
    with pytest.raises(ContractError):
        frame_sample(np.zeros((0, 1, 2, 2)), 4)


def _manifest(efs, split="TRAIN"):
    return Manifest([ManifestRow(f"c{i:04d}", ef, split) for i, ef in enumerate(efs)])


def test_few_shot_full_coverage():
    m = _manifest(list(range(20, 81)) + [50.5] * 3)
    assert len(few_shot_sample(m, 1, seed=0)) == 61


def test_few_shot_counts_and_clamping():
    efs = [0.2, 0.7, 1.5, 3.3, 3.9, 3.1, 100.0, 99.5, 7.0]
    m = _manifest(efs)
    # classes: 1 -> 3 rows (0.2, 0.7, 1.5), 3 -> 3 rows, 99 -> 1, 100 -> 1, 7 -> 1
    sub = few_shot_sample(m, 2, seed=4)
    classes = [min(max(int(np.floor(r.ef)), 1), 100) for r in sub]
    assert sorted(classes) == [1, 1, 3, 3, 7, 99, 100]
    assert len(few_shot_sample(m, 50, seed=4)) == len(m)


def test_few_shot_nested_and_deterministic():
    rng = np.random.default_rng(5)
    m = _manifest(rng.uniform(10, 90, 400))
    subs = [set(few_shot_sample(m, n, seed=3).file_names) for n in (1, 2, 4, 8)]
    assert subs[0] <= subs[1] <= subs[2] <= subs[3]
    assert few_shot_sample(m, 2, seed=3).file_names == few_shot_sample(m, 2, seed=3).file_names
    assert set(few_shot_sample(m, 2, seed=4).file_names) != subs[1]


def test_few_shot_ignores_other_splits():
    m = Manifest(_manifest([30, 40]).rows + [ManifestRow("v", 50, "VAL")])
    assert {r.split for r in few_shot_sample(m, 1)} == {"TRAIN"}
    with pytest.raises(ValidationError):
        few_shot_sample(_manifest([30], "TEST"), 1)
    with pytest.raises(ValidationError):
        few_shot_sample(m, 0)


@pytest.mark.skipif(not os.environ.get("ECHONET_FILELIST"),
                    reason="set ECHONET_FILELIST to a real EchoNet-Dynamic FileList.csv")
def test_echonet_shot_counts():
    m = read_manifest(os.environ["ECHONET_FILELIST"])
    counts = [len(few_shot_sample(m, n, seed=0)) for n in (1, 2, 4, 8)]
    assert counts == [84, 162, 307, 570]


def test_manifest_validation():
    with pytest.raises(ValidationError):
        Manifest([ManifestRow("a", 1, "TRAIN")] * 2)
    with pytest.raises(ValidationError):
        _manifest([120])
    with pytest.raises(ValidationError):
        _manifest([20], split="DEV")


def test_manifest_round_trip_and_layout(tmp_path):
    m = Manifest([ManifestRow("a", 55.123456789, "TRAIN"), ManifestRow("b", 0.1, "TEST")])
    p = tmp_path / "FileList.csv"
    write_manifest(p, m)
    assert p.read_bytes().startswith(b"FileName,EF,Split\n")
    assert b"\r" not in p.read_bytes()
    assert read_manifest(p) == m


def test_manifest_extra_columns(tmp_path):
    p = tmp_path / "FileList.csv"
    p.write_text("FileName,EF,ESV,EDV,FrameHeight,FrameWidth,FPS,NumberOfFrames,Split\n"
                 "0X1A,52.3,1,2,112,112,50,174,train\n")
    assert read_manifest(p).rows == [ManifestRow("0X1A", 52.3, "TRAIN")]


def test_manifest_errors(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("Name,EF\nx,3\n")
    with pytest.raises(FormatError):
        read_manifest(p)
    p.write_text("FileName,EF,Split\nx,abc,TRAIN\n")
    with pytest.raises(FormatError):
        read_manifest(p)


def test_clip_layout(tmp_path):
    frames = np.arange(2 * 3 * 4, dtype=np.float32).reshape(2, 1, 3, 4) / 24
    p = tmp_path / "x.efv"
    write_clip(p, VideoClip(frames, 30.0, "x"))
    raw = p.read_bytes()
    assert raw[:4] == CLIP_MAGIC and struct.unpack("<III", raw[4:16]) == (2, 3, 4)
    assert raw[16:] == frames.astype("<f4").tobytes()
    back = read_clip(p, 30.0)
    assert back == VideoClip(frames, 30.0, "x")


def test_clip_errors(tmp_path):
    p = tmp_path / "x.efv"
    write_clip(p, VideoClip(np.zeros((2, 1, 3, 3), np.float32), 1.0))
    raw = p.read_bytes()
    p.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError) as exc:
        read_clip(p)
    assert exc.value.offset == 0
    p.write_bytes(raw[:10])
    with pytest.raises(FormatError) as exc:
        read_clip(p)
    assert exc.value.offset == 10
    p.write_bytes(raw[:-4])
    with pytest.raises(FormatError) as exc:
        read_clip(p)
    assert exc.value.offset == len(raw) - 4
    assert "byte offset" in str(exc.value)


def test_dataset_round_trip(tmp_path):
    cfg = SyntheticConfig(resolution=16, total_frames=6)
    m, clips = make_synthetic_dataset(1, 30, 34, seed=2, cfg=cfg, val_per_class=1, test_per_class=1)
    assert len(m) == 15 and len(m.split("TRAIN")) == 5
    for r in m:
        assert int(np.floor(r.ef)) == int(r.file_name.split("_")[1])
    write_dataset(tmp_path, m, clips)
    m2, store = read_dataset(tmp_path)
    assert m2 == m and len(store) == 15
    for name in m.file_names:
        assert store[name] == clips[name]
