import numpy as np
import pytest

from cardiacef import diffcore as dc
from cardiacef.encoder import (ClassPrototypes, EncoderConfig, FrameEncoder, build_prototypes,
                               encode_video, load_checkpoint, prompt_variants, save_checkpoint)
from cardiacef.exceptions import ContractError, FormatError, ShapeError
from cardiacef.ordinal import BinSpec


@pytest.fixture(scope="module")
def encoder():
    return FrameEncoder(EncoderConfig(), seed=0)


def test_default_shapes(encoder):
    img = dc.Tensor(np.random.default_rng(0).random((1, 112, 112)).astype(np.float32))
    fmap, pooled = encoder.encode_frame(img)
    assert fmap.shape == (32, 14, 14) and pooled.shape == (32,)
    fmap56, _ = encoder.encode_frame(dc.Tensor(np.zeros((1, 56, 56), np.float32)))
    assert fmap56.shape == (32, 7, 7)


def test_unsupported_resolution(encoder):
    with pytest.raises(ShapeError):
        encoder.encode_frame(dc.Tensor(np.zeros((1, 100, 100), np.float32)))
    with pytest.raises(ShapeError):
        encoder.encode_frame(dc.Tensor(np.zeros((1, 112, 56), np.float32)))


def test_zero_image_gives_bias_response(encoder):
    z = dc.Tensor(np.zeros((1, 112, 112), np.float32))
    a = encoder.encode_frame(z)[1].data
    b = encoder.encode_frame(z)[1].data
    np.testing.assert_array_equal(a, b)
    # first stage output of a zero image is tanh(bias) everywhere
    fm = dc.tanh(dc.add_bias(dc.conv2d(z, encoder.params["encoder.conv0.weight"], 2, 1),
                             encoder.params["encoder.conv0.bias"], axis=0)).data
    np.testing.assert_allclose(fm[:, 5, 5], np.tanh(encoder.params["encoder.conv0.bias"].data))


def test_deterministic_and_contrast_sensitive(encoder):
    x = np.random.default_rng(1).random((1, 56, 56)).astype(np.float32)
    p1 = encoder.encode_frame(dc.Tensor(x))[1].data
    p2 = encoder.encode_frame(dc.Tensor(x.copy()))[1].data
    np.testing.assert_array_equal(p1, p2)
    p3 = encoder.encode_frame(dc.Tensor(2 * x))[1].data
    assert np.any(p1 != p3)


def test_same_seed_same_params():
    a = FrameEncoder(seed=5).params
    b = FrameEncoder(seed=5).params
    for k in a:
        np.testing.assert_array_equal(a[k].data, b[k].data)


@pytest.mark.parametrize("seed", range(5))
def test_encode_frame_gradcheck(seed):
    with dc.precision("float64"):
        enc = FrameEncoder(EncoderConfig(stage_channels=(2, 3, 4)), seed=seed)
    rng = np.random.default_rng(seed)
    img = dc.Tensor(rng.random((1, 16, 16)))
    w = dc.Tensor(rng.standard_normal(4))
    rep = dc.gradcheck(lambda im, *ps: dc.sum(dc.mul(enc.encode_frame(im)[1], w)),
                       [img] + list(enc.params.values()), "encode_frame")
    assert rep.max_rel_error <= 1e-4


def test_encode_video(encoder):
    frames = np.random.default_rng(2).random((5, 1, 56, 56)).astype(np.float32)
    F = encode_video(frames, encoder)
    assert F.shape == (5, 32)
    np.testing.assert_allclose(F.data[3], encoder.encode_frame(dc.Tensor(frames[3]))[1].data, atol=1e-6)
    with pytest.raises(ContractError):
        encode_video(np.zeros((0, 1, 56, 56), np.float32), encoder)


def test_prompt_variants():
    texts = prompt_variants(45.0, 55.0)
    assert len(texts) >= 4 and len(set(texts)) == len(texts)
    assert texts[0] == "The left ventricular ejection fraction is estimated to be mildly reduced LVEF (45-54%)"
    assert prompt_variants(45.0, 55.0) == texts
    assert "90-100%" in prompt_variants(90.0, 100.0, last=True)[0]


def test_prototypes_deterministic_unit_norm():
    bins = BinSpec.uniform(10)
    a = build_prototypes(bins, 32, seed=1)
    b = build_prototypes(bins, 32, seed=1)
    assert isinstance(a, ClassPrototypes) and a.K == 10
    assert a.matrix.shape == (10, 32) and a.matrix.requires_grad
    assert a.matrix.data.tobytes() == b.matrix.data.tobytes()
    np.testing.assert_allclose(np.linalg.norm(a.matrix.data, axis=1), 1.0, atol=1e-6)
    c = build_prototypes(bins, 32, seed=2)
    assert np.any(a.matrix.data != c.matrix.data)
    assert all(len(t) >= 4 for t in a.prompt_texts)


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    params = {"a.weight": rng.standard_normal((3, 2, 3, 3)).astype(np.float32),
              "b": dc.Tensor(rng.standard_normal(7).astype(np.float32)),
              "scalar": np.float32(2.5) * np.ones((), np.float32),
              "ünï": np.arange(4, dtype=np.float32).reshape(2, 2)}
    path = tmp_path / "m.efk"
    save_checkpoint(path, params)
    raw = path.read_bytes()
    assert raw[:4] == b"EFK1"
    back = load_checkpoint(path)
    assert list(back) == list(params)
    for k, v in params.items():
        v = v.data if isinstance(v, dc.Tensor) else v
        assert back[k].shape == v.shape and back[k].tobytes() == np.asarray(v, "<f4").tobytes()
    save_checkpoint(tmp_path / "again.efk", back)
    assert (tmp_path / "again.efk").read_bytes() == raw


def test_checkpoint_layout(tmp_path):
    save_checkpoint(tmp_path / "x", {"w": np.array([[1.0, 2.0]], np.float32)})
    raw = (tmp_path / "x").read_bytes()
    expected = (b"EFK1" + (1).to_bytes(4, "little") + b"w" + (2).to_bytes(4, "little")
                + (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
                + np.array([1.0, 2.0], "<f4").tobytes())
    assert raw == expected


def test_checkpoint_errors(tmp_path):
    p = tmp_path / "bad"
    p.write_bytes(b"NOPE")
    with pytest.raises(FormatError) as exc:
        load_checkpoint(p)
    assert exc.value.offset == 0
    save_checkpoint(p, {"w": np.ones(10, np.float32)})
    p.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(FormatError) as exc:
        load_checkpoint(p)
    assert exc.value.offset == 4 + 4 + 1 + 4 + 4
