"""Convolutional frame encoder, prompt-seeded class prototypes and checkpoint I/O."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .echozoom import echozoom_forward
from .exceptions import ConfigError, ContractError, FormatError, ShapeError


@dataclass(frozen=True)
class EncoderConfig:
    in_channels: int = 1
    stage_channels: tuple = (8, 16, 32)
    base_resolution: int = 112

    def __post_init__(self):
        if not self.stage_channels or any(c < 1 for c in self.stage_channels):
            raise ConfigError(f"bad stage_channels {self.stage_channels}")

    @property
    def feature_dim(self):
        return self.stage_channels[-1]

    @property
    def downsample(self):
        return 2 ** len(self.stage_channels)


def uniform_init(rng, shape, fan_in, dtype):
    a = np.sqrt(1.0 / fan_in)
    return dc.Tensor(rng.uniform(-a, a, size=shape).astype(dtype), requires_grad=True)


class FrameEncoder:
    """Stack of stride-2 3x3 convolutions, each followed by a bias and tanh.

    Any square input whose side is a multiple of ``2 ** n_stages`` is
    accepted; a 112 px frame gives a 14x14 map with the default three stages.
    """

    def __init__(self, config=EncoderConfig(), seed=0, dtype=None):
        self.config = config
        dtype = dtype or dc.get_default_dtype()
        rng = np.random.default_rng([seed, 101])
        self.params = {}
        cin = config.in_channels
        for i, cout in enumerate(config.stage_channels):
            fan_in = cin * 9
            self.params[f"encoder.conv{i}.weight"] = uniform_init(rng, (cout, cin, 3, 3), fan_in, dtype)
            self.params[f"encoder.conv{i}.bias"] = uniform_init(rng, (cout,), fan_in, dtype)
            cin = cout

    @property
    def feature_dim(self):
        return self.config.feature_dim

    def check_resolution(self, h, w=None):
        w = h if w is None else w
        d = self.config.downsample
        if h != w or h < d or h % d:
            raise ShapeError(f"unsupported frame size {h}x{w}: need a square multiple of {d}")

    def feature_maps(self, images):
        """(N, Cin, h, h) or (Cin, h, h) -> feature map of the last stage."""
        self.check_resolution(*images.shape[-2:])
        x = images
        chan_axis = x.ndim - 3
        for i in range(len(self.config.stage_channels)):
            x = dc.conv2d(x, self.params[f"encoder.conv{i}.weight"], stride=2, padding=1,
                          pad_mode="edge")
            x = dc.tanh(dc.add_bias(x, self.params[f"encoder.conv{i}.bias"], axis=chan_axis))
        return x

    def encode_frame(self, image):
        fmap = self.feature_maps(image)
        return fmap, dc.global_avg_pool(fmap)


def encode_video(frames, encoder, zoom=None):
    """Per-frame feature vectors (B, C) for a stack of frames (B, 1, h, w).

    With ``zoom`` set, each frame's map is the multi-scale fused map before
    global pooling.
    """
    if not isinstance(frames, dc.Tensor):
        frames = dc.Tensor(np.asarray(frames, dtype=dc.get_default_dtype()))
    if frames.ndim == 3:
        frames = dc.reshape(frames, (frames.shape[0], 1) + frames.shape[1:])
    if frames.ndim != 4 or frames.shape[0] == 0:
        raise ContractError(f"encode_video needs a nonempty (B, 1, h, w) stack, got {frames.shape}")
    if zoom is None:
        fmap = encoder.feature_maps(frames)
    else:
        fmap = echozoom_forward(frames, encoder, zoom)
    return dc.global_avg_pool(fmap)


# ------------------------------------------------------------------ prompts

_GRADES = (
    (30.0, "severely reduced"),
    (45.0, "moderately reduced"),
    (55.0, "mildly reduced"),
    (70.0, "normal"),
    (float("inf"), "hyperdynamic"),
)

PROMPT_TEMPLATES = (
    "The left ventricular ejection fraction is estimated to be {grade} LVEF ({span}%)",
    "LVEF of {span}%, consistent with {grade} left ventricular systolic function",
    "Apical four-chamber view shows {grade} systolic function with an ejection fraction of {span}%",
    "The ejection fraction of the left ventricle falls within {span}%",
    "Echocardiogram demonstrates {grade} contraction, ejection fraction {span} percent",
)


def _grade(center):
    for bound, name in _GRADES:
        if center < bound:
            return name
    return _GRADES[-1][1]


def format_span(lo, hi, last=False):
    if float(lo).is_integer() and float(hi).is_integer():
        top = int(hi) if last else int(hi) - 1
        return f"{int(lo)}-{top}"
    return f"{lo:.1f}-{hi:.1f}"


def prompt_variants(lo, hi, last=False):
    """Template descriptions for the EF interval [lo, hi)."""
    span = format_span(lo, hi, last)
    grade = _grade(0.5 * (lo + hi))
    return [t.format(grade=grade, span=span) for t in PROMPT_TEMPLATES]


def _text_vector(text, seed, dim):
    digest = hashlib.sha256(f"{seed}\x00{text}".encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


@dataclass
class ClassPrototypes:
    matrix: dc.Tensor
    prompt_texts: list = field(default_factory=list)

    @property
    def K(self):
        return self.matrix.shape[0]


def build_prototypes(bins, dim, seed=0, dtype=None):
    """One unit-norm, trainable row per bin: the renormalized mean of its prompt vectors."""
    dtype = dtype or dc.get_default_dtype()
    rows, texts = [], []
    for i in range(bins.K):
        variants = prompt_variants(bins.edges[i], bins.edges[i + 1], last=i == bins.K - 1)
        v = np.mean([_text_vector(t, seed, dim) for t in variants], axis=0)
        rows.append(v / np.linalg.norm(v))
        texts.append(variants)
    return ClassPrototypes(dc.Tensor(np.array(rows, dtype=dtype), requires_grad=True), texts)


# --------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"EFK1"


def save_checkpoint(path, params):
    """Write named arrays as little-endian float32 records after an ``EFK1`` header."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        for name, value in params.items():
            arr = np.asarray(value.data if isinstance(value, dc.Tensor) else value)
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    out = {}
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"truncated checkpoint: need {n} bytes", pos)
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    while pos < len(buf):
        (nlen,) = struct.unpack("<I", take(4))
        start = pos
        try:
            name = take(nlen).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("parameter name is not UTF-8", start) from None
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(take(4 * count), dtype="<f4").astype(np.float32).reshape(dims)
    return out
