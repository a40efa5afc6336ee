"""Synthetic echo-like clips, clip frame sampling, few-shot subsets and dataset files.

A synthetic clip is a dark ellipse (the ventricle cavity) with a bright wall
on a speckled background. The cavity area follows
``A(t) = EDA * (1 - f * (1 - cos(2 pi t / P + phi)) / 2)`` with ``f = EF/100``,
so the area swings between EDA and ``ESA = EDA * (1 - EF/100)``.

On disk a dataset directory holds ``FileList.csv`` (``FileName,EF,Split``)
and ``Videos/<FileName>.efv`` clip files.
"""

from __future__ import annotations

import csv
import io
import os
import struct
from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigError, ContractError, FormatError, ValidationError

SPLITS = ("TRAIN", "VAL", "TEST")
CLIP_MAGIC = b"EFV1"
MANIFEST_NAME = "FileList.csv"
VIDEO_DIR = "Videos"
CLIP_SUFFIX = ".efv"

CAVITY_LEVEL = 0.08
WALL_LEVEL = 0.95


@dataclass
class VideoClip:
    frames: np.ndarray  # (T, 1, H, W) float32 in [0, 1]
    ef_label: float
    id: str = ""

    def __post_init__(self):
        f = np.asarray(self.frames, dtype=np.float32)
        if f.ndim == 3:
            f = f[:, None]
        if f.ndim != 4 or f.shape[0] < 1 or f.shape[1] != 1:
            raise ValidationError(f"clip frames must be (T, 1, H, W), got {np.shape(self.frames)}")
        self.frames = f

    @property
    def T(self):
        return self.frames.shape[0]

    def __eq__(self, other):
        if not isinstance(other, VideoClip):
            return NotImplemented
        return (self.id == other.id and self.ef_label == other.ef_label
                and self.frames.shape == other.frames.shape
                and self.frames.tobytes() == other.frames.tobytes())


@dataclass(frozen=True)
class SyntheticConfig:
    resolution: int = 112
    total_frames: int = 175
    cycle_period: float = 32.0
    ef_range: tuple = (10.0, 90.0)
    noise_sigma: float = 0.02
    seed: int = 0
    period_jitter: float = 0.0
    eda_range: tuple = (0.10, 0.18)
    tissue_sigma: float = 0.04

    def __post_init__(self):
        lo, hi = self.ef_range
        if not 0 <= lo <= hi <= 100:
            raise ConfigError(f"ef_range must lie within [0, 100], got {self.ef_range}")
        if self.cycle_period < 8:
            raise ConfigError("cycle_period must be >= 8 frames")
        if self.resolution < 8 or self.total_frames < 1:
            raise ConfigError("resolution >= 8 and total_frames >= 1 required")
        if not 0 <= self.period_jitter < 1:
            raise ConfigError("period_jitter must be in [0, 1)")
        if self.noise_sigma < 0 or self.tissue_sigma < 0:
            raise ConfigError("noise_sigma and tissue_sigma must be >= 0")


def _ellipse_masks(cfg, ef, rng):
    r = cfg.resolution
    ratio = rng.uniform(1.3, 1.7)
    eda = rng.uniform(*cfg.eda_range) * r * r
    rx0 = np.sqrt(eda / (np.pi * ratio))
    ry0 = ratio * rx0
    cx = r / 2 + rng.uniform(-0.05, 0.05) * r
    cy = r / 2 + rng.uniform(-0.05, 0.05) * r
    period = cfg.cycle_period * rng.uniform(1 - cfg.period_jitter, 1 + cfg.period_jitter)
    phase = rng.uniform(0, 2 * np.pi)
    wall = rng.uniform(0.18, 0.28)

    t = np.arange(cfg.total_frames)
    area_scale = 1 - (ef / 100.0) * (1 - np.cos(2 * np.pi * t / period + phase)) / 2
    s = np.sqrt(area_scale)[:, None, None]
    yy, xx = np.mgrid[0:r, 0:r] + 0.5
    rho = ((xx - cx) / rx0) ** 2 + ((yy - cy) / ry0) ** 2
    cavity = rho[None] <= s ** 2
    # the wall keeps its outer contour tied to the cavity so it thickens in systole
    outer = rho[None] <= (s + wall) ** 2
    return cavity, outer & ~cavity


def render_masks(ef, cfg=SyntheticConfig(), seed=0):
    """Noise-free cavity masks (T, H, W) exactly as ``gen_clip`` draws them."""
    rng = np.random.default_rng([cfg.seed, seed])
    cavity, _ = _ellipse_masks(cfg, ef, rng)
    return cavity


def gen_clip(ef, cfg=SyntheticConfig(), seed=0, clip_id=None):
    lo, hi = cfg.ef_range
    if not lo <= ef <= hi:
        raise ValidationError(f"ef {ef} outside synthetic range [{lo}, {hi}]")
    rng = np.random.default_rng([cfg.seed, seed])
    cavity, wall = _ellipse_masks(cfg, ef, rng)
    r = cfg.resolution
    tissue = np.clip(0.55 + cfg.tissue_sigma * rng.standard_normal((r, r)), 0.0, 1.0)
    frames = np.where(cavity, CAVITY_LEVEL, np.where(wall, WALL_LEVEL, tissue[None]))
    frames = frames + cfg.noise_sigma * rng.standard_normal(frames.shape)
    frames = np.clip(frames, 0.0, 1.0).astype(np.float32)
    return VideoClip(frames[:, None], float(ef), clip_id or f"synth_{seed}")


def measured_ef(masks):
    """(max area - min area) / max area * 100 from per-frame masks."""
    areas = masks.reshape(masks.shape[0], -1).sum(axis=1).astype(float)
    return 100.0 * (areas.max() - areas.min()) / areas.max()


# --------------------------------------------------------------- sampling

def sample_indices(n_frames, length=48, stride=2, offset=0):
    if n_frames < 1:
        raise ContractError("cannot sample from an empty clip")
    if length < 1 or stride < 1:
        raise ValidationError("length and stride must be >= 1")
    return (offset + stride * np.arange(length)) % n_frames


def frame_sample(clip, length=48, stride=2, offset=0, rng=None):
    """Frames ``offset, offset+stride, ...`` (wrapping modulo T).

    With ``rng`` the offset is drawn uniformly so that the window fits
    inside the clip when it can.
    """
    frames = clip.frames if isinstance(clip, VideoClip) else np.asarray(clip)
    t = frames.shape[0]
    if t < 1:
        raise ContractError("cannot sample from an empty clip")
    if rng is not None:
        span = (length - 1) * stride + 1
        offset = int(rng.integers(0, max(t - span, 0) + 1))
    return frames[sample_indices(t, length, stride, offset)]


# --------------------------------------------------------------- manifest

@dataclass(frozen=True)
class ManifestRow:
    file_name: str
    ef: float
    split: str


@dataclass
class Manifest:
    rows: list = field(default_factory=list)

    def __post_init__(self):
        names = set()
        for row in self.rows:
            if row.file_name in names:
                raise ValidationError(f"duplicate file name {row.file_name!r}")
            names.add(row.file_name)
            if not 0 <= row.ef <= 100:
                raise ValidationError(f"EF {row.ef} of {row.file_name!r} outside [0, 100]")
            if row.split not in SPLITS:
                raise ValidationError(f"unknown split {row.split!r}")

    def __len__(self):
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def split(self, name):
        return Manifest([r for r in self.rows if r.split == name])

    @property
    def file_names(self):
        return [r.file_name for r in self.rows]


def write_manifest(path, manifest):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["FileName", "EF", "Split"])
        for row in manifest.rows:
            w.writerow([row.file_name, repr(float(row.ef)), row.split])


def read_manifest(path):
    """Read ``FileName,EF,Split`` rows; extra columns (as in EchoNet FileList.csv) are ignored."""
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        text = raw.decode("utf-8-sig")
    except UnicodeDecodeError as exc:
        raise FormatError("manifest is not UTF-8", exc.start) from None
    reader = csv.DictReader(io.StringIO(text))
    missing = {"FileName", "EF", "Split"} - set(reader.fieldnames or ())
    if missing:
        raise FormatError(f"manifest header lacks {sorted(missing)}", 0)
    rows = []
    for line_no, rec in enumerate(reader, start=2):
        try:
            rows.append(ManifestRow(rec["FileName"], float(rec["EF"]), rec["Split"].strip().upper()))
        except (TypeError, ValueError, AttributeError):
            raise FormatError(f"malformed manifest line {line_no}") from None
    return Manifest(rows)


def few_shot_sample(manifest, n_shot, seed=0):
    """At most ``n_shot`` TRAIN rows per integer EF class (floor, clamped to 1..100).

    Each class gets a fixed random order from ``(seed, class)``, so a larger
    ``n_shot`` always yields a superset. Manifest order is preserved.
    """
    if n_shot < 1:
        raise ValidationError("n_shot must be >= 1")
    train = [r for r in manifest.rows if r.split == "TRAIN"]
    if not train:
        raise ValidationError("manifest has no TRAIN rows")
    by_class = {}
    for row in train:
        cls = min(max(int(np.floor(row.ef)), 1), 100)
        by_class.setdefault(cls, []).append(row)
    keep = set()
    for cls, rows in by_class.items():
        rows = sorted(rows, key=lambda r: r.file_name)
        order = np.random.default_rng([seed, cls]).permutation(len(rows))
        keep.update(rows[i].file_name for i in order[:n_shot])
    return Manifest([r for r in train if r.file_name in keep])


# ------------------------------------------------------------- clip files

def write_clip(path, clip):
    t, _, h, w = clip.frames.shape
    with open(path, "wb") as fh:
        fh.write(CLIP_MAGIC)
        fh.write(struct.pack("<III", t, h, w))
        fh.write(np.ascontiguousarray(clip.frames, dtype="<f4").tobytes())


def read_clip(path, ef_label=float("nan"), clip_id=None):
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 4 or buf[:4] != CLIP_MAGIC:
        raise FormatError(f"{path}: bad clip magic", 0)
    if len(buf) < 16:
        raise FormatError(f"{path}: truncated header", len(buf))
    t, h, w = struct.unpack("<III", buf[4:16])
    need = 16 + 4 * t * h * w
    if len(buf) < need:
        raise FormatError(f"{path}: truncated frame data, expected {need} bytes", len(buf))
    if len(buf) > need:
        raise FormatError(f"{path}: trailing bytes after frame data", need)
    frames = np.frombuffer(buf, dtype="<f4", offset=16).astype(np.float32).reshape(t, 1, h, w)
    if clip_id is None:
        clip_id = os.path.basename(path)[:-len(CLIP_SUFFIX)]
    return VideoClip(frames, ef_label, clip_id)


class ClipStore(Mapping):
    """Lazy ``file_name -> VideoClip`` view of a dataset directory."""

    def __init__(self, root, manifest):
        self.root = root
        self._labels = {r.file_name: r.ef for r in manifest.rows}

    def path(self, name):
        return os.path.join(self.root, VIDEO_DIR, name + CLIP_SUFFIX)

    def __getitem__(self, name):
        return read_clip(self.path(name), self._labels[name], name)

    def __iter__(self):
        return iter(self._labels)

    def __len__(self):
        return len(self._labels)


def write_dataset(root, manifest, clips):
    os.makedirs(os.path.join(root, VIDEO_DIR), exist_ok=True)
    write_manifest(os.path.join(root, MANIFEST_NAME), manifest)
    for row in manifest.rows:
        write_clip(os.path.join(root, VIDEO_DIR, row.file_name + CLIP_SUFFIX), clips[row.file_name])


def read_dataset(root):
    manifest = read_manifest(os.path.join(root, MANIFEST_NAME))
    return manifest, ClipStore(root, manifest)


def make_synthetic_dataset(clips_per_class=1, ef_min=20, ef_max=80, seed=0,
                           cfg=None, val_per_class=0, test_per_class=0):
    """Clips for every integer EF class in ``[ef_min, ef_max]``; labels are ``class + U[0, 1)``.

    Returns ``(manifest, {file_name: VideoClip})``.
    """
    cfg = cfg or SyntheticConfig(seed=seed)
    lo, hi = cfg.ef_range
    rows, clips = [], {}
    counts = {"TRAIN": clips_per_class, "VAL": val_per_class, "TEST": test_per_class}
    for s_idx, split in enumerate(SPLITS):
        for cls in range(int(ef_min), int(ef_max) + 1):
            for j in range(counts[split]):
                clip_seed = (s_idx * 1000 + cls) * 1000 + j
                rng = np.random.default_rng([seed, clip_seed])
                ef = float(min(max(cls + rng.uniform(0.0, 1.0), lo), hi))
                name = f"{split.lower()}_{cls:03d}_{j:02d}"
                clips[name] = gen_clip(ef, cfg, seed=clip_seed, clip_id=name)
                rows.append(ManifestRow(name, ef, split))
    return Manifest(rows), clips
