"""Full network: frame encoder (optionally multi-scale), frame aggregator, ordinal head."""

from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .echozoom import ZoomConfig
from .encoder import EncoderConfig, FrameEncoder, encode_video
from .mfl import AggregatorVariant, mfl_forward
from .ordinal import OrdinalHead

# fixed input standardization for pixels in [0, 1]
PIXEL_MEAN = 0.5
PIXEL_STD = 0.25


class CardiacCLIPModel:
    def __init__(self, bins, resolution=112, stage_channels=(8, 16, 32), aggregator="mfl",
                 echozoom=True, upsample="bilinear", temperature=0.07, mfl_hidden=(64, 32),
                 regressor_hidden=32, n_heads=4, seed=0, dtype=None):
        dtype = dtype or dc.get_default_dtype()
        self.dtype = dtype
        self.encoder = FrameEncoder(EncoderConfig(stage_channels=tuple(stage_channels),
                                                  base_resolution=resolution), seed=seed, dtype=dtype)
        self.encoder.check_resolution(resolution)
        self.resolution = resolution
        self.zoom = ZoomConfig(base_res=resolution, upsample=upsample) if echozoom else None
        dim = self.encoder.feature_dim
        self.aggregator = AggregatorVariant.create(aggregator, dim, seed=seed, hidden=tuple(mfl_hidden),
                                                   n_heads=n_heads, dtype=dtype)
        self.head = OrdinalHead(bins, dim, temperature=temperature, hidden=regressor_hidden,
                                seed=seed, dtype=dtype)

    @property
    def bins(self):
        return self.head.bins

    def parameters(self):
        named = dict(self.encoder.params)
        named.update(self.aggregator.parameters())
        named.update(self.head.parameters())
        return named

    def load_state(self, arrays):
        params = self.parameters()
        missing = set(params) - set(arrays)
        if missing:
            raise KeyError(f"checkpoint lacks parameters {sorted(missing)}")
        for name, t in params.items():
            src = np.asarray(arrays[name])
            if src.shape != t.shape:
                raise ValueError(f"{name}: checkpoint shape {src.shape} != model shape {t.shape}")
            t.data[...] = src

    def video_features(self, clips):
        """(N, C) video representations for N equal-length frame stacks (B, 1, h, w)."""
        stack = np.concatenate([np.asarray(c, dtype=self.dtype) for c in clips], axis=0)
        stack -= PIXEL_MEAN
        stack /= PIXEL_STD
        b = clips[0].shape[0]
        frames = encode_video(dc.Tensor(stack, dtype=self.dtype), self.encoder, self.zoom)
        rows = [mfl_forward(frames[i * b:(i + 1) * b], self.aggregator) for i in range(len(clips))]
        c = rows[0].shape[0]
        return dc.concat([dc.reshape(r, (1, c)) for r in rows], axis=0)

    def __call__(self, clips):
        return self.head(self.video_features(clips))
