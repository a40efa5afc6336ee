"""Multi-resolution feature fusion.

The frame is upsampled 2x, cut into four quadrant tiles at the base
resolution, and every tile plus the original frame goes through the same
encoder. Tile feature maps are stitched back together, average-pooled down
to the base map size and averaged with the base map. No parameters are
added.

All functions accept either a single item (C, H, W) or a batch (N, C, H, W).
"""

from __future__ import annotations

from dataclasses import dataclass

from . import diffcore as dc
from .exceptions import ConfigError, ShapeError


@dataclass(frozen=True)
class ZoomConfig:
    base_res: int = 112
    upsample: str = "bilinear"
    fusion: str = "mean"
    grid: tuple = (2, 2)

    def __post_init__(self):
        if self.upsample not in ("nearest", "bilinear"):
            raise ConfigError(f"unknown upsample mode {self.upsample!r}")
        if self.fusion != "mean":
            raise ConfigError("only mean fusion is supported")
        if tuple(self.grid) != (2, 2):
            raise ConfigError("grid must be 2x2")
        if self.base_res < 2 or self.base_res % 2:
            raise ConfigError(f"base_res must be a positive even number, got {self.base_res}")

    @property
    def hi_res(self):
        return 2 * self.base_res


def _check_square(x, res, what):
    if x.shape[-2:] != (res, res):
        raise ShapeError(f"{what}: expected {res}x{res} input, got {x.shape[-2]}x{x.shape[-1]}")


def upsample(image, cfg=ZoomConfig()):
    _check_square(image, cfg.base_res, "upsample")
    return dc.upsample2x(image, cfg.upsample)


def split_tiles(image, cfg=ZoomConfig()):
    """Quadrants in row-major order: top-left, top-right, bottom-left, bottom-right."""
    _check_square(image, cfg.hi_res, "split_tiles")
    b = cfg.base_res
    lead = (slice(None),) * (image.ndim - 2)
    return [image[lead + (slice(r, r + b), slice(c, c + b))] for r in (0, b) for c in (0, b)]


def assemble_feature_map(tile_feats):
    tile_feats = list(tile_feats)
    if len(tile_feats) != 4:
        raise ShapeError(f"expected 4 tile maps, got {len(tile_feats)}")
    if any(t.shape != tile_feats[0].shape for t in tile_feats):
        raise ShapeError("tile feature maps differ in shape")
    ax = tile_feats[0].ndim
    top = dc.concat(tile_feats[:2], axis=ax - 1)
    bottom = dc.concat(tile_feats[2:], axis=ax - 1)
    return dc.concat([top, bottom], axis=ax - 2)


def pool_to_base(fmap):
    h, w = fmap.shape[-2:]
    if h % 2 or w % 2:
        raise ShapeError(f"pool_to_base needs even extents, got {h}x{w}")
    return dc.avg_pool2d(fmap, 2)


def fuse(base, pooled):
    if base.shape != pooled.shape:
        raise ShapeError(f"fuse: {base.shape} vs {pooled.shape}")
    return dc.scale(dc.add(base, pooled), 0.5)


def echozoom_forward(image, encoder, cfg=ZoomConfig()):
    """Fused feature map for one frame (1, h, w) or a batch of frames (N, 1, h, w).

    The base image and its four tiles share one encoder call.
    """
    batched = image.ndim == 4
    x = image if batched else dc.reshape(image, (1,) + image.shape)
    n = x.shape[0]
    tiles = split_tiles(upsample(x, cfg), cfg)
    maps = encoder.feature_maps(dc.concat([x] + tiles, axis=0))
    base = maps[:n]
    tile_maps = [maps[(k + 1) * n:(k + 2) * n] for k in range(4)]
    out = fuse(base, pool_to_base(assemble_feature_map(tile_maps)))
    return out if batched else dc.reshape(out, out.shape[1:])
