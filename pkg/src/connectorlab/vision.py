"""Image -> patch-feature pipeline.

An input raster is fitted into a grid of square tiles chosen by coverage,
each tile is cut into square patches, and a small trainable per-patch
encoder (project -> GELU -> project -> add positional row) turns the
patches into feature rows. Features from all tiles are concatenated in
tile order into one (num_patches x d) matrix.

Pixels are carried as float32 in [0, 1]. PNG I/O goes through Pillow; a
raw planar format (little-endian u32 width/height/channels header, then
one byte plane per channel) is supported for exact byte-level round trips.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from PIL import Image

from . import autodiff as ad
from .errors import ConfigError, DataError, NumericError


def default_ratio_set(max_tiles=9):
    """All (rows, cols) grids with rows*cols <= max_tiles."""
    return [(r, c) for r in range(1, max_tiles + 1)
            for c in range(1, max_tiles + 1) if r * c <= max_tiles]


@dataclass(frozen=True)
class TilingConfig:
    tile_side: int = 56
    patch_side: int = 14
    max_tiles: int = 9
    ratio_set: tuple = field(default_factory=lambda: tuple(default_ratio_set(9)))

    def __post_init__(self):
        if self.tile_side % self.patch_side != 0:
            raise ConfigError(f"tile side {self.tile_side} not divisible by "
                              f"patch side {self.patch_side}")
        if not self.ratio_set:
            raise ConfigError("empty ratio set")
        for r, c in self.ratio_set:
            if r * c > self.max_tiles:
                raise ConfigError(f"grid {r}x{c} exceeds max tiles {self.max_tiles}")

    @property
    def patches_per_side(self):
        return self.tile_side // self.patch_side

    @property
    def patches_per_tile(self):
        return self.patches_per_side ** 2


def _coverage_exact(width, height, rows, cols, tile_side):
    # with s = min(cw/w, ch/h), covered fraction reduces to
    # min(h*cw/(w*ch), w*ch/(h*cw)); exact rationals keep ties honest
    a = Fraction(height * cols * tile_side, width * rows * tile_side)
    return min(a, 1 / a)


def coverage_fraction(width, height, rows, cols, tile_side):
    """Area fraction of the grid canvas filled by an aspect-preserving fit."""
    return float(_coverage_exact(width, height, rows, cols, tile_side))


def select_grid(width, height, cfg: TilingConfig):
    """Pick the (rows, cols) grid maximizing coverage.

    Ties break toward fewer tiles, then squarer grids, then lexicographic.
    """
    if width < 1 or height < 1:
        raise DataError(f"degenerate image size {width}x{height}")
    best = None
    for r, c in sorted(cfg.ratio_set):
        cov = _coverage_exact(width, height, r, c, cfg.tile_side)
        key = (-cov, r * c, abs(r - c), r, c)
        if best is None or key < best[0]:
            best = (key, (r, c))
    return best[1]


def resize_bilinear(img, out_h, out_w):
    """Bilinear resample (half-pixel centers, no extra filtering)."""
    if img.ndim == 2:
        img = img[:, :, None]
        squeeze = True
    else:
        squeeze = False
    h, w = img.shape[:2]
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0).astype(np.float32)[:, None, None]
    wx = (xs - x0).astype(np.float32)[None, :, None]
    img = img.astype(np.float32)
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    out = top * (1 - wy) + bot * wy
    return out[:, :, 0] if squeeze else out


@dataclass
class TileGrid:
    rows: int
    cols: int
    tiles: list  # row-major, each (tile_side, tile_side[, channels]) float32
    canvas: np.ndarray  # the resized+padded source the tiles were cut from

    def reassemble(self):
        side = self.tiles[0].shape[0]
        out = np.zeros_like(self.canvas)
        for i, t in enumerate(self.tiles):
            r, c = divmod(i, self.cols)
            out[r * side:(r + 1) * side, c * side:(c + 1) * side] = t
        return out


def tile_image(image, grid, cfg: TilingConfig) -> TileGrid:
    """Fit the image into the grid canvas (aspect-preserving bilinear resize,
    zero padding at right/bottom) and cut it into tiles."""
    image = np.asarray(image)
    if image.ndim not in (2, 3) or image.size == 0:
        raise DataError(f"bad image shape {image.shape}")
    if image.dtype == np.uint8:
        image = image.astype(np.float32) / 255.0
    rows, cols = grid
    ch, cw = rows * cfg.tile_side, cols * cfg.tile_side
    h, w = image.shape[:2]
    s = min(cw / w, ch / h)
    new_w = min(cw, max(1, round(w * s)))
    new_h = min(ch, max(1, round(h * s)))
    resized = resize_bilinear(image, new_h, new_w)
    canvas_shape = (ch, cw) if image.ndim == 2 else (ch, cw, image.shape[2])
    canvas = np.zeros(canvas_shape, dtype=np.float32)
    canvas[:new_h, :new_w] = resized
    tiles = [canvas[r * cfg.tile_side:(r + 1) * cfg.tile_side,
                    c * cfg.tile_side:(c + 1) * cfg.tile_side].copy()
             for r in range(rows) for c in range(cols)]
    return TileGrid(rows=rows, cols=cols, tiles=tiles, canvas=canvas)


def patchify(tile, patch_side):
    """Cut one tile into row-major flattened patch vectors.

    Pixel values are recentered from [0, 1] to [-1, 1] so that light/dark
    structure is zero-mean; a shared background otherwise dominates every
    patch vector and drowns the per-patch signal downstream.
    Returns an (n_patches, patch_side^2 * channels) float32 matrix.
    """
    tile = np.asarray(tile, dtype=np.float32)
    if tile.ndim == 2:
        tile = tile[:, :, None]
    side = tile.shape[0]
    if side % patch_side != 0 or tile.shape[1] % patch_side != 0:
        raise ConfigError(f"tile {tile.shape[:2]} not divisible by patch {patch_side}")
    n = side // patch_side
    cells = tile.reshape(n, patch_side, n, patch_side, tile.shape[2])
    return cells.transpose(0, 2, 1, 3, 4).reshape(n * n, -1) * 2.0 - 1.0


@dataclass
class ToyEncoderParams:
    """Per-patch encoder weights: project -> GELU -> project -> +position."""
    proj_in: ad.Tensor   # (patch_len, hidden)
    proj_out: ad.Tensor  # (hidden, d)
    positions: ad.Tensor  # (patches_per_tile, d)

    def named(self, prefix="encoder"):
        return {f"{prefix}.proj_in": self.proj_in,
                f"{prefix}.proj_out": self.proj_out,
                f"{prefix}.positions": self.positions}

    def tensors(self):
        return [self.proj_in, self.proj_out, self.positions]


def init_toy_encoder(patch_len, hidden, d, patches_per_tile, rng,
                     dtype=np.float32) -> ToyEncoderParams:
    def mat(rows, cols):
        a = (rng.normal(size=(rows, cols)) / np.sqrt(rows)).astype(dtype)
        return ad.Tensor(a, requires_grad=True)

    pos = ad.Tensor((rng.normal(size=(patches_per_tile, d)) * 0.02).astype(dtype),
                    requires_grad=True)
    return ToyEncoderParams(proj_in=mat(patch_len, hidden),
                            proj_out=mat(hidden, d), positions=pos)


@dataclass
class PatchFeatures:
    features: ad.Tensor        # (num_patches, d)
    per_tile_counts: list
    layout: list               # (tile_index, row, col) per patch

    @property
    def num_patches(self):
        return self.features.data.shape[0]


def encode(tile_patches, params: ToyEncoderParams, layout_side=None) -> PatchFeatures:
    """Encode per-tile patch matrices into one concatenated feature matrix."""
    dtype = params.proj_in.data.dtype
    blocks, counts, layout = [], [], []
    for t, patches in enumerate(tile_patches):
        x = ad.Tensor(np.ascontiguousarray(patches, dtype=dtype))
        h = ad.gelu(ad.matmul(x, params.proj_in))
        f = ad.matmul(h, params.proj_out)
        f = ad.add(f, params.positions)
        blocks.append(f)
        n = patches.shape[0]
        counts.append(n)
        side = layout_side or int(round(np.sqrt(n)))
        layout.extend((t, i // side, i % side) for i in range(n))
    out = blocks[0] if len(blocks) == 1 else ad.concat_rows(blocks)
    if not np.all(np.isfinite(out.data)):
        raise NumericError("non-finite encoder output")
    return PatchFeatures(features=out, per_tile_counts=counts, layout=layout)


def image_to_patches(image, cfg: TilingConfig):
    """select_grid + tile_image + patchify for a whole image."""
    image = np.asarray(image)
    h, w = image.shape[:2]
    grid = select_grid(w, h, cfg)
    tg = tile_image(image, grid, cfg)
    return [patchify(t, cfg.patch_side) for t in tg.tiles], tg


def image_to_features(image, cfg: TilingConfig, params: ToyEncoderParams):
    patches, tg = image_to_patches(image, cfg)
    feats = encode(patches, params, layout_side=cfg.patches_per_side)
    return feats, tg


# ---------------------------------------------------------------------------
# raster I/O

def load_png(path):
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB" if "A" in im.mode or im.mode == "P" else "L")
        return np.asarray(im)


def save_png(path, image):
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def save_raw(path, image):
    """Planar binary raster: LE u32 width, height, channels; then one
    row-major byte plane per channel."""
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    h, w, c = arr.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<III", w, h, c))
        for k in range(c):
            fh.write(arr[:, :, k].tobytes())


def load_raw(path):
    with open(path, "rb") as fh:
        head = fh.read(12)
        if len(head) != 12:
            raise DataError(f"truncated raw raster header in {path}")
        w, h, c = struct.unpack("<III", head)
        body = fh.read()
    if len(body) != w * h * c:
        raise DataError(f"raw raster payload size mismatch in {path}")
    planes = np.frombuffer(body, dtype=np.uint8).reshape(c, h, w)
    arr = planes.transpose(1, 2, 0)
    return arr[:, :, 0] if c == 1 else arr
