"""Streaming image access, resizing, patchification and patch embedding.

Two on-disk formats are supported:

* binary PGM (``P5``) / PPM (``P6``), 8-bit, memory-mapped;
* ``LVTI`` tiled raw images.  Header (little endian)::

      b"LVTI"  u32 width  u32 height  u32 channels  u32 tile_size  u32 dtype

  ``dtype`` is 0 for uint8 and 1 for float64.  Tiles follow in row-major
  tile order; every tile is stored at full ``tile_size x tile_size x
  channels`` size, edge tiles zero-padded.

Pixel values live on a 0..255 scale in both dtypes.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError, DimensionError, ImageFormatError
from .tensor import Tensor, _op, add, as_tensor, linear

LVTI_MAGIC = b"LVTI"
_LVTI_HEADER = struct.Struct("<4sIIIII")
_DTYPES = {0: np.dtype(np.uint8), 1: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype(np.uint8): 0, np.dtype("<f8"): 1}

NORM_MEAN = 0.5
NORM_STD = 0.5


class TiledImage:
    """Read-only random access to an image, one tile or row strip at a time."""

    def __init__(self, width: int, height: int, channels: int, tile_size: int,
                 pixels: np.ndarray, tiled: bool = False, path: Path | None = None):
        if channels not in (1, 3):
            raise ImageFormatError(f"unsupported channel count {channels}")
        self.width = width
        self.height = height
        self.channels = channels
        self.tile_size = tile_size
        self.path = path
        self._pixels = pixels
        self._tiled = tiled

    def __repr__(self) -> str:
        return f"TiledImage({self.width}x{self.height}x{self.channels}, tile={self.tile_size})"

    @property
    def dtype(self) -> np.dtype:
        return self._pixels.dtype

    @classmethod
    def from_array(cls, pixels: np.ndarray, tile_size: int = 512) -> "TiledImage":
        pixels = np.asarray(pixels)
        if pixels.ndim == 2:
            pixels = pixels[:, :, None]
        h, w, c = pixels.shape
        return cls(w, h, c, tile_size, pixels)

    def tile_grid(self) -> tuple[int, int]:
        return math.ceil(self.height / self.tile_size), math.ceil(self.width / self.tile_size)

    def read_tile(self, ty: int, tx: int) -> np.ndarray:
        t = self.tile_size
        return self.read_region(ty * t, min((ty + 1) * t, self.height), tx * t, min((tx + 1) * t, self.width))

    def read_region(self, y0: int, y1: int, x0: int, x1: int) -> np.ndarray:
        """Pixels ``[y0, y1) x [x0, x1)`` as an ``(h, w, channels)`` array."""
        if not (0 <= y0 <= y1 <= self.height and 0 <= x0 <= x1 <= self.width):
            raise IndexError(f"region {(y0, y1, x0, x1)} outside {self.width}x{self.height}")
        if not self._tiled:
            return np.array(self._pixels[y0:y1, x0:x1])
        t = self.tile_size
        out = np.empty((y1 - y0, x1 - x0, self.channels), dtype=self.dtype)
        for ty in range(y0 // t, (y1 - 1) // t + 1 if y1 > y0 else 0):
            for tx in range(x0 // t, (x1 - 1) // t + 1 if x1 > x0 else 0):
                ya, yb = max(y0, ty * t), min(y1, (ty + 1) * t)
                xa, xb = max(x0, tx * t), min(x1, (tx + 1) * t)
                tile = self._pixels[ty, tx]
                out[ya - y0:yb - y0, xa - x0:xb - x0] = tile[ya - ty * t:yb - ty * t, xa - tx * t:xb - tx * t]
        return out

    def read_rows(self, y0: int, y1: int) -> np.ndarray:
        return self.read_region(y0, y1, 0, self.width)

    def to_array(self) -> np.ndarray:
        return self.read_rows(0, self.height)


# ---------------------------------------------------------------- file formats


def _read_pnm_header(fh) -> tuple[bytes, int, int, int, int]:
    data = fh.read(512)
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise ImageFormatError("truncated PNM header")
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    magic = tokens[0]
    try:
        width, height, maxval = (int(t) for t in tokens[1:4])
    except ValueError as exc:
        raise ImageFormatError("bad PNM header") from exc
    return magic, width, height, maxval, pos + 1


def open_image(path: str | Path, tile_size: int = 512) -> TiledImage:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            head = fh.read(4)
            fh.seek(0)
            if head == LVTI_MAGIC:
                raw = fh.read(_LVTI_HEADER.size)
                if len(raw) < _LVTI_HEADER.size:
                    raise ImageFormatError(f"{path}: truncated LVTI header")
                _, w, h, c, t, code = _LVTI_HEADER.unpack(raw)
                if code not in _DTYPES or t < 1 or w < 1 or h < 1:
                    raise ImageFormatError(f"{path}: bad LVTI header")
                ty, tx = math.ceil(h / t), math.ceil(w / t)
                dtype = _DTYPES[code]
                need = _LVTI_HEADER.size + ty * tx * t * t * c * dtype.itemsize
                if path.stat().st_size < need:
                    raise ImageFormatError(f"{path}: truncated LVTI payload")
                pixels = np.memmap(path, dtype=dtype, mode="r", offset=_LVTI_HEADER.size,
                                   shape=(ty, tx, t, t, c))
                return TiledImage(w, h, c, t, pixels, tiled=True, path=path)
            if head[:2] in (b"P5", b"P6"):
                magic, w, h, maxval, offset = _read_pnm_header(fh)
                if maxval > 255 or maxval < 1:
                    raise ImageFormatError(f"{path}: only 8-bit PGM/PPM is supported")
                c = 1 if magic == b"P5" else 3
                if path.stat().st_size < offset + w * h * c:
                    raise ImageFormatError(f"{path}: truncated PNM payload")
                pixels = np.memmap(path, dtype=np.uint8, mode="r", offset=offset, shape=(h, w, c))
                return TiledImage(w, h, c, tile_size, pixels, path=path)
    except OSError as exc:
        if isinstance(exc, ImageFormatError):
            raise
        raise ImageFormatError(f"{path}: {exc}") from exc
    raise ImageFormatError(f"{path}: unrecognised image format")


def write_pnm(path: str | Path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8:
        raise ImageFormatError("PNM output needs uint8 pixels")
    if pixels.ndim == 3 and pixels.shape[2] == 1:
        pixels = pixels[:, :, 0]
    magic = b"P5" if pixels.ndim == 2 else b"P6"
    h, w = pixels.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + f"\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(pixels).tobytes())


def create_lvti(path: str | Path, width: int, height: int, channels: int = 3, tile_size: int = 512,
                dtype=np.uint8) -> np.memmap:
    """Create an LVTI file and return a writable tile view ``(ty, tx, t, t, c)``.

    The payload is allocated with ``truncate`` so untouched tiles stay sparse
    (all zero) on file systems that support holes.
    """
    dtype = np.dtype(dtype).newbyteorder("<") if np.dtype(dtype).itemsize > 1 else np.dtype(dtype)
    code = _DTYPE_CODES.get(np.dtype(dtype))
    if code is None:
        raise ImageFormatError(f"unsupported LVTI dtype {dtype}")
    ty, tx = math.ceil(height / tile_size), math.ceil(width / tile_size)
    size = ty * tx * tile_size * tile_size * channels * np.dtype(dtype).itemsize
    with open(path, "wb") as fh:
        fh.write(_LVTI_HEADER.pack(LVTI_MAGIC, width, height, channels, tile_size, code))
        fh.truncate(_LVTI_HEADER.size + size)
    return np.memmap(path, dtype=dtype, mode="r+", offset=_LVTI_HEADER.size,
                     shape=(ty, tx, tile_size, tile_size, channels))


def write_lvti(path: str | Path, pixels: np.ndarray, tile_size: int = 512) -> None:
    pixels = np.asarray(pixels)
    if pixels.ndim == 2:
        pixels = pixels[:, :, None]
    h, w, c = pixels.shape
    tiles = create_lvti(path, w, h, c, tile_size, pixels.dtype)
    t = tile_size
    for ty in range(tiles.shape[0]):
        for tx in range(tiles.shape[1]):
            block = pixels[ty * t:(ty + 1) * t, tx * t:(tx + 1) * t]
            tiles[ty, tx, :block.shape[0], :block.shape[1]] = block
    tiles.flush()
    del tiles


# ---------------------------------------------------------------- resizing


def _axis_weights(src: int, dst: int):
    """Half-pixel-centre bilinear sampling positions along one axis."""
    coord = (np.arange(dst) + 0.5) * src / dst - 0.5
    coord = np.clip(coord, 0.0, src - 1)
    i0 = np.floor(coord).astype(np.int64)
    i1 = np.minimum(i0 + 1, src - 1)
    return i0, i1, coord - i0


def _resize_block(rows: np.ndarray, row_base: int, ys: np.ndarray, wy, wx) -> np.ndarray:
    y0, y1, fy = wy
    x0, x1, fx = wx
    fx = fx[None, :, None]
    fy = fy[ys][:, None, None]
    a = rows[y0[ys] - row_base].astype(np.float64)
    b = rows[y1[ys] - row_base].astype(np.float64)
    top = (1.0 - fx) * a[:, x0] + fx * a[:, x1]
    bot = (1.0 - fx) * b[:, x0] + fx * b[:, x1]
    return (1.0 - fy) * top + fy * bot


def iter_resized_rows(img: TiledImage, target_w: int, target_h: int,
                      strip_rows: int) -> Iterator[tuple[int, np.ndarray]]:
    """Yield ``(y0, strip)`` blocks of the bilinearly resized image.

    Only the source rows feeding one output strip are read at a time.
    """
    wy = _axis_weights(img.height, target_h)
    wx = _axis_weights(img.width, target_w)
    for y in range(0, target_h, strip_rows):
        ys = np.arange(y, min(y + strip_rows, target_h))
        lo, hi = int(wy[0][ys].min()), int(wy[1][ys].max())
        rows = img.read_rows(lo, hi + 1)
        yield y, _resize_block(rows, lo, ys, wy, wx)


def resize_array(pixels: np.ndarray, target_w: int, target_h: int) -> np.ndarray:
    """Whole-image bilinear resize; the in-memory counterpart of the streamed path."""
    pixels = np.asarray(pixels)
    if pixels.ndim == 2:
        pixels = pixels[:, :, None]
    h, w = pixels.shape[:2]
    wy, wx = _axis_weights(h, target_h), _axis_weights(w, target_w)
    return _resize_block(pixels, 0, np.arange(target_h), wy, wx)


def resize_bilinear(img: TiledImage, target_w: int, target_h: int, patch_size: int = 32,
                    out_path: str | Path | None = None) -> TiledImage:
    """Bilinear resize streamed strip by strip; output pixels are float64.

    With ``out_path`` the result is written as a float64 LVTI file,
    otherwise it is held in memory.
    """
    if target_w < 1 or target_h < 1 or target_w % patch_size or target_h % patch_size:
        raise ConfigError(f"target {target_w}x{target_h} is not a positive multiple of {patch_size}")
    strip = img.tile_size
    if out_path is None:
        out = np.empty((target_h, target_w, img.channels))
        for y, block in iter_resized_rows(img, target_w, target_h, strip):
            out[y:y + block.shape[0]] = block
        return TiledImage(target_w, target_h, img.channels, img.tile_size, out)
    tiles = create_lvti(out_path, target_w, target_h, img.channels, img.tile_size, np.float64)
    t = img.tile_size
    for y, block in iter_resized_rows(img, target_w, target_h, strip):
        ty = y // t
        for tx in range(tiles.shape[1]):
            part = block[:, tx * t:(tx + 1) * t]
            tiles[ty, tx, :part.shape[0], :part.shape[1]] = part
    tiles.flush()
    del tiles
    return open_image(out_path)


# ---------------------------------------------------------------- patches


def grid_shape(width: int, height: int, patch_size: int) -> tuple[int, int]:
    if width % patch_size or height % patch_size:
        raise ConfigError(f"{width}x{height} is not divisible by patch size {patch_size}")
    return height // patch_size, width // patch_size


def _strip_patches(strip: np.ndarray, patch_size: int) -> np.ndarray:
    """``(P, W, C)`` pixel strip to ``(W / P, P * P * C)`` raw patch rows."""
    p = patch_size
    _, width, c = strip.shape
    return strip.reshape(p, width // p, p, c).transpose(1, 0, 2, 3).reshape(width // p, p * p * c)


def normalise_patches(raw: np.ndarray, channels: int) -> np.ndarray:
    """Raw patch rows (0..255 scale) to normalised 3-channel vectors."""
    x = raw.astype(np.float64) / 255.0
    if channels == 1:
        x = np.repeat(x, 3, axis=1)
    elif channels != 3:
        raise ImageFormatError(f"unsupported channel count {channels}")
    return (x - NORM_MEAN) / NORM_STD


def _normalise_strip(strip: np.ndarray, patch_size: int) -> np.ndarray:
    return normalise_patches(_strip_patches(strip, patch_size), strip.shape[2])


def iter_patch_rows(img: TiledImage, patch_size: int, target: tuple[int, int] | None = None
                    ) -> Iterator[np.ndarray]:
    """One ``(grid_cols, 3 P^2)`` block per row of patches, top to bottom.

    ``target=(width, height)`` resizes on the fly.  Each patch is flattened
    in (row, column, channel) order, scaled to [0, 1] and normalised.
    """
    p = patch_size
    if target is None or target == (img.width, img.height):
        grid_shape(img.width, img.height, p)
        for y in range(0, img.height, p):
            yield _normalise_strip(img.read_rows(y, y + p), p)
        return
    tw, th = target
    grid_shape(tw, th, p)
    for _, strip in iter_resized_rows(img, tw, th, p):
        yield _normalise_strip(strip, p)


def patchify(img: TiledImage, patch_size: int) -> Iterator[np.ndarray]:
    """Patches in row-major scan order, each a flat ``3 P^2`` vector."""
    for block in iter_patch_rows(img, patch_size):
        yield from block


def patchify_array(pixels: np.ndarray, patch_size: int) -> np.ndarray:
    """All patches of an in-memory image at once, ``(N, 3 P^2)``."""
    pixels = np.asarray(pixels)
    if pixels.ndim == 2:
        pixels = pixels[:, :, None]
    h, w, c = pixels.shape
    rows, cols = grid_shape(w, h, patch_size)
    p = patch_size
    x = pixels.astype(np.float64) / 255.0
    if c == 1:
        x = np.repeat(x, 3, axis=2)
    x = (x - NORM_MEAN) / NORM_STD
    return x.reshape(rows, p, cols, p, 3).transpose(0, 2, 1, 3, 4).reshape(rows * cols, p * p * 3)


def embed_patches(patches, weight: Tensor, bias: Tensor) -> Tensor:
    patches = as_tensor(patches)
    if patches.ndim != 2 or patches.shape[1] != weight.shape[0]:
        raise DimensionError(f"patch vectors of length {patches.shape[-1]} do not match "
                             f"embedding input size {weight.shape[0]}")
    return linear(patches, weight, bias)


# ---------------------------------------------------------------- positions


@dataclass
class PosEmbedTable:
    table: Tensor  # (rows0 * cols0, d)
    native_grid: tuple[int, int]

    def __post_init__(self):
        r, c = self.native_grid
        if self.table.shape[0] != r * c:
            raise DimensionError(f"table has {self.table.shape[0]} rows, grid {r}x{c} needs {r * c}")


def _interp_matrix(src: int, dst: int) -> np.ndarray:
    i0, i1, f = _axis_weights(src, dst)
    a = np.zeros((dst, src))
    np.add.at(a, (np.arange(dst), i0), 1.0 - f)
    np.add.at(a, (np.arange(dst), i1), f)
    return a


def interpolate_pos_embed(table: PosEmbedTable, target_grid: tuple[int, int]) -> Tensor:
    """Bilinearly resample the position table to ``target_grid``.

    Returns the table tensor itself when the grid already matches.
    """
    rows, cols = target_grid
    r0, c0 = table.native_grid
    if rows < 1 or cols < 1 or r0 < 1 or c0 < 1:
        raise ConfigError("position grids must be non-empty")
    if (rows, cols) == (r0, c0):
        return table.table
    t = table.table
    d = t.shape[1]
    ar, ac = _interp_matrix(r0, rows), _interp_matrix(c0, cols)
    grid = t.data.reshape(r0, c0, d)
    y = np.einsum("ri,ijd->rjd", ar, grid)
    y = np.einsum("cj,rjd->rcd", ac, y).reshape(rows * cols, d)

    def bw(g):
        g = g.reshape(rows, cols, d)
        g = np.einsum("cj,rcd->rjd", ac, g)
        return (np.einsum("ri,rjd->ijd", ar, g).reshape(r0 * c0, d),)

    return _op(y, (t,), bw)


# ---------------------------------------------------------------- pipeline


@dataclass
class PatchSequence:
    embeddings: Tensor  # (N, d)
    grid_rows: int
    grid_cols: int
    patch_size: int

    def __post_init__(self):
        if self.embeddings.shape[0] != self.grid_rows * self.grid_cols:
            raise DimensionError("embedding count does not match the patch grid")

    @property
    def length(self) -> int:
        return self.grid_rows * self.grid_cols


@dataclass
class PatchEmbedder:
    weight: Tensor  # (3 P^2, d)
    bias: Tensor  # (d,)
    pos: PosEmbedTable
    patch_size: int


@dataclass(frozen=True)
class ImageConfig:
    resolution: int | None = None  # square target side; None keeps the file's size
    patch_size: int = 32
    tile_size: int = 512

    def target_for(self, img: TiledImage) -> tuple[int, int]:
        if self.resolution is None:
            return img.width, img.height
        return self.resolution, self.resolution


def token_grid(path: str | Path, config: ImageConfig) -> tuple[int, int]:
    """Patch grid of an image after resizing, from the header alone."""
    img = open_image(path, config.tile_size)
    w, h = config.target_for(img)
    return grid_shape(w, h, config.patch_size)


def encode_image(path: str | Path, config: ImageConfig, embedder: PatchEmbedder) -> PatchSequence:
    """Resize, patchify, embed and add interpolated positions, one patch row at a time."""
    if embedder.patch_size != config.patch_size:
        raise ConfigError(f"embedder expects patch size {embedder.patch_size}, config has {config.patch_size}")
    img = open_image(path, config.tile_size)
    target = config.target_for(img)
    rows, cols = grid_shape(*target, config.patch_size)
    d = embedder.weight.shape[1]
    emb = np.empty((rows * cols, d))
    for gy, block in enumerate(iter_patch_rows(img, config.patch_size, target)):
        emb[gy * cols:(gy + 1) * cols] = block @ embedder.weight.data
    return _finish(emb, rows, cols, embedder, lambda: patch_matrix(path, config))


def raw_patches(path: str | Path, config: ImageConfig) -> tuple[np.ndarray, int]:
    """Unnormalised patch rows in the source dtype, plus the channel count.

    A uint8 image stays uint8 here, which keeps training caches small.
    """
    img = open_image(path, config.tile_size)
    target = config.target_for(img)
    rows, cols = grid_shape(*target, config.patch_size)
    p = config.patch_size
    if target == (img.width, img.height):
        strips = (img.read_rows(y, y + p) for y in range(0, img.height, p))
    else:
        strips = (s for _, s in iter_resized_rows(img, *target, p))
    return np.concatenate([_strip_patches(s, p) for s in strips], axis=0), img.channels


def patch_matrix(path: str | Path, config: ImageConfig) -> np.ndarray:
    """All normalised patches of an image, ``(N, 3 P^2)``."""
    raw, channels = raw_patches(path, config)
    return normalise_patches(raw, channels)


def embed_sequence(patches: np.ndarray, grid: tuple[int, int], embedder: PatchEmbedder) -> PatchSequence:
    """Differentiable embedding of a precomputed patch matrix."""
    rows, cols = grid
    x = add(embed_patches(patches, embedder.weight, embedder.bias), interpolate_pos_embed(embedder.pos, grid))
    return PatchSequence(x, rows, cols, embedder.patch_size)


def _finish(emb, rows, cols, embedder: PatchEmbedder, patches_fn) -> PatchSequence:
    tracked = embedder.weight.requires_grad or embedder.bias.requires_grad or embedder.pos.table.requires_grad
    if tracked:
        return embed_sequence(patches_fn(), (rows, cols), embedder)
    pos = interpolate_pos_embed(embedder.pos, (rows, cols)).data
    return PatchSequence(Tensor(emb + embedder.bias.data + pos), rows, cols, embedder.patch_size)


def encode_image_in_memory(path: str | Path, config: ImageConfig, embedder: PatchEmbedder) -> PatchSequence:
    """Reference path: load everything, resize whole-image, patchify by reshape."""
    img = open_image(path, config.tile_size)
    pixels = img.to_array()
    tw, th = config.target_for(img)
    if (tw, th) != (img.width, img.height):
        pixels = resize_array(pixels, tw, th)
    rows, cols = grid_shape(tw, th, config.patch_size)
    patches = patchify_array(pixels, config.patch_size)
    d = embedder.weight.shape[1]
    emb = np.empty((rows * cols, d))
    # row-of-patches products keep the BLAS accumulation order of the streamed path
    for gy in range(rows):
        emb[gy * cols:(gy + 1) * cols] = patches[gy * cols:(gy + 1) * cols] @ embedder.weight.data
    pos = interpolate_pos_embed(embedder.pos, (rows, cols)).data
    return PatchSequence(Tensor(emb + embedder.bias.data + pos), rows, cols, embedder.patch_size)
