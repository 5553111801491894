"""Synthetic scene generation, image file I/O, tiling and augmentation.

Scenes are procedurally rendered rasters: rectangular "buildings" (some
rotated) over a textured background, with exact ground-truth masks. They
stand in for aerial imagery so the whole pipeline can be exercised and
scored on one CPU. Images travel as binary portable pixmaps (P6) and masks
as portable graymaps (P5), 8-bit, maxval 255.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


class PnmError(ValueError):
    """Malformed or truncated pixmap/graymap file."""


@dataclass
class Scene:
    image: np.ndarray  # (3,H,W) float32 in [0,1]
    mask: np.ndarray  # (1,H,W) float32, strictly 0/1
    seed: int

    @property
    def size(self) -> tuple[int, int]:
        return self.image.shape[1], self.image.shape[2]


def _smooth_texture(rng: np.random.Generator, size: int, cell: int = 8) -> np.ndarray:
    coarse = rng.standard_normal((3, max(size // cell, 1), max(size // cell, 1)))
    rep = int(np.ceil(size / coarse.shape[1]))
    return np.repeat(np.repeat(coarse, rep, axis=1), rep, axis=2)[:, :size, :size]


def _paint_rectangle(rng: np.random.Generator, image: np.ndarray, mask: np.ndarray) -> None:
    size = image.shape[1]
    cy, cx = rng.uniform(0.1, 0.9, size=2) * size
    half_h, half_w = rng.uniform(0.06, 0.18, size=2) * size
    angle = 0.0 if rng.random() < 0.5 else rng.uniform(0.0, np.pi)
    fill = rng.uniform(0.55, 0.95, size=3)

    ys, xs = np.mgrid[0:size, 0:size]
    dy, dx = ys - cy, xs - cx
    cos_a, sin_a = np.cos(angle), np.sin(angle)
    u = cos_a * dx + sin_a * dy
    v = -sin_a * dx + cos_a * dy
    inside = (np.abs(u) <= half_w) & (np.abs(v) <= half_h)
    image[:, inside] = fill[:, None]
    mask[0, inside] = 1.0


def _paint_occluders(rng: np.random.Generator, image: np.ndarray) -> None:
    size = image.shape[1]
    for _ in range(int(rng.integers(1, 4))):
        width = max(1, int(size * rng.uniform(0.02, 0.06)))
        start = int(rng.integers(0, size - width + 1))
        color = rng.uniform(0.05, 0.45, size=3)[:, None, None]
        if rng.random() < 0.5:
            image[:, start : start + width, :] = color
        else:
            image[:, :, start : start + width] = color


def reduce_resolution(image: np.ndarray, factor: int) -> np.ndarray:
    """Box-average down by ``factor`` and repeat back up: a blocky image."""
    if factor <= 1:
        return image
    c, h, w = image.shape
    if h % factor or w % factor:
        raise ValueError(f"resolution factor {factor} must divide the extents {h}x{w}")
    coarse = image.reshape(c, h // factor, factor, w // factor, factor).mean(axis=(2, 4))
    return np.repeat(np.repeat(coarse, factor, axis=1), factor, axis=2)


def add_noise(image: np.ndarray, std: float, rng: np.random.Generator) -> np.ndarray:
    noisy = image + rng.normal(0.0, std, size=image.shape)
    return np.clip(noisy, 0.0, 1.0).astype(np.float32)


def _degradation_factor(difficulty: float) -> int:
    if difficulty > 0.85:
        return 16
    if difficulty > 0.6:
        return 4
    return 1


def generate_synthetic_scene(seed: int, size: int = 64, difficulty: float = 0.0,
                             noise_std: float | None = None,
                             downsample: int | None = None) -> Scene:
    """Render a deterministic scene of 3..20 buildings with its exact mask.

    ``difficulty`` in [0,1] scales background texture and additive Gaussian
    noise (up to 5/255 at 1.0), enables occluding strips, and above 0.6
    degrades the resolution (factor 4, then 16 above 0.85). ``noise_std``
    and ``downsample`` override those two mappings directly. The mask always
    reflects the pre-degradation geometry.
    """
    if size % 32:
        raise ValueError(f"scene size must be divisible by 32, got {size}")
    rng = np.random.default_rng(seed)

    base = rng.uniform(0.05, 0.40, size=3)[:, None, None]
    texture_amp = 0.02 + 0.05 * difficulty
    image = base + texture_amp * _smooth_texture(rng, size)
    mask = np.zeros((1, size, size))

    target_count = int(rng.integers(3, 21))
    placed = 0
    while placed < 60:
        coverage = mask.mean()
        if coverage > 0.45:
            break
        if placed >= target_count and coverage >= 0.02:
            break
        _paint_rectangle(rng, image, mask)
        placed += 1

    if difficulty > 0.0 and rng.random() < min(1.0, 2.0 * difficulty):
        _paint_occluders(rng, image)

    std = noise_std if noise_std is not None else difficulty * (5.0 / 255.0)
    if std > 0.0:
        image = image + rng.normal(0.0, std, size=image.shape)
    image = np.clip(image, 0.0, 1.0)

    factor = downsample if downsample is not None else _degradation_factor(difficulty)
    if factor > 1:
        image = reduce_resolution(image, factor)

    return Scene(image.astype(np.float32), mask.astype(np.float32), seed)


# -- portable pixmap / graymap I/O ------------------------------------------------


def _next_token(data: bytes, pos: int, path) -> tuple[bytes, int]:
    n = len(data)
    while pos < n:
        if data[pos : pos + 1].isspace():
            pos += 1
        elif data[pos : pos + 1] == b"#":
            while pos < n and data[pos : pos + 1] != b"\n":
                pos += 1
        else:
            break
    if pos >= n:
        raise PnmError(f"{path}: header truncated at byte {pos}")
    start = pos
    while pos < n and not data[pos : pos + 1].isspace():
        pos += 1
    return data[start:pos], pos


def _parse_header(data: bytes, path) -> tuple[bytes, int, int, int, int]:
    magic, pos = _next_token(data, 0, path)
    if magic not in (b"P5", b"P6"):
        raise PnmError(f"{path}: unsupported magic {magic!r} at byte 0 (need binary P5 or P6)")
    fields = []
    for _ in range(3):
        token, pos = _next_token(data, pos, path)
        if not token.isdigit():
            raise PnmError(f"{path}: expected integer near byte {pos - len(token)}, got {token!r}")
        fields.append(int(token))
    width, height, maxval = fields
    if width <= 0 or height <= 0:
        raise PnmError(f"{path}: non-positive dimensions {width}x{height}")
    if maxval != 255:
        raise PnmError(f"{path}: only maxval 255 is supported, got {maxval}")
    # exactly one whitespace byte separates the header from the payload
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise PnmError(f"{path}: missing payload separator at byte {pos}")
    return magic, width, height, maxval, pos + 1


def load_image(path) -> np.ndarray:
    """Read a binary P6 pixmap as (3,H,W) or a P5 graymap as (1,H,W) in [0,1]."""
    data = Path(path).read_bytes()
    magic, width, height, _, offset = _parse_header(data, path)
    channels = 3 if magic == b"P6" else 1
    expected = width * height * channels
    payload = data[offset : offset + expected]
    if len(payload) != expected:
        raise PnmError(f"{path}: payload truncated at byte {offset + len(payload)} (expected {expected} bytes)")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    return (pixels.transpose(2, 0, 1).astype(np.float32)) / 255.0


def _write_pnm(path, magic: bytes, planes: np.ndarray) -> None:
    channels, height, width = planes.shape
    header = b"%s\n%d %d\n255\n" % (magic, width, height)
    body = planes.transpose(1, 2, 0).reshape(-1).astype(np.uint8).tobytes()
    Path(path).write_bytes(header + body)


def save_image(path, image: np.ndarray) -> None:
    """Write a (3,H,W) [0,1] image as binary P6."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"save_image expects (3,H,W), got {image.shape}")
    _write_pnm(path, b"P6", np.rint(np.clip(image, 0.0, 1.0) * 255.0))


def save_mask(path, mask: np.ndarray) -> None:
    """Write a binary (1,H,W) mask as P5 with values 0/255."""
    if mask.ndim != 3 or mask.shape[0] != 1:
        raise ValueError(f"save_mask expects (1,H,W), got {mask.shape}")
    if not np.all((mask == 0) | (mask == 1)):
        raise ValueError("save_mask needs a strictly binary mask")
    _write_pnm(path, b"P5", mask * 255.0)


def save_gray(path, values: np.ndarray) -> None:
    """Write a (1,H,W) [0,1] map as P5, value = round(255 * v)."""
    if values.ndim != 3 or values.shape[0] != 1:
        raise ValueError(f"save_gray expects (1,H,W), got {values.shape}")
    _write_pnm(path, b"P5", np.rint(np.clip(values, 0.0, 1.0) * 255.0))


# -- tiling ----------------------------------------------------------------------


@dataclass
class Tile:
    image: np.ndarray
    mask: np.ndarray | None
    y: int
    x: int


@dataclass
class TileSet:
    tiles: list[Tile]
    source_size: tuple[int, int]
    padded_size: tuple[int, int]
    tile: int


def _pad_to_multiple(arr: np.ndarray, tile: int) -> np.ndarray:
    _, h, w = arr.shape
    ph = (tile - h % tile) % tile
    pw = (tile - w % tile) % tile
    if ph == 0 and pw == 0:
        return arr
    out = np.zeros((arr.shape[0], h + ph, w + pw), dtype=arr.dtype)
    out[:, :h, :w] = arr
    return out


def tile_image(scene: Scene, tile: int = 512) -> TileSet:
    """Zero-pad to the next tile multiple and split without overlap."""
    if tile % 32:
        raise ValueError(f"tile size must be divisible by 32, got {tile}")
    h, w = scene.size
    image = _pad_to_multiple(scene.image, tile)
    mask = _pad_to_multiple(scene.mask, tile)
    tiles = []
    for y in range(0, image.shape[1], tile):
        for x in range(0, image.shape[2], tile):
            tiles.append(Tile(image[:, y : y + tile, x : x + tile].copy(),
                              mask[:, y : y + tile, x : x + tile].copy(), y, x))
    return TileSet(tiles, (h, w), (image.shape[1], image.shape[2]), tile)


def reassemble(tileset: TileSet) -> tuple[np.ndarray, np.ndarray]:
    """Invert tile_image exactly, cropping the padding back off."""
    ph, pw = tileset.padded_size
    image = np.zeros((3, ph, pw), dtype=np.float32)
    mask = np.zeros((1, ph, pw), dtype=np.float32)
    t = tileset.tile
    for tile in tileset.tiles:
        image[:, tile.y : tile.y + t, tile.x : tile.x + t] = tile.image
        if tile.mask is not None:
            mask[:, tile.y : tile.y + t, tile.x : tile.x + t] = tile.mask
    h, w = tileset.source_size
    return image[:, :h, :w], mask[:, :h, :w]


def merge_tiles(pieces: list[tuple[int, int, np.ndarray]], padded_size: tuple[int, int],
                source_size: tuple[int, int]) -> np.ndarray:
    """Stitch (y, x, (C,t,t)) pieces back into a cropped full-size array."""
    channels = pieces[0][2].shape[0]
    out = np.zeros((channels, *padded_size), dtype=pieces[0][2].dtype)
    for y, x, piece in pieces:
        out[:, y : y + piece.shape[1], x : x + piece.shape[2]] = piece
    return out[:, : source_size[0], : source_size[1]]


# -- augmentation ----------------------------------------------------------------


def augment(scene: Scene, rng: np.random.Generator, crop_size: int) -> Scene:
    """Random crop then horizontal flip with probability 1/2.

    The identical spatial transform is applied to image and mask. Draw order
    is fixed: row offset, column offset, flip coin.
    """
    h, w = scene.size
    if crop_size > h or crop_size > w:
        raise ValueError(f"crop size {crop_size} exceeds scene size {h}x{w}")
    oy = int(rng.integers(0, h - crop_size + 1))
    ox = int(rng.integers(0, w - crop_size + 1))
    image = scene.image[:, oy : oy + crop_size, ox : ox + crop_size]
    mask = scene.mask[:, oy : oy + crop_size, ox : ox + crop_size]
    if rng.random() < 0.5:
        image = image[:, :, ::-1]
        mask = mask[:, :, ::-1]
    return Scene(np.ascontiguousarray(image), np.ascontiguousarray(mask), scene.seed)
