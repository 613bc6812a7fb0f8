"""Image loading, map persistence and bilinear resampling."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError, ShapeError

# ITU-R 601 luma weights
LUMA = np.array([0.299, 0.587, 0.114])


def load_image(path) -> np.ndarray:
    """Read an image file into a (3, H, W) float64 array in [0, 1]."""
    path = Path(path)
    try:
        with Image.open(path) as img:
            rgb = img.convert("RGB")
            arr = np.asarray(rgb, dtype=np.float64) / 255.0
    except FileNotFoundError:
        raise DataError(f"image file not found: {path}")
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}")
    return arr.transpose(2, 0, 1)


def image_size(path) -> tuple[int, int]:
    """(W, H) without decoding the full image."""
    try:
        with Image.open(path) as img:
            return img.size
    except (FileNotFoundError, OSError) as exc:
        raise DataError(f"cannot read image {path}: {exc}")


def save_image(arr, path) -> None:
    """Write a (3, H, W) or (H, W) array in [0, 1] as an 8-bit image."""
    arr = np.clip(np.asarray(arr), 0.0, 1.0)
    if arr.ndim == 3:
        arr = arr.transpose(1, 2, 0)
    data = (arr * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(data).save(Path(path))


def rgb_to_gray(arr) -> np.ndarray:
    """(3, H, W) -> (H, W) using ITU-R 601 luma weights."""
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 2:
        return arr
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ShapeError(f"expected (3, H, W) or (H, W), got {arr.shape}")
    return np.tensordot(LUMA, arr, axes=1)


def save_pgm(map2d, path) -> None:
    """8-bit binary PGM, min-max normalized; constant maps write all zeros."""
    m = np.asarray(map2d, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"PGM output needs a 2-d map, got shape {m.shape}")
    lo, hi = m.min(), m.max()
    if hi > lo:
        scaled = (m - lo) / (hi - lo) * 255.0
    else:
        scaled = np.zeros_like(m)
    data = (scaled + 0.5).astype(np.uint8)
    h, w = m.shape
    with open(Path(path), "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def save_raw_map(map2d, path) -> None:
    """Row-major little-endian float32, no header."""
    m = np.asarray(map2d)
    if m.ndim != 2:
        raise ShapeError(f"raw map output needs a 2-d map, got shape {m.shape}")
    np.ascontiguousarray(m, dtype="<f4").tofile(Path(path))


def load_raw_map(path, width: int, height: int) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataError(f"raw map file not found: {path}")
    data = np.fromfile(path, dtype="<f4")
    if data.size != width * height:
        raise DataError(
            f"{path}: expected {width * height} float32 values for {width}x{height}, found {data.size}"
        )
    return data.reshape(height, width)


def _axis_coords(n_in: int, n_out: int):
    if n_out == 1:
        pos = np.zeros(1)
    else:
        pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, pos - lo


def bilinear_resize(arr, out_w: int, out_h: int) -> np.ndarray:
    """Aligned-corner bilinear resampling of (H, W) or (C, H, W) arrays.

    Output corner pixels reproduce input corner values exactly. Returns
    float64.
    """
    if out_w < 1 or out_h < 1:
        raise ShapeError(f"target dims must be positive, got {out_w}x{out_h}")
    arr = np.asarray(arr, dtype=np.float64)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[None]
    if arr.ndim != 3:
        raise ShapeError(f"expected (H, W) or (C, H, W), got shape {arr.shape}")
    _, h, w = arr.shape
    ylo, yhi, wy = _axis_coords(h, out_h)
    rows = arr[:, ylo, :] * (1.0 - wy)[None, :, None] + arr[:, yhi, :] * wy[None, :, None]
    xlo, xhi, wx = _axis_coords(w, out_w)
    out = rows[:, :, xlo] * (1.0 - wx)[None, None, :] + rows[:, :, xhi] * wx[None, None, :]
    return out[0] if squeeze else out
