"""Optical flow: estimation, Middlebury .flo ingestion, flow images.

The built-in estimator is a Horn-Schunck solver: dense flow minimizing
brightness-constancy plus a quadratic smoothness penalty, iterated a
fixed number of Jacobi steps so results are deterministic. Externally
computed fields can be supplied as .flo files instead; both routes feed
the same 3-channel flow-image mapping.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, GeometryError, ShapeError
from .images import bilinear_resize, rgb_to_gray

FLO_MAGIC = np.float32(202021.25)

# weighted 8-neighbor average used by the Horn-Schunck update
_AVG_CORNER = 1.0 / 12.0
_AVG_EDGE = 1.0 / 6.0


@dataclass
class FlowField:
    """Per-pixel (u, v) displacement in pixels, each (H, W)."""

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.u = np.asarray(self.u)
        self.v = np.asarray(self.v)
        if self.u.ndim != 2 or self.u.shape != self.v.shape:
            raise ShapeError(f"u and v must be equal-shape 2-d arrays, got {self.u.shape} vs {self.v.shape}")
        if not (np.all(np.isfinite(self.u)) and np.all(np.isfinite(self.v))):
            raise ShapeError("flow components must be finite")

    @property
    def height(self) -> int:
        return self.u.shape[0]

    @property
    def width(self) -> int:
        return self.u.shape[1]

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.u, self.v)


def _neighbor_average(x):
    xp = np.pad(x, 1, mode="edge")
    return (
        _AVG_EDGE * (xp[:-2, 1:-1] + xp[2:, 1:-1] + xp[1:-1, :-2] + xp[1:-1, 2:])
        + _AVG_CORNER * (xp[:-2, :-2] + xp[:-2, 2:] + xp[2:, :-2] + xp[2:, 2:])
    )


def _warp(img, u, v):
    """Sample img at (x + u, y + v) bilinearly, clamped at the border."""
    h, w = img.shape
    ys = np.clip(np.arange(h)[:, None] + v, 0, h - 1)
    xs = np.clip(np.arange(w)[None, :] + u, 0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy, fx = ys - y0, xs - x0
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def _horn_schunck(a, b, iterations, smoothness, update_norms=None):
    avg = 0.5 * (a + b)
    iy, ix = np.gradient(avg)
    it = b - a
    denom = smoothness**2 + ix * ix + iy * iy
    u = np.zeros_like(a)
    v = np.zeros_like(a)
    for _ in range(iterations):
        u_bar = _neighbor_average(u)
        v_bar = _neighbor_average(v)
        t = (ix * u_bar + iy * v_bar + it) / denom
        u_next = u_bar - ix * t
        v_next = v_bar - iy * t
        if update_norms is not None:
            update_norms.append(float(np.sqrt(((u_next - u) ** 2 + (v_next - v) ** 2).sum())))
        u, v = u_next, v_next
    return u, v


def estimate_flow(
    frame_a,
    frame_b,
    iterations: int = 200,
    smoothness: float = 0.3,
    levels: int = 1,
    update_norms: list | None = None,
) -> FlowField:
    """Dense flow from frame_a to frame_b.

    Frames may be (H, W) grayscale or (3, H, W) RGB; RGB converts with
    ITU-R 601 luma weights. `smoothness` is the regularizer weight: larger
    values give smoother fields. `levels` in 1..3 enables a coarse-to-fine
    pyramid (halved resolution per level, flow upsampled, the next frame
    warped before re-estimating).
    """
    a = rgb_to_gray(frame_a).astype(np.float64)
    b = rgb_to_gray(frame_b).astype(np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"frame sizes differ: {a.shape} vs {b.shape}")
    if iterations < 1:
        raise ValueError(f"iterations must be >= 1, got {iterations}")
    if smoothness <= 0:
        raise ValueError(f"smoothness must be > 0, got {smoothness}")
    if not 1 <= levels <= 3:
        raise ValueError(f"levels must be in 1..3, got {levels}")
    if a.std() == 0.0 or b.std() == 0.0:
        warnings.warn("zero-variance frame; returning zero flow", stacklevel=2)
        return FlowField(np.zeros_like(a), np.zeros_like(a))

    h, w = a.shape
    if levels > 1 and min(h, w) >= 16:
        coarse = estimate_flow(
            bilinear_resize(a, w // 2, h // 2),
            bilinear_resize(b, w // 2, h // 2),
            iterations=iterations,
            smoothness=smoothness,
            levels=levels - 1,
        )
        u0 = bilinear_resize(coarse.u, w, h) * 2.0
        v0 = bilinear_resize(coarse.v, w, h) * 2.0
        b_warped = _warp(b, u0, v0)
        du, dv = _horn_schunck(a, b_warped, iterations, smoothness)
        return FlowField(u0 + du, v0 + dv)

    u, v = _horn_schunck(a, b, iterations, smoothness)
    return FlowField(u, v)


def read_flo(path) -> FlowField:
    """Middlebury .flo: float32 magic 202021.25, int32 W, H, interleaved u,v."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 12:
        raise FormatError(f"{path}: too short for a .flo header ({len(raw)} bytes)")
    magic = np.frombuffer(raw[:4], dtype="<f4")[0]
    if magic != FLO_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {float(FLO_MAGIC)}")
    w, h = struct.unpack("<ii", raw[4:12])
    if w < 1 or h < 1:
        raise FormatError(f"{path}: invalid dimensions {w}x{h}")
    expect = 12 + 8 * w * h
    if len(raw) != expect:
        raise FormatError(f"{path}: expected {expect} bytes for {w}x{h}, found {len(raw)}")
    data = np.frombuffer(raw[12:], dtype="<f4").reshape(h, w, 2)
    return FlowField(data[:, :, 0].copy(), data[:, :, 1].copy())


def write_flo(field: FlowField, path) -> None:
    path = Path(path)
    h, w = field.u.shape
    data = np.empty((h, w, 2), dtype="<f4")
    data[:, :, 0] = field.u
    data[:, :, 1] = field.v
    with open(path, "wb") as fh:
        fh.write(FLO_MAGIC.tobytes())
        fh.write(struct.pack("<ii", w, h))
        fh.write(data.tobytes())


def flow_to_image(field: FlowField, clip_bound: float = 20.0) -> np.ndarray:
    """Map a flow field to a (3, H, W) image in [0, 1].

    Channel 0: u clipped to [-B, B] then affinely mapped to [0, 1].
    Channel 1: v, same mapping.
    Channel 2: magnitude of the unclipped flow, capped at B*sqrt(2) and
    scaled to [0, 1], so it is zero exactly where u = v = 0.
    """
    if clip_bound <= 0:
        raise ValueError(f"clip_bound must be > 0, got {clip_bound}")
    b = float(clip_bound)
    u = np.asarray(field.u, dtype=np.float64)
    v = np.asarray(field.v, dtype=np.float64)
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
        raise ShapeError("flow components must be finite")
    mag_cap = b * np.sqrt(2.0)
    out = np.empty((3,) + u.shape, dtype=np.float64)
    out[0] = (np.clip(u, -b, b) + b) / (2.0 * b)
    out[1] = (np.clip(v, -b, b) + b) / (2.0 * b)
    out[2] = np.minimum(np.hypot(u, v), mag_cap) / mag_cap
    return out


def rescale_flow(field: FlowField, factor: float) -> FlowField:
    """Resample the field spatially by `factor` and scale u, v to match.

    Halving the resolution halves every displacement, keeping the field
    consistent with the downsampled pixel grid.
    """
    if factor <= 0:
        raise GeometryError(f"scale factor must be > 0, got {factor}")
    if factor == 1.0:
        return FlowField(field.u.copy(), field.v.copy())
    h, w = field.u.shape
    out_w = int(round(w * factor))
    out_h = int(round(h * factor))
    if out_w < 1 or out_h < 1:
        raise GeometryError(f"scale factor {factor} collapses {w}x{h} below one pixel")
    u = bilinear_resize(field.u, out_w, out_h) * factor
    v = bilinear_resize(field.v, out_w, out_h) * factor
    return FlowField(u, v)


def resample_flow_to(field: FlowField, out_w: int, out_h: int) -> FlowField:
    """Resample to explicit dims, scaling u by out_w/W and v by out_h/H."""
    h, w = field.u.shape
    u = bilinear_resize(field.u, out_w, out_h) * (out_w / w)
    v = bilinear_resize(field.v, out_w, out_h) * (out_h / h)
    return FlowField(u, v)
