"""YUV 4:2:0 frame handling: planar I/O, packing, color conversion, metrics.

Frames are 8-bit planar I420 (full luma plane, then half-resolution U and V).
RGB conversion uses full-range BT.601.  All rounding of float samples to
bytes is round-half-up followed by a clamp to [0, 255].
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ShapeError


def _round_u8(a: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(a + 0.5), 0, 255).astype(np.uint8)


@dataclass
class Yuv420Frame:
    """One I420 frame: uint8 planes y (H,W), u and v (H/2,W/2)."""

    y: np.ndarray
    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        for name, p in (("y", self.y), ("u", self.u), ("v", self.v)):
            if not isinstance(p, np.ndarray) or p.ndim != 2 or p.dtype != np.uint8:
                raise ShapeError(f"plane {name} must be a 2-D uint8 array")
        h, w = self.y.shape
        if h % 2 or w % 2:
            raise ShapeError(f"luma dims must be even, got {h}x{w}")
        if self.u.shape != (h // 2, w // 2) or self.v.shape != (h // 2, w // 2):
            raise ShapeError(
                f"chroma must be {h // 2}x{w // 2} for luma {h}x{w}, "
                f"got u={self.u.shape} v={self.v.shape}")

    @property
    def width(self) -> int:
        return self.y.shape[1]

    @property
    def height(self) -> int:
        return self.y.shape[0]

    def frame_bytes(self) -> int:
        return self.y.size + self.u.size + self.v.size


def read_yuv(path, width: int, height: int, start: int = 0, count=None,
             step: int = 1) -> list[Yuv420Frame]:
    """Read planar I420 frames; ``step`` subsamples (e.g. 8 -> every eighth)."""
    if width <= 0 or height <= 0 or width % 2 or height % 2:
        raise ShapeError(f"frame dims must be positive and even, got {width}x{height}")
    fsize = width * height * 3 // 2
    total = os.path.getsize(path)
    if total % fsize:
        raise FormatError(
            f"{path}: size {total} is not a multiple of the {width}x{height} "
            f"frame size {fsize}")
    nframes = total // fsize
    if start >= nframes and nframes > 0:
        raise FormatError(f"{path}: start frame {start} beyond {nframes} frames")
    frames = []
    csize = (width // 2) * (height // 2)
    with open(path, "rb") as f:
        f.seek(start * fsize)
        idx = start
        while idx < nframes:
            raw = f.read(fsize)
            if len(raw) < fsize:
                break
            buf = np.frombuffer(raw, dtype=np.uint8)
            frames.append(Yuv420Frame(
                y=buf[:width * height].reshape(height, width).copy(),
                u=buf[width * height:width * height + csize]
                .reshape(height // 2, width // 2).copy(),
                v=buf[width * height + csize:].reshape(height // 2, width // 2).copy()))
            if count is not None and len(frames) >= count:
                break
            f.seek((step - 1) * fsize, os.SEEK_CUR)
            idx += step
    return frames


def write_yuv(path, frames) -> None:
    with open(path, "wb") as f:
        for fr in frames:
            f.write(fr.y.tobytes())
            f.write(fr.u.tobytes())
            f.write(fr.v.tobytes())


# ---------------------------------------------------------------------------
# Packing between planes and network input layouts (float in [0,1]).

def luma_split4(y: np.ndarray) -> np.ndarray:
    """(H,W) -> (4,H/2,W/2): phases (even,even),(even,odd),(odd,even),(odd,odd)."""
    if y.ndim != 2 or y.shape[0] % 2 or y.shape[1] % 2:
        raise ShapeError(f"luma_split4 needs even 2-D dims, got {y.shape}")
    return np.stack([y[0::2, 0::2], y[0::2, 1::2], y[1::2, 0::2], y[1::2, 1::2]])


def luma_merge4(phases: np.ndarray) -> np.ndarray:
    """Inverse of :func:`luma_split4`."""
    if phases.ndim != 3 or phases.shape[0] != 4:
        raise ShapeError(f"luma_merge4 needs (4,h,w), got {phases.shape}")
    h, w = phases.shape[1] * 2, phases.shape[2] * 2
    y = np.empty((h, w), dtype=phases.dtype)
    y[0::2, 0::2] = phases[0]
    y[0::2, 1::2] = phases[1]
    y[1::2, 0::2] = phases[2]
    y[1::2, 1::2] = phases[3]
    return y


def frame_to_float(frame: Yuv420Frame):
    """Planes as float32 in [0,1]: y (H,W), u and v (H/2,W/2)."""
    s = np.float32(1.0 / 255.0)
    return frame.y * s, frame.u * s, frame.v * s


def pack_six(frame: Yuv420Frame) -> np.ndarray:
    """(6,H/2,W/2) float32: four luma phases then U then V."""
    yf, uf, vf = frame_to_float(frame)
    return np.concatenate([luma_split4(yf), uf[None], vf[None]]).astype(np.float32)


def unpack_six(arr: np.ndarray):
    """Inverse of :func:`pack_six`; returns float planes (y, u, v)."""
    if arr.ndim != 3 or arr.shape[0] != 6:
        raise ShapeError(f"unpack_six needs (6,h,w), got {arr.shape}")
    return luma_merge4(arr[:4]), arr[4], arr[5]


def floats_to_frame(yf: np.ndarray, uf: np.ndarray, vf: np.ndarray) -> Yuv420Frame:
    """Quantize [0,1] float planes back to a byte frame."""
    return Yuv420Frame(_round_u8(yf * 255.0), _round_u8(uf * 255.0),
                       _round_u8(vf * 255.0))


# ---------------------------------------------------------------------------
# PPM (binary P6) and full-range BT.601 conversion.

def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(b"P6"):
        raise FormatError(f"{path}: not a binary PPM (P6) file")
    # header = magic, width, height, maxval as whitespace-separated tokens,
    # with '#' comment lines allowed
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        tok = bytearray()
        while pos < len(data) and not data[pos:pos + 1].isspace():
            tok += data[pos:pos + 1]
            pos += 1
        if not tok:
            raise FormatError(f"{path}: truncated PPM header")
        tokens.append(bytes(tok))
    pos += 1  # single whitespace after maxval
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError:
        raise FormatError(f"{path}: non-numeric PPM header fields {tokens}") from None
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 supported, got {maxval}")
    need = w * h * 3
    raw = data[pos:pos + need]
    if len(raw) < need:
        raise FormatError(f"{path}: PPM pixel data truncated "
                          f"({len(raw)} of {need} bytes)")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3).copy()


def write_ppm(path, rgb: np.ndarray) -> None:
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ShapeError(f"write_ppm needs (H,W,3) uint8, got {rgb.shape} {rgb.dtype}")
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (rgb.shape[1], rgb.shape[0]))
        f.write(rgb.tobytes())


def rgb_to_yuv420(rgb: np.ndarray) -> Yuv420Frame:
    """Full-range BT.601; chroma from a 2x2 box average of the full-res planes."""
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ShapeError(f"rgb_to_yuv420 needs (H,W,3), got {rgb.shape}")
    if rgb.shape[0] % 2 or rgb.shape[1] % 2:
        raise ShapeError(f"image dims must be even for 4:2:0, got {rgb.shape[:2]}")
    r = rgb[:, :, 0].astype(np.float64)
    g = rgb[:, :, 1].astype(np.float64)
    b = rgb[:, :, 2].astype(np.float64)
    y = 0.299 * r + 0.587 * g + 0.114 * b
    u = 128.0 - 0.168736 * r - 0.331264 * g + 0.5 * b
    v = 128.0 + 0.5 * r - 0.418688 * g - 0.081312 * b
    u_sub = (u[0::2, 0::2] + u[0::2, 1::2] + u[1::2, 0::2] + u[1::2, 1::2]) / 4.0
    v_sub = (v[0::2, 0::2] + v[0::2, 1::2] + v[1::2, 0::2] + v[1::2, 1::2]) / 4.0
    return Yuv420Frame(_round_u8(y), _round_u8(u_sub), _round_u8(v_sub))


def yuv420_to_rgb(frame: Yuv420Frame) -> np.ndarray:
    """Nearest-neighbor chroma upsample, then the BT.601 inverse."""
    y = frame.y.astype(np.float64)
    u = np.repeat(np.repeat(frame.u, 2, 0), 2, 1).astype(np.float64) - 128.0
    v = np.repeat(np.repeat(frame.v, 2, 0), 2, 1).astype(np.float64) - 128.0
    r = y + 1.402 * v
    g = y - 0.344136 * u - 0.714136 * v
    b = y + 1.772 * u
    return np.stack([_round_u8(r), _round_u8(g), _round_u8(b)], axis=2)


# ---------------------------------------------------------------------------
# Metrics and geometry.

PSNR_CAP_DB = 100.0


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 255.0) -> float:
    """PSNR in dB between same-shape planes; identical planes report the cap."""
    if a.shape != b.shape:
        raise ShapeError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = np.mean(np.square(a.astype(np.float64) - b.astype(np.float64)))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(peak * peak / mse))


def pad_frame(frame: Yuv420Frame, multiple: int) -> Yuv420Frame:
    """Edge-replicate so luma dims become multiples of ``multiple``."""
    if multiple <= 0 or multiple % 2:
        raise ShapeError(f"pad multiple must be positive and even, got {multiple}")
    h, w = frame.y.shape
    ph = (multiple - h % multiple) % multiple
    pw = (multiple - w % multiple) % multiple
    if ph == 0 and pw == 0:
        return frame
    return Yuv420Frame(
        np.pad(frame.y, ((0, ph), (0, pw)), mode="edge"),
        np.pad(frame.u, ((0, ph // 2), (0, pw // 2)), mode="edge"),
        np.pad(frame.v, ((0, ph // 2), (0, pw // 2)), mode="edge"))


def crop_frame(frame: Yuv420Frame, width: int, height: int) -> Yuv420Frame:
    """Top-left crop back to the pre-padding dims."""
    if width > frame.width or height > frame.height or width % 2 or height % 2:
        raise ShapeError(f"cannot crop {frame.width}x{frame.height} to {width}x{height}")
    return Yuv420Frame(frame.y[:height, :width].copy(),
                       frame.u[:height // 2, :width // 2].copy(),
                       frame.v[:height // 2, :width // 2].copy())
