"""Structure and background-preservation metrics, plus PPM image I/O.

Metrics run in float64 on images with values in [0, 1].
"""
from __future__ import annotations

import math
from pathlib import Path
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

SSIM_WINDOW = 7
K1, K2 = 0.01, 0.03
DATA_RANGE = 1.0
PSNR_SENTINEL = 100.0
REC601 = np.array([0.299, 0.587, 0.114])
CANNY_LOW, CANNY_HIGH = 0.1, 0.3
# gradients are snapped to this grid so rounding noise cannot break NMS ties
GRADIENT_GRID = 1e-9


def _image(x) -> np.ndarray:
    a = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[:, :, 0]
    if a.ndim not in (2, 3) or (a.ndim == 3 and a.shape[2] != 3):
        raise ValueError(f"expected HxW or HxWx{{1,3}} image, got {a.shape}")
    return a


def to_gray(x) -> np.ndarray:
    a = _image(x)
    if a.ndim == 3:
        a = a @ REC601
    return a


def _check_same(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"image dims differ: {a.shape} vs {b.shape}")


def ssim_map(a, b) -> np.ndarray:
    x, y = to_gray(a), to_gray(b)
    _check_same(x, y)
    w = SSIM_WINDOW
    if min(x.shape) < w:
        raise ValueError(f"image {x.shape} smaller than the {w}x{w} window")
    xw = sliding_window_view(x, (w, w))
    yw = sliding_window_view(y, (w, w))
    mx = xw.mean(axis=(-2, -1))
    my = yw.mean(axis=(-2, -1))
    # same expression for variance and covariance keeps ssim(x, x) == 1 exactly
    vx = (xw * xw).mean(axis=(-2, -1)) - mx * mx
    vy = (yw * yw).mean(axis=(-2, -1)) - my * my
    cxy = (xw * yw).mean(axis=(-2, -1)) - mx * my
    c1 = (K1 * DATA_RANGE) ** 2
    c2 = (K2 * DATA_RANGE) ** 2
    num = (2 * (mx * my) + c1) * (2 * cxy + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return num / den


def ssim(a, b) -> float:
    return float(ssim_map(a, b).mean())


def psnr_masked(a, b, mask) -> float:
    x, y = _image(a), _image(b)
    _check_same(x, y)
    m = np.asarray(mask).astype(bool)
    if m.shape != x.shape[:2]:
        raise ValueError(f"mask {m.shape} does not match image {x.shape[:2]}")
    if not m.any():
        raise ValueError("mask selects no pixels")
    diff = (x - y)[m]
    mse = float(np.mean(diff * diff))
    if mse < 1e-12:
        return PSNR_SENTINEL
    return 10.0 * math.log10(DATA_RANGE**2 / mse)


def ssim_masked(a, b, mask) -> float:
    """SSIM with pixels outside ``mask`` zeroed in both images."""
    x, y = _image(a), _image(b)
    _check_same(x, y)
    m = np.asarray(mask).astype(bool)
    if x.ndim == 3:
        m = m[:, :, None]
    return ssim(x * m, y * m)


def gaussian_kernel(size: int = 5, sigma: float = 1.4) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2 * sigma**2))
    return g / g.sum()


_SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
_SOBEL_Y = _SOBEL_X.T

# (row, col) step along each quantised gradient direction
_DIRECTIONS = {0: (0, 1), 45: (1, 1), 90: (1, 0), 135: (1, -1)}


def _shift(a: np.ndarray, dr: int, dc: int) -> np.ndarray:
    """out[r, c] = a[r + dr, c + dc], zero outside."""
    out = np.zeros_like(a)
    h, w = a.shape
    rs = slice(max(0, -dr), min(h, h - dr))
    cs = slice(max(0, -dc), min(w, w - dc))
    rd = slice(max(0, dr), min(h, h + dr))
    cd = slice(max(0, dc), min(w, w + dc))
    out[rs, cs] = a[rd, cd]
    return out


def _snap(g: np.ndarray) -> np.ndarray:
    return np.round(g / GRADIENT_GRID) * GRADIENT_GRID


def gradients(img) -> tuple[np.ndarray, np.ndarray]:
    g = to_gray(img)
    blurred = ndimage.correlate(g, gaussian_kernel(), mode="nearest")
    gx = ndimage.correlate(blurred, _SOBEL_X, mode="nearest")
    gy = ndimage.correlate(blurred, _SOBEL_Y, mode="nearest")
    return _snap(gx), _snap(gy)


def non_max_suppression(mag: np.ndarray, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    angle = np.rad2deg(np.arctan2(gy, gx)) % 180.0
    quant = np.select(
        [(angle < 22.5) | (angle >= 157.5), angle < 67.5, angle < 112.5],
        [0, 45, 90],
        default=135,
    )
    keep = np.zeros(mag.shape, bool)
    for deg, (dr, dc) in _DIRECTIONS.items():
        ahead = _shift(mag, dr, dc)
        behind = _shift(mag, -dr, -dc)
        # strict on one side so a two-pixel plateau yields a single pixel
        keep |= (quant == deg) & (mag > behind) & (mag >= ahead)
    return np.where(keep & (mag > 0), mag, 0.0)


def canny(img, low: float = CANNY_LOW, high: float = CANNY_HIGH) -> np.ndarray:
    """Binary (uint8) edge map; thresholds are fractions of the peak gradient."""
    gx, gy = gradients(img)
    mag = np.hypot(gx, gy)
    peak = mag.max()
    if peak <= 0:
        return np.zeros(mag.shape, np.uint8)
    thin = non_max_suppression(mag, gx, gy)
    strong = thin >= high * peak
    weak = thin >= low * peak
    labels, n = ndimage.label(weak, structure=np.ones((3, 3), bool))
    if n == 0:
        return np.zeros(mag.shape, np.uint8)
    keep = np.zeros(n + 1, bool)
    keep[np.unique(labels[strong])] = True
    keep[0] = False
    return keep[labels].astype(np.uint8)


def canny_ssim(a, b) -> float:
    return ssim(canny(a).astype(np.float64), canny(b).astype(np.float64))


def background_mask(edit_pixel_mask: Optional[np.ndarray], shape: tuple[int, int]) -> np.ndarray:
    """Complement of the edit region; the whole image when that is empty."""
    if edit_pixel_mask is None:
        return np.ones(shape, bool)
    bg = ~np.asarray(edit_pixel_mask).astype(bool)
    return bg if bg.any() else np.ones(shape, bool)


def report(name: str, source, edited, edit_pixel_mask: Optional[np.ndarray] = None) -> dict:
    src, ed = _image(source), _image(edited)
    bg = background_mask(edit_pixel_mask, src.shape[:2])
    return {
        "name": name,
        "canny_ssim": canny_ssim(src, ed),
        "bg_psnr": psnr_masked(src, ed, bg),
        "bg_ssim": ssim_masked(src, ed, bg),
    }


def format_report(r: dict) -> str:
    return f"{r['name']}\t{r['canny_ssim']:.6f}\t{r['bg_psnr']:.4f}\t{r['bg_ssim']:.6f}"


# ---------------------------------------------------------------------------
# PPM (P6, 8-bit)


def write_ppm(path: str | Path, img) -> None:
    a = _image(img)
    if a.ndim == 2:
        a = np.repeat(a[:, :, None], 3, axis=2)
    h, w, _ = a.shape
    data = np.rint(a * 255.0).astype(np.uint8)
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + data.tobytes())


def _ppm_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    tokens: list[bytes] = []
    i = 0
    while len(tokens) < count:
        if i >= len(buf):
            raise ValueError("truncated PPM header")
        c = buf[i : i + 1]
        if c == b"#":
            while i < len(buf) and buf[i : i + 1] not in (b"\n", b"\r"):
                i += 1
        elif c.isspace():
            i += 1
        else:
            j = i
            while j < len(buf) and not buf[j : j + 1].isspace() and buf[j : j + 1] != b"#":
                j += 1
            tokens.append(buf[i:j])
            i = j
    return tokens, i + 1  # exactly one whitespace byte before the raster


def read_ppm(path: str | Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    (magic, w, h, maxval), start = _ppm_tokens(buf, 4)
    if magic != b"P6":
        raise ValueError(f"not a binary PPM (magic {magic!r})")
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise ValueError(f"only 8-bit PPM supported, maxval {maxval}")
    raster = buf[start : start + w * h * 3]
    if len(raster) != w * h * 3:
        raise ValueError("truncated PPM raster")
    return np.frombuffer(raster, np.uint8).reshape(h, w, 3).astype(np.float32) / np.float32(255)
