"""Independent reference implementations used by the tests.

Scalar loops on Python / numpy scalars, written from the definitions and
sharing no code with the package.
"""
from __future__ import annotations

import math

import mpmath
import numpy as np

F32 = np.float32
MASK64 = (1 << 64) - 1


# -- tensor kernels ---------------------------------------------------------


def matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), F32)
    for i in range(m):
        for j in range(n):
            acc = F32(0)
            for p in range(k):
                acc = F32(acc + F32(a[i, p] * b[p, j]))
            out[i, j] = acc
    return out


def softmax_hp(row, dps: int = 40):
    with mpmath.workdps(dps):
        xs = [mpmath.mpf(float(x)) for x in row]
        m = max(xs)
        es = [mpmath.exp(x - m) for x in xs]
        s = mpmath.fsum(es)
        return [float(e / s) for e in es]


def layer_norm_row(row, gain, bias, eps=1e-5):
    xs = [float(x) for x in row]
    n = len(xs)
    mean = sum(xs) / n
    var = sum((x - mean) ** 2 for x in xs) / n
    return [(x - mean) / math.sqrt(var + eps) * float(g) + float(b) for x, g, b in zip(xs, gain, bias)]


def splitmix64(seed: int, n: int) -> list[int]:
    x = seed & MASK64
    out = []
    for _ in range(n):
        x = (x + 0x9E3779B97F4A7C15) & MASK64
        z = x
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        out.append(z ^ (z >> 31))
    return out


def box_muller(u1: float, u2: float) -> tuple[float, float]:
    r = math.sqrt(-2.0 * math.log(u1))
    return r * math.cos(2 * math.pi * u2), r * math.sin(2 * math.pi * u2)


def unit(x: int) -> float:
    return ((x >> 11) + 0.5) * 2.0**-53


# -- attention -----------------------------------------------------------------


def attention(q, k, v, heads=1, key_mask=None):
    """Multi-head attention in float64 loops; returns the merged output."""
    n, d = q.shape
    dh = d // heads
    out = np.zeros((n, d))
    for h in range(heads):
        cols = range(h * dh, (h + 1) * dh)
        for i in range(n):
            logits = []
            for j in range(k.shape[0]):
                if key_mask is not None and not key_mask[j]:
                    logits.append(None)
                    continue
                s = sum(float(q[i, c]) * float(k[j, c]) for c in cols)
                logits.append(s / math.sqrt(dh))
            m = max(x for x in logits if x is not None)
            w = [0.0 if x is None else math.exp(x - m) for x in logits]
            z = sum(w)
            for c in cols:
                out[i, c] = sum(w[j] / z * float(v[j, c]) for j in range(len(w)))
    return out


# -- fusion rules, element by element ------------------------------------------


def hat(src, tgt, split):
    n, d = tgt.shape
    out = np.empty_like(tgt)
    for i in range(n):
        for j in range(d):
            out[i, j] = tgt[i, j] if i < split else src[i, j]
    return out


def _active(t, T, alpha):
    return t > (1.0 - alpha) * T


def fuse_structure(t, T, alpha, mask, src, tgt, split):
    """src/tgt: dicts q, k, v -> array. Returns dict."""
    on = _active(t, T, alpha)
    out = {}
    for name in "qkv":
        a, b = src[name], tgt[name]
        o = np.empty_like(b)
        for i in range(b.shape[0]):
            for j in range(b.shape[1]):
                from_src = name != "v" and i >= split and on and mask[i - split]
                o[i, j] = a[i, j] if from_src else b[i, j]
        out[name] = o
    return out


def fuse_consistedit(t, T, alpha, mask, src, tgt, split, star=False):
    on = _active(t, T, alpha)
    out = {}
    for name in "qkv":
        a, b = src[name], tgt[name]
        o = np.empty_like(b)
        for i in range(b.shape[0]):
            for j in range(b.shape[1]):
                if i < split:
                    o[i, j] = b[i, j]
                    continue
                edit = bool(mask[i - split])
                if name == "v":
                    use_src = (not edit) or (star and on)
                else:
                    use_src = (not edit) or on
                o[i, j] = a[i, j] if use_src else b[i, j]
        out[name] = o
    return out


def baseline_kv(q_tg, k_s, v_s, split, cond_mask, attn_mask, heads=1):
    n_vis = q_tg.shape[0] - split
    fg_keys = [True] * split + [bool(m) for m in cond_mask]
    bg_keys = [True] * split + [not m for m in cond_mask]
    f_o = attention(q_tg, k_s, v_s, heads, fg_keys)
    f_b = attention(q_tg, k_s, v_s, heads, bg_keys) if not all(attn_mask) else f_o
    out = f_o.copy()
    for j in range(n_vis):
        if not attn_mask[j]:
            out[split + j] = f_b[split + j]
    return out


# -- metrics ----------------------------------------------------------------------


def gray(img):
    img = np.clip(np.asarray(img, dtype=np.float64), 0, 1)
    if img.ndim == 2:
        return img
    h, w, _ = img.shape
    g = np.empty((h, w))
    for r in range(h):
        for c in range(w):
            g[r, c] = 0.299 * img[r, c, 0] + 0.587 * img[r, c, 1] + 0.114 * img[r, c, 2]
    return g


def ssim(a, b, win=7, k1=0.01, k2=0.03):
    x, y = gray(a), gray(b)
    h, w = x.shape
    c1, c2 = k1**2, k2**2
    vals = []
    n = win * win
    for r in range(h - win + 1):
        for c in range(w - win + 1):
            xs = [x[r + i, c + j] for i in range(win) for j in range(win)]
            ys = [y[r + i, c + j] for i in range(win) for j in range(win)]
            mx, my = sum(xs) / n, sum(ys) / n
            vx = sum((p - mx) ** 2 for p in xs) / n
            vy = sum((p - my) ** 2 for p in ys) / n
            cxy = sum((p - mx) * (q - my) for p, q in zip(xs, ys)) / n
            vals.append(((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return sum(vals) / len(vals)


def psnr(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    mse = sum((p - q) ** 2 for p, q in zip(a, b)) / len(a)
    return 100.0 if mse < 1e-12 else 10 * math.log10(1.0 / mse)
