"""Vision-only attention control: hat tokens and the fusion rules.

All fusion rules select whole rows (a vision token either keeps the target
row or takes the source-hat row), so masks are boolean per vision token and
selection is done with ``np.where`` rather than arithmetic blending.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Iterable, Optional

import numpy as np

from . import tensor as tc
from .mmdit import Controller, ForwardContext, QkvTriple, attention


class Mode(str, enum.Enum):
    NONE = "none"
    BASELINE_KV = "kv"
    STRUCTURE = "structure"
    CONSISTEDIT = "consistedit"
    CONSISTEDIT_STAR = "star"

    @classmethod
    def parse(cls, name: "str | Mode") -> "Mode":
        if isinstance(name, Mode):
            return name
        aliases = {
            "baselinekv": cls.BASELINE_KV,
            "baseline_kv": cls.BASELINE_KV,
            "structurefusion": cls.STRUCTURE,
            "structure_fusion": cls.STRUCTURE,
            "consisteditstar": cls.CONSISTEDIT_STAR,
            "consistedit_star": cls.CONSISTEDIT_STAR,
        }
        key = name.strip().lower()
        if key in aliases:
            return aliases[key]
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown mode {name!r}; expected one of {[m.value for m in cls]}") from None


FUSION_MODES = (Mode.STRUCTURE, Mode.CONSISTEDIT, Mode.CONSISTEDIT_STAR)


@dataclass(frozen=True)
class ControlMode:
    mode: Mode = Mode.CONSISTEDIT
    blocks: Optional[frozenset[int]] = None  # None = every layer

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode.parse(self.mode))
        if self.blocks is not None:
            object.__setattr__(self, "blocks", frozenset(int(b) for b in self.blocks))

    def layers(self, n_layers: int) -> frozenset[int]:
        if self.blocks is None:
            return frozenset(range(n_layers))
        bad = [b for b in self.blocks if not 0 <= b < n_layers]
        if bad:
            raise ValueError(f"block subset {sorted(bad)} outside [0, {n_layers})")
        return self.blocks


def last_half(n_layers: int) -> frozenset[int]:
    return frozenset(range(n_layers // 2, n_layers))


def as_row_mask(mask, n_vis: Optional[int] = None) -> np.ndarray:
    """Boolean per-vision-token selector from an EditMask, bool or 0/1 array."""
    m = getattr(mask, "binary", mask)
    m = np.asarray(m)
    if m.dtype != bool:
        if not np.isin(m, (0, 1)).all():
            raise ValueError("mask must be binary")
        m = m.astype(bool)
    m = m.reshape(-1)
    if n_vis is not None and m.shape[0] != n_vis:
        raise tc.ShapeError(f"mask length {m.shape[0]} != n_vis {n_vis}")
    return m


@dataclass(frozen=True)
class FusionContext:
    step: int
    total_steps: int
    alpha: float
    mask: np.ndarray
    source: QkvTriple

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha {self.alpha} outside [0, 1]")
        if not 1 <= self.step <= self.total_steps:
            raise ValueError(f"step {self.step} outside [1, {self.total_steps}]")
        n_vis = self.source.shape[0] - self.source.split
        object.__setattr__(self, "mask", as_row_mask(self.mask, n_vis))

    @property
    def active(self) -> bool:
        return schedule_active(self.step, self.total_steps, self.alpha)


def schedule_active(t: int, T: int, alpha: float) -> bool:
    """Structure injection gate: strictly ``t > (1 - alpha) * T``."""
    if not 1 <= t <= T:
        raise ValueError(f"step {t} outside [1, {T}]")
    return t > (1.0 - alpha) * T


def _check_pair(source: QkvTriple, target: QkvTriple) -> None:
    if source.shape != target.shape or source.split != target.split:
        raise tc.ShapeError(
            f"source {source.shape}/split {source.split} vs target {target.shape}/split {target.split}"
        )


def make_hat(source: QkvTriple, target: QkvTriple) -> QkvTriple:
    """Vision rows from ``source``, text rows from ``target``."""
    _check_pair(source, target)
    s = target.split

    def hat(src, tgt):
        return np.concatenate([tgt[:s], src[s:]], axis=0)

    return QkvTriple(hat(source.q, target.q), hat(source.k, target.k), hat(source.v, target.v), s)


def _pick(rows: np.ndarray, a: np.ndarray, b: np.ndarray, split: int) -> np.ndarray:
    """Text rows from ``b``; vision row j from ``a`` where rows[j] else ``b``."""
    vis = np.where(rows[:, None], a[split:], b[split:])
    return np.concatenate([b[:split], vis], axis=0)


def fuse_structure(ctx: FusionContext, target: QkvTriple) -> QkvTriple:
    if not ctx.active:
        return target
    h = make_hat(ctx.source, target)
    s, m = target.split, ctx.mask
    return QkvTriple(_pick(m, h.q, target.q, s), _pick(m, h.k, target.k, s), target.v, s)


def fuse_consistedit(ctx: FusionContext, target: QkvTriple) -> QkvTriple:
    h = make_hat(ctx.source, target)
    s, m = target.split, ctx.mask
    v = _pick(m, target.v, h.v, s)
    if ctx.active:
        return QkvTriple(h.q, h.k, v, s)
    return QkvTriple(_pick(m, target.q, h.q, s), _pick(m, target.k, h.k, s), v, s)


def fuse_consistedit_star(ctx: FusionContext, target: QkvTriple) -> QkvTriple:
    if not ctx.active:
        return fuse_consistedit(ctx, target)
    return make_hat(ctx.source, target)


class AttentionMaskError(ValueError):
    pass


def _masked_attention(q, k, v, heads, key_mask):
    if not key_mask.any():
        raise AttentionMaskError("every key row is masked and no text keys remain")
    return attention(q, k, v, heads, key_mask=key_mask)


def baseline_kv(
    ctx: FusionContext,
    target: QkvTriple,
    cond_mask=None,
    attn_mask=None,
    heads: int = 1,
) -> tuple[np.ndarray, np.ndarray]:
    """K/V-swap control: target queries attend to the full source K and V.

    ``cond_mask`` limits which vision keys are visible (text keys always are):
    the foreground pass sees keys in the mask, the background pass the rest.
    Vision output rows inside ``attn_mask`` take the foreground result.
    Both masks default to all-ones. Returns ``(output, foreground probs)``.
    """
    _check_pair(ctx.source, target)
    s = target.split
    n_vis = target.shape[0] - s
    m_c = np.ones(n_vis, bool) if cond_mask is None else as_row_mask(cond_mask, n_vis)
    m_a = np.ones(n_vis, bool) if attn_mask is None else as_row_mask(attn_mask, n_vis)
    text_keys = np.ones(s, bool)
    src = ctx.source
    f_o, probs = _masked_attention(target.q, src.k, src.v, heads, np.concatenate([text_keys, m_c]))
    if m_a.all():
        return f_o, probs
    f_b, _ = _masked_attention(target.q, src.k, src.v, heads, np.concatenate([text_keys, ~m_c]))
    # text rows keep the foreground result; M_attn only selects among vision rows
    vis = np.where(m_a[:, None], f_o[s:], f_b[s:])
    return np.concatenate([f_o[:s], vis], axis=0), probs


def hard_blend(source_img: np.ndarray, edited_img: np.ndarray, pixel_mask: np.ndarray) -> np.ndarray:
    """Paste the edited image into the source where the pixel mask is set."""
    if source_img.shape != edited_img.shape:
        raise tc.ShapeError(f"image shapes differ: {source_img.shape} vs {edited_img.shape}")
    m = np.asarray(pixel_mask)
    if not np.isin(m, (0, 1)).all():
        raise ValueError("pixel mask must be binary")
    m = m.astype(bool)
    if m.shape != source_img.shape[: m.ndim]:
        raise tc.ShapeError(f"mask {m.shape} does not match image {source_img.shape}")
    while m.ndim < source_img.ndim:
        m = m[..., None]
    return np.where(m, edited_img, source_img)


_FUSERS = {
    Mode.STRUCTURE: fuse_structure,
    Mode.CONSISTEDIT: fuse_consistedit,
    Mode.CONSISTEDIT_STAR: fuse_consistedit_star,
}


def fuse(mode: Mode, ctx: FusionContext, target: QkvTriple) -> QkvTriple:
    if mode is Mode.NONE or mode is Mode.BASELINE_KV:
        return target
    return _FUSERS[mode](ctx, target)


SourceLookup = Callable[[int, int, str], QkvTriple]


class FusionController(Controller):
    """Applies one control mode at every (step, layer) of a target rollout.

    ``source`` maps (step, layer, branch) to the cached source triple.
    ``text_from_source`` is a diagnostic: hats then also take source text rows.
    ``on_fuse(layer, ctx, target, fused)`` sees every fused triple.
    """

    def __init__(
        self,
        source: SourceLookup,
        mode: Mode,
        alpha: float,
        total_steps: int,
        mask,
        layers: Iterable[int],
        cond_mask=None,
        attn_mask=None,
        text_from_source: bool = False,
        on_fuse: Optional[Callable] = None,
    ):
        self.source = source
        self.mode = Mode.parse(mode)
        self.alpha = float(alpha)
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha {alpha} outside [0, 1]")
        self.total_steps = total_steps
        self.mask = as_row_mask(mask)
        self.layers = frozenset(layers)
        self.cond_mask = cond_mask
        self.attn_mask = attn_mask
        self.text_from_source = text_from_source
        self.on_fuse = on_fuse

    def _context(self, layer: int, ctx: ForwardContext) -> FusionContext:
        src = self.source(ctx.step, layer, ctx.branch)
        return FusionContext(ctx.step, self.total_steps, self.alpha, self.mask, src)

    def control(self, qkv: QkvTriple, layer: int, ctx: ForwardContext) -> QkvTriple:
        if layer not in self.layers or self.mode in (Mode.NONE, Mode.BASELINE_KV):
            return qkv
        fctx = self._context(layer, ctx)
        target = qkv
        if self.text_from_source:
            s = qkv.split
            src = fctx.source
            target = QkvTriple(
                *(np.concatenate([a[:s], b[s:]]) for a, b in ((src.q, qkv.q), (src.k, qkv.k), (src.v, qkv.v))),
                split=s,
            )
        fused = fuse(self.mode, fctx, target)
        if self.on_fuse is not None:
            self.on_fuse(layer, ctx, qkv, fused)
        return fused

    def attend(self, qkv: QkvTriple, layer: int, ctx: ForwardContext, heads: int):
        if self.mode is not Mode.BASELINE_KV or layer not in self.layers:
            return None
        fctx = self._context(layer, ctx)
        if not fctx.active:
            return None
        return baseline_kv(fctx, qkv, self.cond_mask, self.attn_mask, heads)
