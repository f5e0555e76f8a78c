"""Dual-branch editing: cached source pass, controlled edit pass, multi-round
chaining and real-image editing through inversion."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as tc
from .control import ControlMode, FusionController, Mode
from .masks import DEFAULT_THRESHOLD, AttentionAccumulator, EditMask, MaskError, word_indices
from .mmdit import Controller, ForwardContext, QkvTriple, ToyMMDiT
from .sampler import EulerInversion, GuidanceConfig, Inverter, Schedule, Trace, sample

CacheKey = tuple[int, int, str]


class IncompleteCacheError(KeyError):
    pass


@dataclass
class SourceCache:
    prompt: str
    prompt_emb: np.ndarray
    z_T: np.ndarray
    schedule: Schedule
    guidance: GuidanceConfig
    layers: frozenset[int]
    entries: dict[CacheKey, QkvTriple] = field(default_factory=dict)
    accumulator: Optional[AttentionAccumulator] = None
    mask: Optional[EditMask] = None
    trace: Optional[Trace] = None

    @property
    def nfe(self) -> int:
        return self.trace.nfe if self.trace is not None else 0

    @property
    def z_0(self) -> np.ndarray:
        return self.trace.latents[0]

    def expected_keys(self) -> list[CacheKey]:
        return [
            (t, l, b)
            for t in range(self.schedule.steps, 0, -1)
            for l in sorted(self.layers)
            for b in self.guidance.branches
        ]

    def missing(self) -> list[CacheKey]:
        return [k for k in self.expected_keys() if k not in self.entries]

    def is_complete(self) -> bool:
        return not self.missing()

    def lookup(self, t: int, layer: int, branch: str) -> QkvTriple:
        try:
            return self.entries[(t, layer, branch)]
        except KeyError:
            raise IncompleteCacheError(f"no cached triple for step {t}, layer {layer}, branch {branch}") from None

    def digest(self) -> str:
        h = hashlib.sha256()
        for key in sorted(self.entries):
            e = self.entries[key]
            h.update(repr(key).encode())
            for a in (e.q, e.k, e.v):
                h.update(a.tobytes())
        if self.accumulator is not None:
            h.update(self.accumulator.query_side.tobytes())
            h.update(self.accumulator.key_side.tobytes())
        return h.hexdigest()

    def word_mask(self, words: Sequence[str], threshold: float = DEFAULT_THRESHOLD, direction: str = "query") -> EditMask:
        if self.accumulator is None:
            raise MaskError("cache holds no attention statistics")
        return self.accumulator.finalize(word_indices(self.prompt, words), threshold, direction)

    # -- persistence -------------------------------------------------------

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        (directory / "qkv").mkdir(parents=True, exist_ok=True)
        files = []
        for (t, l, b) in sorted(self.entries, key=lambda k: (-k[0], k[1], k[2])):
            e = self.entries[(t, l, b)]
            name = f"qkv/t{t:04d}_l{l:02d}_{b}.cted"
            tc.save_tensor(directory / name, np.stack([e.q, e.k, e.v]))
            files.append({"step": t, "layer": l, "branch": b, "file": name, "split": e.split})
        tc.save_tensor(directory / "prompt_emb.cted", self.prompt_emb)
        tc.save_tensor(directory / "z_T.cted", self.z_T)
        manifest = {
            "prompt": self.prompt,
            "steps": self.schedule.steps,
            "sigmas": list(self.schedule.sigmas),
            "guidance": {"enabled": self.guidance.enabled, "scale": self.guidance.scale},
            "layers": sorted(self.layers),
            "entries": files,
        }
        if self.accumulator is not None:
            tc.save_tensor(directory / "attn_query.cted", self.accumulator.query_side)
            tc.save_tensor(directory / "attn_key.cted", self.accumulator.key_side)
            manifest["attention_count"] = self.accumulator.count
        if self.mask is not None:
            tc.save_tensor(directory / "mask.cted", self.mask.binary.astype(tc.F32))
            tc.save_tensor(directory / "mask_scores.cted", self.mask.scores)
            manifest["mask"] = {"threshold": self.mask.threshold, "words": list(self.mask.words)}
        if self.trace is not None:
            self.trace.dump(directory / "trace")
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory: str | Path) -> "SourceCache":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        entries = {}
        for e in manifest["entries"]:
            q, k, v = tc.load_tensor(directory / e["file"])
            entries[(e["step"], e["layer"], e["branch"])] = QkvTriple(q, k, v, e["split"]).frozen()
        emb = tc.load_tensor(directory / "prompt_emb.cted")
        acc = None
        if "attention_count" in manifest:
            acc = AttentionAccumulator(emb.shape[0], tc.load_tensor(directory / "z_T.cted").shape[0])
            acc.query_side = tc.load_tensor(directory / "attn_query.cted")
            acc.key_side = tc.load_tensor(directory / "attn_key.cted")
            acc.count = manifest["attention_count"]
        mask = None
        if "mask" in manifest:
            mask = EditMask(
                tc.load_tensor(directory / "mask_scores.cted"),
                tc.load_tensor(directory / "mask.cted").astype(bool),
                manifest["mask"]["threshold"],
                tuple(manifest["mask"]["words"]),
            )
        trace = Trace.load(directory / "trace") if (directory / "trace").exists() else None
        g = manifest["guidance"]
        return cls(
            prompt=manifest["prompt"],
            prompt_emb=emb,
            z_T=tc.load_tensor(directory / "z_T.cted"),
            schedule=Schedule(manifest["steps"], tuple(manifest["sigmas"])),
            guidance=GuidanceConfig(g["enabled"], g["scale"]),
            layers=frozenset(manifest["layers"]),
            entries=entries,
            accumulator=acc,
            mask=mask,
            trace=trace,
        )


class _Recorder(Controller):
    """Wraps another controller and records what reaches attention."""

    def __init__(self, inner: Optional[Controller], layers: frozenset[int], n_txt: int, n_vis: int):
        self.inner = inner
        self.layers = layers
        self.entries: dict[CacheKey, QkvTriple] = {}
        self.accumulator = AttentionAccumulator(n_txt, n_vis)

    def control(self, qkv: QkvTriple, layer: int, ctx: ForwardContext) -> QkvTriple:
        out = self.inner.control(qkv, layer, ctx) if self.inner is not None else qkv
        if layer in self.layers:
            self.entries[(ctx.step, layer, ctx.branch)] = QkvTriple(
                out.q.copy(), out.k.copy(), out.v.copy(), out.split
            ).frozen()
        return out

    def attend(self, qkv, layer, ctx, heads):
        return self.inner.attend(qkv, layer, ctx, heads) if self.inner is not None else None

    def observe(self, probs, layer, ctx):
        if self.inner is not None:
            self.inner.observe(probs, layer, ctx)
        # unconditional branch carries no prompt words
        if layer in self.layers and ctx.branch == "cond":
            self.accumulator.add(probs)


def run_source(
    model: ToyMMDiT,
    z_T: np.ndarray,
    prompt: str,
    schedule: Schedule = Schedule(),
    guidance: GuidanceConfig = GuidanceConfig(),
    layers: Optional[Sequence[int]] = None,
    edit_words: Sequence[str] = (),
    threshold: float = DEFAULT_THRESHOLD,
) -> SourceCache:
    layers = ControlMode(Mode.NONE, None if layers is None else frozenset(layers)).layers(model.cfg.layers)
    emb = model.embed(prompt)
    rec = _Recorder(None, layers, model.cfg.text_len, model.cfg.n_vis)
    _, trace = sample(model, z_T, emb, rec, schedule, guidance)
    cache = SourceCache(
        prompt=prompt,
        prompt_emb=emb,
        z_T=tc.as_tensor(z_T).copy(),
        schedule=schedule,
        guidance=guidance,
        layers=layers,
        entries=rec.entries,
        accumulator=rec.accumulator,
        trace=trace,
    )
    if edit_words:
        cache.mask = cache.word_mask(edit_words, threshold)
    return cache


@dataclass(frozen=True)
class EditRequest:
    target_prompt: str
    edit_words: tuple[str, ...] = ()
    alpha: float = 1.0
    mode: ControlMode = ControlMode()
    guidance: Optional[GuidanceConfig] = None  # None = reuse the source pass setting
    external_mask: Optional[EditMask] = None
    threshold: float = DEFAULT_THRESHOLD
    # K/V-swap baseline: use the resolved mask for both of its masks instead of all-ones
    baseline_use_mask: bool = False
    # diagnostic: hats also take source text rows
    text_from_source: bool = False

    def __post_init__(self):
        object.__setattr__(self, "edit_words", tuple(self.edit_words))
        if isinstance(self.mode, (str, Mode)):
            object.__setattr__(self, "mode", ControlMode(Mode.parse(self.mode)))
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha {self.alpha} outside [0, 1]")


@dataclass
class EditResult:
    z_0: np.ndarray
    trace: Trace
    mask: EditMask
    cache: Optional[SourceCache] = None  # recorded when chaining rounds

    @property
    def nfe(self) -> int:
        return self.trace.nfe


def resolve_mask(cache: SourceCache, request: EditRequest, n_vis: int) -> EditMask:
    if request.external_mask is not None:
        if len(request.external_mask) != n_vis:
            raise MaskError(f"external mask length {len(request.external_mask)} != {n_vis}")
        return request.external_mask
    if request.edit_words:
        return cache.word_mask(request.edit_words, request.threshold)
    if cache.mask is not None:
        return cache.mask
    return EditMask.full(n_vis)


def run_edit(
    model: ToyMMDiT,
    cache: SourceCache,
    request: EditRequest,
    record: bool = False,
    on_fuse=None,
) -> EditResult:
    if request.guidance is not None and request.guidance != cache.guidance:
        raise ValueError("edit guidance must match the source pass")
    layers = request.mode.layers(model.cfg.layers)
    if request.mode.mode is not Mode.NONE:
        if not layers <= cache.layers:
            raise IncompleteCacheError(f"layers {sorted(layers - cache.layers)} were not cached")
        missing = cache.missing()
        if missing:
            raise IncompleteCacheError(f"cache incomplete: {len(missing)} entries missing, first {missing[0]}")
    n_vis = model.cfg.n_vis
    mask = resolve_mask(cache, request, n_vis)
    base_masks = (mask, mask) if request.baseline_use_mask else (None, None)
    ctrl: Controller = FusionController(
        cache.lookup,
        request.mode.mode,
        request.alpha,
        cache.schedule.steps,
        mask,
        layers,
        *base_masks,
        text_from_source=request.text_from_source,
        on_fuse=on_fuse,
    )
    recorder = None
    if record:
        recorder = _Recorder(ctrl, cache.layers, model.cfg.text_len, n_vis)
        ctrl = recorder
    emb = model.embed(request.target_prompt)
    z0, trace = sample(model, cache.z_T, emb, ctrl, cache.schedule, cache.guidance)
    next_cache = None
    if recorder is not None:
        next_cache = SourceCache(
            prompt=request.target_prompt,
            prompt_emb=emb,
            z_T=cache.z_T,
            schedule=cache.schedule,
            guidance=cache.guidance,
            layers=cache.layers,
            entries=recorder.entries,
            accumulator=recorder.accumulator,
            trace=trace,
        )
    return EditResult(z0, trace, mask, next_cache)


def multi_round(
    model: ToyMMDiT,
    z_T: np.ndarray,
    source_prompt: str,
    requests: Sequence[EditRequest],
    schedule: Schedule = Schedule(),
    guidance: GuidanceConfig = GuidanceConfig(),
    layers: Optional[Sequence[int]] = None,
) -> tuple[SourceCache, list[EditResult]]:
    """Chain edits: each round's recorded edit pass is the next round's source."""
    if not requests:
        raise ValueError("multi_round needs at least one request")
    cache = run_source(model, z_T, source_prompt, schedule, guidance, layers)
    first = cache
    results = []
    for i, req in enumerate(requests):
        res = run_edit(model, cache, req, record=i + 1 < len(requests))
        results.append(res)
        cache = res.cache
    return first, results


@dataclass
class RealEditResult:
    image: np.ndarray
    z_T: np.ndarray
    source: SourceCache
    edit: EditResult

    @property
    def nfe(self) -> int:
        return self.source.nfe + self.edit.nfe


def edit_real(
    model: ToyMMDiT,
    image: np.ndarray,
    source_prompt: str,
    request: EditRequest,
    schedule: Schedule = Schedule(),
    guidance: GuidanceConfig = GuidanceConfig(),
    inverter: Optional[Inverter] = None,
    layers: Optional[Sequence[int]] = None,
) -> RealEditResult:
    z_0 = model.image_to_latent(image)
    inv = inverter or EulerInversion()
    z_T, _ = inv(model, z_0, model.embed(source_prompt), schedule, guidance)
    cache = run_source(model, z_T, source_prompt, schedule, guidance, layers)
    res = run_edit(model, cache, replace(request, guidance=None))
    return RealEditResult(model.latent_to_image(res.z_0), z_T, cache, res)
