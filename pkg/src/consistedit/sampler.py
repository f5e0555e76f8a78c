"""Rectified-flow Euler sampling, Euler inversion and classifier-free guidance."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Protocol

import numpy as np

from . import tensor as tc
from .mmdit import Controller, ToyMMDiT
from .tensor import F32


class DivergenceError(FloatingPointError):
    def __init__(self, step: int, detail: str = ""):
        self.step = step
        super().__init__(f"non-finite latent at step {step}" + (f": {detail}" if detail else ""))


@dataclass(frozen=True)
class Schedule:
    """Descending time values; ``sigmas[t]`` is the time of step ``t``."""

    steps: int = 28
    sigmas: tuple[float, ...] = ()

    def __post_init__(self):
        if self.steps <= 0:
            raise ValueError("steps must be positive")
        if not self.sigmas:
            object.__setattr__(self, "sigmas", tuple(t / self.steps for t in range(self.steps + 1)))
        s = self.sigmas
        if len(s) != self.steps + 1:
            raise ValueError(f"need {self.steps + 1} sigmas, got {len(s)}")
        if s[0] != 0.0 or s[-1] != 1.0:
            raise ValueError("sigmas must run from 0 (index 0) to 1 (index T)")
        if any(b <= a for a, b in zip(s, s[1:])):
            raise ValueError("sigmas must be strictly increasing in the step index")

    def delta(self, t: int) -> F32:
        """sigma_t - sigma_{t-1} rounded to float32."""
        return F32(self.sigmas[t] - self.sigmas[t - 1])


@dataclass(frozen=True)
class GuidanceConfig:
    enabled: bool = False
    scale: float = 7.5

    def __post_init__(self):
        if self.scale < 0:
            raise ValueError("guidance scale must be >= 0")

    @property
    def branches(self) -> tuple[str, ...]:
        return ("cond", "uncond") if self.enabled else ("cond",)


REAL_IMAGE_GUIDANCE = GuidanceConfig(enabled=True, scale=2.0)


@dataclass
class Trace:
    """Latents visited by one rollout, keyed by step index (``T`` = start)."""

    latents: dict[int, np.ndarray] = field(default_factory=dict)
    nfe: int = 0

    def dump(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        files = {}
        for t in sorted(self.latents, reverse=True):
            name = f"z_{t:04d}.cted"
            tc.save_tensor(directory / name, self.latents[t])
            files[str(t)] = name
        manifest = {"nfe": self.nfe, "steps": files}
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory: str | Path) -> "Trace":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        latents = {int(t): tc.load_tensor(directory / name) for t, name in manifest["steps"].items()}
        return cls(latents=latents, nfe=manifest["nfe"])


def euler_step(z_t: np.ndarray, v: np.ndarray, sigma_t: float, sigma_prev: float) -> np.ndarray:
    return z_t - F32(sigma_t - sigma_prev) * v


def _finite_or_raise(z: np.ndarray, step: int) -> None:
    if not np.isfinite(z).all():
        raise DivergenceError(step)


def guided_velocity(
    model: ToyMMDiT,
    z: np.ndarray,
    prompt_emb: np.ndarray,
    uncond_emb: np.ndarray,
    t: int,
    controller: Optional[Controller],
    guidance: GuidanceConfig,
) -> tuple[np.ndarray, int]:
    """Velocity at step ``t`` and the number of model evaluations spent."""
    v_c = model.forward(z, prompt_emb, t, controller, branch="cond")
    if not guidance.enabled:
        return v_c, 1
    v_u = model.forward(z, uncond_emb, t, controller, branch="uncond")
    return v_u + F32(guidance.scale) * (v_c - v_u), 2


def sample(
    model: ToyMMDiT,
    z_T: np.ndarray,
    prompt_emb: np.ndarray,
    controller: Optional[Controller] = None,
    schedule: Schedule = Schedule(),
    guidance: GuidanceConfig = GuidanceConfig(),
    uncond_emb: Optional[np.ndarray] = None,
    on_step: Optional[Callable[[int], None]] = None,
) -> tuple[np.ndarray, Trace]:
    if z_T.shape != (model.cfg.n_vis, model.cfg.dim):
        raise tc.ShapeError(f"z_T shape {z_T.shape} != {(model.cfg.n_vis, model.cfg.dim)}")
    if guidance.enabled and uncond_emb is None:
        uncond_emb = model.embed("")
    trace = Trace()
    z = tc.as_tensor(z_T)
    trace.latents[schedule.steps] = z
    for t in range(schedule.steps, 0, -1):
        if on_step is not None:
            on_step(t)
        try:
            v, n = guided_velocity(model, z, prompt_emb, uncond_emb, t, controller, guidance)
        except tc.NonFiniteError as exc:
            raise DivergenceError(t, str(exc)) from exc
        trace.nfe += n
        z = euler_step(z, v, schedule.sigmas[t], schedule.sigmas[t - 1])
        _finite_or_raise(z, t)
        trace.latents[t - 1] = z
    return z, trace


class Inverter(Protocol):
    def __call__(
        self,
        model: ToyMMDiT,
        z_0: np.ndarray,
        prompt_emb: np.ndarray,
        schedule: Schedule,
        guidance: GuidanceConfig,
    ) -> tuple[np.ndarray, Trace]: ...


@dataclass(frozen=True)
class EulerInversion:
    """Forward Euler from data to noise.

    With ``refine > 0`` each step re-evaluates the velocity at the current
    estimate of ``z_t`` (the point the sampler evaluates), i.e. a fixed-point
    iteration on ``z_t = z_{t-1} + dt * v(z_t, t)``.
    """

    refine: int = 2

    def __call__(self, model, z_0, prompt_emb, schedule=Schedule(), guidance=GuidanceConfig()):
        uncond = model.embed("") if guidance.enabled else None
        trace = Trace()
        z = tc.as_tensor(z_0)
        trace.latents[0] = z
        for t in range(1, schedule.steps + 1):
            dt = schedule.delta(t)
            try:
                v, n = guided_velocity(model, z, prompt_emb, uncond, t, None, guidance)
                trace.nfe += n
                z_next = z + dt * v
                for _ in range(self.refine):
                    _finite_or_raise(z_next, t)
                    v, n = guided_velocity(model, z_next, prompt_emb, uncond, t, None, guidance)
                    trace.nfe += n
                    z_next = z + dt * v
            except tc.NonFiniteError as exc:
                raise DivergenceError(t, str(exc)) from exc
            _finite_or_raise(z_next, t)
            z = z_next
            trace.latents[t] = z
        return z, trace


def invert(
    model: ToyMMDiT,
    z_0: np.ndarray,
    prompt_emb: np.ndarray,
    schedule: Schedule = Schedule(),
    inverter: Optional[Inverter] = None,
    guidance: GuidanceConfig = GuidanceConfig(),
) -> np.ndarray:
    z_T, _ = (inverter or EulerInversion())(model, z_0, prompt_emb, schedule, guidance)
    return z_T


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a64, b64 = a.astype(np.float64), b.astype(np.float64)
    return float(np.linalg.norm(a64 - b64) / np.linalg.norm(b64))
