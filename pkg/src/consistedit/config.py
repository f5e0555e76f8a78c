"""Flat ``key = value`` run configuration with validation and round-tripping."""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional

from .control import ControlMode, Mode, last_half
from .masks import DEFAULT_THRESHOLD
from .mmdit import ModelConfig
from .sampler import GuidanceConfig, Schedule


class ConfigError(ValueError):
    pass


def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def _parse_words(s: str) -> tuple[str, ...]:
    return tuple(w.strip() for w in s.split(",") if w.strip())


def _parse_grid(s: str) -> tuple[int, int]:
    parts = s.lower().replace(",", "x").split("x")
    if len(parts) != 2:
        raise ConfigError(f"grid must look like 8x8, got {s!r}")
    return int(parts[0]), int(parts[1])


def parse_blocks(s: str) -> str:
    """Normalise a block selector: ``all``, ``last-half`` or ``0,2,3``."""
    s = s.strip().lower()
    if s in ("all", "last-half"):
        return s
    try:
        idx = sorted({int(b) for b in s.split(",") if b.strip()})
    except ValueError:
        raise ConfigError(f"blocks must be all, last-half or a comma list, got {s!r}") from None
    if not idx:
        raise ConfigError("empty block list")
    return ",".join(str(b) for b in idx)


@dataclass(frozen=True)
class Round:
    """One multi-round request: target prompt plus the words to mask in its source."""

    target: str
    edit_words: tuple[str, ...] = ()

    @classmethod
    def parse(cls, s: str) -> "Round":
        target, _, words = s.partition(":")
        if not target.strip():
            raise ConfigError(f"round without a target prompt: {s!r}")
        return cls(" ".join(target.split()), _parse_words(words))

    def __str__(self) -> str:
        return self.target + (":" + ",".join(self.edit_words) if self.edit_words else "")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    steps: int = 28
    layers: int = 4
    dim: int = 32
    heads: int = 4
    text_len: int = 8
    grid: tuple[int, int] = (8, 8)
    patch: int = 2
    channels: int = 3
    source_prompt: str = "a red car on the road"
    target_prompt: str = "a blue car on the road"
    edit_words: tuple[str, ...] = ()
    alpha: float = 1.0
    mode: str = "consistedit"
    blocks: str = "all"
    cfg: bool = False
    cfg_scale: float = 7.5
    threshold: float = DEFAULT_THRESHOLD
    mask: Optional[str] = None
    rounds: tuple[Round, ...] = ()
    out: str = "out"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha {self.alpha} outside [0, 1]")
        if self.cfg_scale < 0:
            raise ConfigError("cfg_scale must be >= 0")
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError(f"threshold {self.threshold} outside [0, 1]")
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")
        try:
            Mode.parse(self.mode)
            model = self.model_config()
            Schedule(self.steps)
            self.control_mode().layers(model.layers)
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        for p in (self.source_prompt, self.target_prompt, *(r.target for r in self.rounds)):
            if len(p.split()) > self.text_len:
                raise ConfigError(f"prompt {p!r} has more than {self.text_len} words")
        missing = [w for w in self.edit_words if w not in self.source_prompt.split()]
        if missing:
            raise ConfigError(f"edit words {missing} not in source prompt")

    # -- derived objects -----------------------------------------------------

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.layers, self.dim, self.heads, self.text_len, self.grid, self.patch, self.channels)

    def schedule(self) -> Schedule:
        return Schedule(self.steps)

    def guidance(self) -> GuidanceConfig:
        return GuidanceConfig(self.cfg, self.cfg_scale)

    def block_set(self) -> Optional[frozenset[int]]:
        b = parse_blocks(self.blocks)
        if b == "all":
            return None
        if b == "last-half":
            return last_half(self.layers)
        return frozenset(int(x) for x in b.split(","))

    def control_mode(self) -> ControlMode:
        return ControlMode(Mode.parse(self.mode), self.block_set())

    @property
    def weight_seed(self) -> int:
        return self.seed

    @property
    def noise_seed(self) -> int:
        return self.seed + 1

    @property
    def embed_seed(self) -> int:
        return self.seed + 2

    def model_keys(self) -> dict[str, Any]:
        """Fields that determine the model, noise and source pass."""
        keys = ("seed", "steps", "layers", "dim", "heads", "text_len", "grid", "patch", "channels")
        return {k: getattr(self, k) for k in keys}

    # -- text form -----------------------------------------------------------

    def serialize(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            lines.append(f"{f.name} = {_format(f.name, v)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text: str, base: Optional["RunConfig"] = None) -> "RunConfig":
        values = parse_pairs(text)
        return (base or cls()).with_overrides(values)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.parse(text)

    def with_overrides(self, values: dict[str, str]) -> "RunConfig":
        known = {f.name: f for f in fields(self)}
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        kw = {}
        for k, raw in values.items():
            try:
                kw[k] = _convert(k, raw)
            except ConfigError:
                raise
            except ValueError:
                raise ConfigError(f"bad value for {k}: {raw!r}") from None
        return replace(self, **kw)


def parse_pairs(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"line {n}: expected 'key = value'")
        if key in out:
            raise ConfigError(f"line {n}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


_INTS = {"seed", "steps", "layers", "dim", "heads", "text_len", "patch", "channels"}
_FLOATS = {"alpha", "cfg_scale", "threshold"}


def _convert(key: str, raw: str) -> Any:
    if key in _INTS:
        return int(raw)
    if key in _FLOATS:
        return float(raw)
    if key == "cfg":
        return _parse_bool(raw)
    if key == "grid":
        return _parse_grid(raw)
    if key == "edit_words":
        return _parse_words(raw)
    if key == "rounds":
        return tuple(Round.parse(r) for r in raw.split(";") if r.strip())
    if key == "mode":
        return Mode.parse(raw).value
    if key == "blocks":
        return parse_blocks(raw)
    if key == "mask":
        return raw or None
    if key in ("source_prompt", "target_prompt"):
        return " ".join(raw.split())
    return raw


def _format(key: str, v: Any) -> str:
    if key == "grid":
        return f"{v[0]}x{v[1]}"
    if key == "edit_words":
        return ",".join(v)
    if key == "rounds":
        return "; ".join(str(r) for r in v)
    if key == "cfg":
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)
