"""A miniature MM-DiT: hash prompt embeddings, linear patch embedding, joint
text+vision attention blocks with a controller hook, and a velocity head."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as tc
from .tensor import F32, Prng, matmul


class PromptLengthError(ValueError):
    pass


class ControllerContractError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 4
    dim: int = 32
    heads: int = 4
    text_len: int = 8
    grid: tuple[int, int] = (8, 8)
    patch: int = 2
    channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "grid", tuple(int(g) for g in self.grid))
        if self.layers < 0:
            raise ValueError("layers must be >= 0")
        for name in ("dim", "heads", "text_len", "patch", "channels"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if len(self.grid) != 2 or min(self.grid) <= 0:
            raise ValueError(f"bad grid {self.grid}")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")

    @property
    def n_vis(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def n_tokens(self) -> int:
        return self.text_len + self.n_vis

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def patch_len(self) -> int:
        return self.patch * self.patch * self.channels

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.grid[0] * self.patch, self.grid[1] * self.patch, self.channels)


@dataclass(frozen=True)
class TokenBatch:
    text: np.ndarray
    vision: np.ndarray

    def joined(self) -> np.ndarray:
        return np.concatenate([self.text, self.vision], axis=0)


@dataclass(frozen=True)
class QkvTriple:
    """Un-headed query/key/value matrices; rows ``[0, split)`` are text."""

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    split: int

    def __post_init__(self):
        shape = self.q.shape
        if self.k.shape != shape or self.v.shape != shape or len(shape) != 2:
            raise tc.ShapeError(f"q/k/v shape mismatch: {self.q.shape}, {self.k.shape}, {self.v.shape}")
        if not 0 <= self.split <= shape[0]:
            raise tc.ShapeError(f"split {self.split} outside [0, {shape[0]}]")

    @property
    def shape(self) -> tuple[int, int]:
        return self.q.shape

    def frozen(self) -> "QkvTriple":
        for a in (self.q, self.k, self.v):
            a.flags.writeable = False
        return self

    def equals(self, other: "QkvTriple") -> bool:
        return (
            self.split == other.split
            and np.array_equal(self.q, other.q)
            and np.array_equal(self.k, other.k)
            and np.array_equal(self.v, other.v)
        )


@dataclass(frozen=True)
class ForwardContext:
    """Where an evaluation sits in a rollout: sampling step and CFG branch."""

    step: int
    branch: str = "cond"


class Controller:
    """Attention hook. The default implementation is the identity.

    ``control`` runs once per block on the post-g(.) triple and may return a
    modified triple. ``attend`` may replace the attention computation outright
    by returning ``(output, probs)``; returning None keeps the standard path.
    ``observe`` receives the per-head attention probabilities actually used.
    """

    def control(self, qkv: QkvTriple, layer: int, ctx: ForwardContext) -> QkvTriple:
        return qkv

    def attend(self, qkv: QkvTriple, layer: int, ctx: ForwardContext, heads: int):
        return None

    def observe(self, probs: np.ndarray, layer: int, ctx: ForwardContext) -> None:
        pass


IDENTITY = Controller()


@dataclass
class LayerWeights:
    ln1_gain: np.ndarray
    ln1_bias: np.ndarray
    ln2_gain: np.ndarray
    ln2_bias: np.ndarray
    mod_w1: np.ndarray
    mod_b1: np.ndarray
    mod_w2: np.ndarray
    mod_b2: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    ff_w1: np.ndarray
    ff_b1: np.ndarray
    ff_w2: np.ndarray
    ff_b2: np.ndarray


_LAYER_ROLES = {
    "ln1_gain": "norm gain before attention",
    "ln1_bias": "norm bias before attention",
    "ln2_gain": "norm gain before feed-forward",
    "ln2_bias": "norm bias before feed-forward",
    "mod_w1": "step modulation MLP layer 1 weight",
    "mod_b1": "step modulation MLP layer 1 bias",
    "mod_w2": "step modulation MLP layer 2 weight (shift/scale x2)",
    "mod_b2": "step modulation MLP layer 2 bias",
    "wq": "query projection",
    "wk": "key projection",
    "wv": "value projection",
    "wo": "attention output projection",
    "ff_w1": "feed-forward expansion weight",
    "ff_b1": "feed-forward expansion bias",
    "ff_w2": "feed-forward contraction weight",
    "ff_b2": "feed-forward contraction bias",
}


@dataclass
class ModelWeights:
    layers: list[LayerWeights]
    patch_proj: np.ndarray
    head_w: np.ndarray
    head_b: np.ndarray
    patch_pinv: np.ndarray = field(init=False)

    def __post_init__(self):
        # Computed once; unpatchify reuses it.
        pinv = np.linalg.pinv(self.patch_proj.astype(np.float64))
        self.patch_pinv = pinv.astype(F32)

    def named_tensors(self) -> dict[str, tuple[np.ndarray, str]]:
        out = {
            "patch_proj": (self.patch_proj, "patch embedding projection"),
            "head_w": (self.head_w, "velocity head weight"),
            "head_b": (self.head_b, "velocity head bias"),
        }
        for i, lw in enumerate(self.layers):
            for f in fields(LayerWeights):
                out[f"layer{i}.{f.name}"] = (getattr(lw, f.name), _LAYER_ROLES[f.name])
        return out


def init_weights(
    cfg: ModelConfig,
    seed: int,
    scale: float = 0.02,
    qk_scale: float | None = None,
    vo_scale: float | None = None,
) -> ModelWeights:
    """Gaussian weights, unit norm gains, zero biases.

    Modulation, feed-forward and head matrices use ``scale``. Query/key
    projections default to ``2/sqrt(dim)`` and value/output to ``1/sqrt(dim)``:
    at 0.02 attention is uniform to ~1%, which makes word masks all-ones and
    every fusion rule indistinguishable. The patch projection uses
    ``1/sqrt(patch_len)`` so its pseudo-inverse stays well conditioned.
    """
    prng = Prng(seed)
    d = cfg.dim
    qk = 2.0 / math.sqrt(d) if qk_scale is None else qk_scale
    vo = 1.0 / math.sqrt(d) if vo_scale is None else vo_scale

    def gauss(*dims, s=scale):
        return (tc.randn(prng, dims) * F32(s)).astype(F32)

    layers = []
    for _ in range(cfg.layers):
        layers.append(
            LayerWeights(
                ln1_gain=np.ones(d, F32),
                ln1_bias=np.zeros(d, F32),
                ln2_gain=np.ones(d, F32),
                ln2_bias=np.zeros(d, F32),
                mod_w1=gauss(d, d),
                mod_b1=np.zeros(d, F32),
                mod_w2=gauss(d, 4 * d),
                mod_b2=np.zeros(4 * d, F32),
                wq=gauss(d, d, s=qk),
                wk=gauss(d, d, s=qk),
                wv=gauss(d, d, s=vo),
                wo=gauss(d, d, s=vo),
                ff_w1=gauss(d, 4 * d),
                ff_b1=np.zeros(4 * d, F32),
                ff_w2=gauss(4 * d, d),
                ff_b2=np.zeros(d, F32),
            )
        )
    patch_proj = gauss(cfg.patch_len, d, s=1.0 / math.sqrt(cfg.patch_len))
    return ModelWeights(layers, patch_proj, gauss(d, d), np.zeros(d, F32))


def zero_weights(cfg: ModelConfig, seed: int = 0) -> ModelWeights:
    """All block and head weights zero (velocity is identically zero); patch projection kept random."""
    w = init_weights(cfg, seed)
    for lw in w.layers:
        for f in fields(LayerWeights):
            getattr(lw, f.name)[...] = 0
    w.head_w[...] = 0
    w.head_b[...] = 0
    return w


def save_weights(directory: str | Path, cfg: ModelConfig, weights: ModelWeights) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for name, (t, role) in weights.named_tensors().items():
        fname = f"{name}.cted"
        tc.save_tensor(directory / fname, t)
        tensors[name] = {"file": fname, "role": role}
    manifest = {
        "layers": cfg.layers,
        "dim": cfg.dim,
        "heads": cfg.heads,
        "text_len": cfg.text_len,
        "grid": list(cfg.grid),
        "patch": cfg.patch,
        "channels": cfg.channels,
        "tensors": tensors,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_weights(directory: str | Path) -> tuple[ModelConfig, ModelWeights]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    cfg = ModelConfig(
        layers=manifest["layers"],
        dim=manifest["dim"],
        heads=manifest["heads"],
        text_len=manifest["text_len"],
        grid=tuple(manifest["grid"]),
        patch=manifest["patch"],
        channels=manifest.get("channels", 3),
    )
    entries = manifest["tensors"]

    def get(name):
        return tc.load_tensor(directory / entries[name]["file"])

    layers = [
        LayerWeights(**{f.name: get(f"layer{i}.{f.name}") for f in fields(LayerWeights)})
        for i in range(cfg.layers)
    ]
    return cfg, ModelWeights(layers, get("patch_proj"), get("head_w"), get("head_b"))


# ---------------------------------------------------------------------------
# Token plumbing


def embed_prompt(prompt: str, cfg: ModelConfig, seed: int = 0) -> np.ndarray:
    words = prompt.split()
    if len(words) > cfg.text_len:
        raise PromptLengthError(f"{len(words)} words exceed text_len={cfg.text_len}")
    emb = np.zeros((cfg.text_len, cfg.dim), F32)
    for i, w in enumerate(words):
        emb[i] = tc.randn(Prng(tc.fnv1a64(w) ^ (seed & 0xFFFFFFFFFFFFFFFF)), [cfg.dim])
    return emb + tc.sinusoidal(range(cfg.text_len), cfg.dim)


def prompt_words(prompt: str) -> list[str]:
    return prompt.split()


def _patches(image: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    p = cfg.patch
    h, w, c = image.shape
    if h % p or w % p:
        raise tc.ShapeError(f"image {h}x{w} not divisible by patch size {p}")
    if (h // p, w // p) != cfg.grid or c != cfg.channels:
        raise tc.ShapeError(f"image {image.shape} does not match grid {cfg.grid} x patch {p} x {cfg.channels}")
    x = image.reshape(h // p, p, w // p, p, c).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(x.reshape(cfg.n_vis, cfg.patch_len))


def patchify(image: np.ndarray, cfg: ModelConfig, weights: ModelWeights) -> np.ndarray:
    return matmul(_patches(tc.as_tensor(image), cfg), weights.patch_proj)


def unpatchify(tokens: np.ndarray, cfg: ModelConfig, weights: ModelWeights) -> np.ndarray:
    flat = matmul(tokens, weights.patch_pinv)
    gh, gw = cfg.grid
    p, c = cfg.patch, cfg.channels
    x = flat.reshape(gh, gw, p, p, c).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(x.reshape(gh * p, gw * p, c))


# ---------------------------------------------------------------------------
# Blocks


def _row(v: np.ndarray) -> np.ndarray:
    return v.reshape(1, -1)


def modulation(lw: LayerWeights, step: int, dim: int) -> tuple[np.ndarray, ...]:
    """(shift_attn, scale_attn, shift_ff, scale_ff) from the step embedding."""
    emb = tc.sinusoidal([step], dim)
    hidden = tc.silu(matmul(emb, lw.mod_w1) + _row(lw.mod_b1))
    out = matmul(hidden, lw.mod_w2) + _row(lw.mod_b2)
    return tuple(out[:, i * dim : (i + 1) * dim] for i in range(4))


def _modulated_norm(x, gain, bias, shift, scale):
    return tc.layer_norm(x, gain, bias) * (F32(1) + scale) + shift


def pre_attention(tokens: TokenBatch, lw: LayerWeights, step: int, mod=None) -> QkvTriple:
    d = tokens.text.shape[1]
    shift_a, scale_a, _, _ = mod if mod is not None else modulation(lw, step, d)
    # one shared g(.) for both streams; rows stay [text; vision]
    h = _modulated_norm(tokens.joined(), lw.ln1_gain, lw.ln1_bias, shift_a, scale_a)
    q, k, v = (matmul(h, w) for w in (lw.wq, lw.wk, lw.wv))
    return QkvTriple(q, k, v, split=tokens.text.shape[0])


def split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    n, d = x.shape
    return np.ascontiguousarray(x.reshape(n, heads, d // heads).transpose(1, 0, 2))


def merge_heads(x: np.ndarray) -> np.ndarray:
    h, n, dh = x.shape
    return np.ascontiguousarray(x.transpose(1, 0, 2).reshape(n, h * dh))


def attention(q, k, v, heads: int, key_mask: Optional[np.ndarray] = None):
    """Multi-head scaled dot-product attention on un-headed matrices.

    ``key_mask`` (bool, one entry per key row) removes keys by sending their
    logits to -inf. Returns ``(output [n x d], probs [heads x n x n])``.
    """
    qh, kh, vh = (split_heads(x, heads) for x in (q, k, v))
    scale = F32(1.0 / math.sqrt(q.shape[1] // heads))
    logits = matmul(qh, np.ascontiguousarray(kh.transpose(0, 2, 1))) * scale
    if key_mask is not None:
        logits = np.where(key_mask[None, None, :], logits, F32(-np.inf))
    probs = tc.softmax_rows(logits)
    return merge_heads(matmul(probs, vh)), probs


def _check_contract(before: QkvTriple, after) -> QkvTriple:
    if not isinstance(after, QkvTriple):
        raise ControllerContractError(f"controller returned {type(after).__name__}, expected QkvTriple")
    if after.shape != before.shape or after.split != before.split:
        raise ControllerContractError(
            f"controller changed shape/split: {before.shape}/{before.split} -> {after.shape}/{after.split}"
        )
    for a in (after.q, after.k, after.v):
        if a.dtype != F32:
            raise ControllerContractError(f"controller returned dtype {a.dtype}")
    return after


def block_forward(
    tokens: TokenBatch,
    lw: LayerWeights,
    heads: int,
    layer: int,
    ctx: ForwardContext,
    controller: Optional[Controller] = None,
) -> TokenBatch:
    d = tokens.text.shape[1]
    mod = modulation(lw, ctx.step, d)
    qkv = pre_attention(tokens, lw, ctx.step, mod)
    if controller is not None:
        qkv = _check_contract(qkv, controller.control(qkv, layer, ctx))
        custom = controller.attend(qkv, layer, ctx, heads)
    else:
        custom = None
    if custom is None:
        attn, probs = attention(qkv.q, qkv.k, qkv.v, heads)
    else:
        attn, probs = custom
        if attn.shape != qkv.shape:
            raise ControllerContractError(f"controller attention output shape {attn.shape} != {qkv.shape}")
    if controller is not None:
        controller.observe(probs, layer, ctx)

    x = tokens.joined() + matmul(attn, lw.wo)
    _, _, shift_f, scale_f = mod
    hn = _modulated_norm(x, lw.ln2_gain, lw.ln2_bias, shift_f, scale_f)
    hidden = tc.gelu(matmul(hn, lw.ff_w1) + _row(lw.ff_b1))
    x = x + (matmul(hidden, lw.ff_w2) + _row(lw.ff_b2))
    n_txt = tokens.text.shape[0]
    return TokenBatch(text=x[:n_txt], vision=x[n_txt:])


class ToyMMDiT:
    def __init__(self, cfg: ModelConfig, weights: ModelWeights, embed_seed: int = 0):
        if len(weights.layers) != cfg.layers:
            raise ValueError(f"weights have {len(weights.layers)} layers, config says {cfg.layers}")
        self.cfg = cfg
        self.weights = weights
        self.embed_seed = embed_seed

    @classmethod
    def from_seed(cls, cfg: ModelConfig, seed: int, embed_seed: Optional[int] = None) -> "ToyMMDiT":
        return cls(cfg, init_weights(cfg, seed), seed + 2 if embed_seed is None else embed_seed)

    def embed(self, prompt: str) -> np.ndarray:
        return embed_prompt(prompt, self.cfg, self.embed_seed)

    def patchify(self, image: np.ndarray) -> np.ndarray:
        return patchify(image, self.cfg, self.weights)

    def unpatchify(self, tokens: np.ndarray) -> np.ndarray:
        return unpatchify(tokens, self.cfg, self.weights)

    def image_to_latent(self, image: np.ndarray) -> np.ndarray:
        """[0,1] image -> vision tokens (pixels recentred to [-1,1])."""
        return self.patchify(tc.as_tensor(image) * F32(2) - F32(1))

    def latent_to_image(self, z: np.ndarray) -> np.ndarray:
        return np.clip((self.unpatchify(z) + F32(1)) * F32(0.5), 0, 1).astype(F32)

    def forward(
        self,
        z: np.ndarray,
        prompt_emb: np.ndarray,
        t: int,
        controller: Optional[Controller] = None,
        branch: str = "cond",
    ) -> np.ndarray:
        cfg = self.cfg
        if z.shape != (cfg.n_vis, cfg.dim):
            raise tc.ShapeError(f"latent shape {z.shape} != {(cfg.n_vis, cfg.dim)}")
        ctx = ForwardContext(step=int(t), branch=branch)
        tokens = TokenBatch(text=prompt_emb, vision=z)
        for layer, lw in enumerate(self.weights.layers):
            tokens = block_forward(tokens, lw, cfg.heads, layer, ctx, controller)
            assert tokens.vision.shape[0] == cfg.n_vis
        return matmul(tokens.vision, self.weights.head_w) + _row(self.weights.head_b)
