"""Golden fixture generation and directory hashing.

Everything here must be bit-reproducible: only matmul/softmax/PRNG paths are
exercised, never the LAPACK pseudo-inverse used by unpatchify.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from . import tensor as tc
from .mmdit import ModelConfig, TokenBatch, ToyMMDiT, embed_prompt, pre_attention
from .sampler import Schedule
from .session import run_source

DEFAULT_SEED = 7
SOURCE_PROMPT = "a red car on the road"
MASK_WORDS = ("red",)


def directory_hash(directory: str | Path) -> str:
    """sha256 over (relative path, file bytes) of every file, in sorted order."""
    root = Path(directory)
    h = hashlib.sha256()
    for p in sorted(q for q in root.rglob("*") if q.is_file()):
        rel = p.relative_to(root).as_posix()
        h.update(rel.encode() + b"\0")
        h.update(hashlib.sha256(p.read_bytes()).digest())
    return h.hexdigest()


def dump_fixtures(directory: str | Path, seed: int = DEFAULT_SEED) -> str:
    """Write every golden file under ``directory`` and return its hash."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    cfg = ModelConfig()
    files: dict[str, str] = {}

    def put(name: str, t: np.ndarray, what: str) -> None:
        tc.save_tensor(out / name, t)
        files[name] = what

    prng = tc.Prng(0)
    splitmix = [f"{prng.next_u64():016x}" for _ in range(5)]
    put("randn_seed0.cted", tc.randn(tc.Prng(0), [16]), "randn, seed 0, 16 draws")
    put("embed_horse.cted", embed_prompt("horse", cfg, 0), "prompt 'horse', weights seed 0, embed seed 0")

    model = ToyMMDiT.from_seed(cfg, seed)
    emb = model.embed(SOURCE_PROMPT)
    z_T = tc.randn(tc.Prng(seed + 1), (cfg.n_vis, cfg.dim))
    put("z_T.cted", z_T, f"noise, seed {seed + 1}")
    put("prompt_emb.cted", emb, f"embedding of {SOURCE_PROMPT!r}")
    qkv = pre_attention(TokenBatch(emb, z_T), model.weights.layers[0], 28)
    put("qkv_layer0_step28.cted", np.stack([qkv.q, qkv.k, qkv.v]), "layer 0 pre-attention triple at step 28")
    put("velocity_step28.cted", model.forward(z_T, emb, 28), "model velocity at step 28")

    cache = run_source(model, z_T, SOURCE_PROMPT, Schedule(28), edit_words=MASK_WORDS)
    put("source_z0.cted", cache.z_0, "source rollout z_0, T=28, no guidance")
    put("mask_scores.cted", cache.mask.scores, f"mask scores for {MASK_WORDS}")

    manifest = {
        "seed": seed,
        "config": {"layers": cfg.layers, "dim": cfg.dim, "heads": cfg.heads, "text_len": cfg.text_len,
                   "grid": list(cfg.grid), "patch": cfg.patch},
        "splitmix64_seed0": splitmix,
        "source_nfe": cache.nfe,
        "mask_count": cache.mask.count,
        "files": {name: {"what": what, "sha256": hashlib.sha256((out / name).read_bytes()).hexdigest()}
                  for name, what in files.items()},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory_hash(out)
