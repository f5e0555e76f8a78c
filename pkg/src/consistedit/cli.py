"""Command-line entry point: gen, edit, multiround, invert, eval, dump-fixtures.

Exit codes: 0 ok, 2 config error, 3 missing artifact, 4 numeric divergence.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import metrics
from . import tensor as tc
from .config import ConfigError, RunConfig
from .fixtures import DEFAULT_SEED, dump_fixtures
from .masks import EditMask, MaskError, load_external, upsample_to_pixels
from .mmdit import PromptLengthError, ToyMMDiT, init_weights, load_weights, save_weights
from .sampler import DivergenceError, EulerInversion, relative_error, sample
from .session import EditRequest, IncompleteCacheError, SourceCache, multi_round, run_edit, run_source

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_DIVERGED = 0, 2, 3, 4


class MissingArtifact(FileNotFoundError):
    pass


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--mode", help="none, kv, structure, consistedit or star")
    p.add_argument("--blocks", help="all, last-half or a comma list of layer indices")
    p.add_argument("--edit-word", dest="edit_words", help="comma-separated edit words")
    p.add_argument("--mask", help="external mask tensor file (n_vis entries)")
    p.add_argument("--cfg-scale", type=float, help="enable guidance with this scale")
    p.add_argument("--source", dest="source_prompt")
    p.add_argument("--target", dest="target_prompt")
    p.add_argument("--threshold", type=float)
    p.add_argument("--out")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="consistedit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="source pass: image, trace and Q/K/V cache")
    _add_common(p)
    p = sub.add_parser("edit", help="edit pass against a cache written by gen")
    _add_common(p)
    p.add_argument("--alpha-sweep", help="start:stop:step, inclusive")
    p = sub.add_parser("multiround", help="chained edits from one source pass")
    _add_common(p)
    p.add_argument("--round", dest="round_specs", action="append", help="'target prompt:word1,word2' (repeatable)")
    p = sub.add_parser("invert", help="invert an image or latent back to noise")
    _add_common(p)
    p.add_argument("input", help=".ppm image, or .cted image (HxWxC) or latent (n_vis x d)")
    p = sub.add_parser("eval", help="metric report for NAME.src.ppm / NAME.edit.ppm pairs")
    p.add_argument("directory")
    p.add_argument("--out")
    p = sub.add_parser("dump-fixtures", help="write golden fixtures deterministically")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--out", default="fixtures")
    return parser


def load_config(args: argparse.Namespace) -> RunConfig:
    base = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    over: dict[str, str] = {}
    for key in ("seed", "steps", "alpha", "mode", "blocks", "edit_words", "mask",
                "source_prompt", "target_prompt", "threshold", "out"):
        v = getattr(args, key, None)
        if v is not None:
            over[key] = str(v)
    if getattr(args, "cfg_scale", None) is not None:
        over["cfg_scale"] = str(args.cfg_scale)
        over["cfg"] = "true"
    if getattr(args, "round_specs", None):
        over["rounds"] = ";".join(args.round_specs)
    return base.with_overrides(over)


def parse_sweep(spec: str) -> list[float]:
    try:
        start, stop, step = (float(x) for x in spec.split(":"))
    except ValueError:
        raise ConfigError(f"--alpha-sweep wants start:stop:step, got {spec!r}") from None
    if step <= 0 or stop < start:
        raise ConfigError(f"bad sweep {spec!r}")
    n = int(round((stop - start) / step))
    if abs(start + n * step - stop) > 1e-9:
        raise ConfigError(f"sweep {spec!r} does not land on its stop value")
    alphas = [round(start + i * step, 10) for i in range(n + 1)]
    if alphas[0] < 0 or alphas[-1] > 1:
        raise ConfigError(f"sweep {spec!r} leaves [0, 1]")
    return alphas


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"missing {what}: {path}")
    return path


def _model_for(cfg: RunConfig) -> ToyMMDiT:
    mc = cfg.model_config()
    return ToyMMDiT(mc, init_weights(mc, cfg.weight_seed), cfg.embed_seed)


def _load_model(out: Path, cfg: RunConfig) -> ToyMMDiT:
    mc, weights = load_weights(_require(out / "weights" / "manifest.json", "weight bundle").parent)
    if mc != cfg.model_config():
        raise ConfigError(f"config model {cfg.model_config()} does not match saved weights {mc}")
    return ToyMMDiT(mc, weights, cfg.embed_seed)


def _load_run(out: Path, cfg: RunConfig) -> tuple[ToyMMDiT, SourceCache]:
    saved = RunConfig.load(_require(out / "run.cfg", "run config from gen"))
    if saved.model_keys() != cfg.model_keys():
        diff = {k: (saved.model_keys()[k], v) for k, v in cfg.model_keys().items() if saved.model_keys()[k] != v}
        raise ConfigError(f"config differs from the gen run in {diff}")
    model = _load_model(out, cfg)
    cache = SourceCache.load(_require(out / "cache" / "manifest.json", "source cache").parent)
    if cache.guidance != cfg.guidance():
        raise ConfigError("guidance settings differ from the source pass")
    return model, cache


def _external_mask(cfg: RunConfig, n_vis: int) -> Optional[EditMask]:
    if cfg.mask is None:
        return None
    return load_external(_require(Path(cfg.mask), "mask file"), n_vis)


def _report(name: str, model: ToyMMDiT, src_img, img, mask: Optional[EditMask]) -> str:
    pix = None if mask is None else upsample_to_pixels(mask, model.cfg.grid, model.cfg.patch)
    return metrics.format_report(metrics.report(name, src_img, img, pix))


def cmd_gen(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    model = _model_for(cfg)
    mc = model.cfg
    z_T = tc.randn(tc.Prng(cfg.noise_seed), (mc.n_vis, mc.dim))
    cache = run_source(model, z_T, cfg.source_prompt, cfg.schedule(), cfg.guidance(),
                       cfg.block_set(), cfg.edit_words, cfg.threshold)
    img = model.latent_to_image(cache.z_0)
    save_weights(out / "weights", mc, model.weights)
    cache.save(out / "cache")
    tc.save_tensor(out / "source_image.cted", img)
    metrics.write_ppm(out / "source.ppm", img)
    (out / "run.cfg").write_text(cfg.serialize(), encoding="utf-8")
    mask = f"mask={cache.mask.count}/{mc.n_vis}" if cache.mask is not None else "mask=none"
    print(f"gen\tnfe={cache.nfe}\tentries={len(cache.entries)}\t{mask}")
    return EXIT_OK


def cmd_edit(cfg: RunConfig, sweep: Optional[str] = None) -> int:
    out = Path(cfg.out)
    alphas = parse_sweep(sweep) if sweep else [cfg.alpha]
    model, cache = _load_run(out, cfg)
    src_img = tc.load_tensor(_require(out / "source_image.cted", "source image"))
    ext = _external_mask(cfg, model.cfg.n_vis)
    lines = []
    for a in alphas:
        req = EditRequest(cfg.target_prompt, cfg.edit_words, a, cfg.control_mode(), external_mask=ext,
                          threshold=cfg.threshold)
        res = run_edit(model, cache, req)
        img = model.latent_to_image(res.z_0)
        tag = f"edited_a{a:g}" if sweep else "edited"
        metrics.write_ppm(out / f"{tag}.ppm", img)
        tc.save_tensor(out / f"{tag}.cted", img)
        line = _report(f"{cfg.control_mode().mode.value}_a{a:g}", model, src_img, img, res.mask)
        print(line)
        lines.append(line)
        if res.nfe != cache.nfe:
            raise AssertionError(f"edit NFE {res.nfe} != source NFE {cache.nfe}")
    (out / "metrics.tsv").write_text("\n".join(lines) + "\n")
    return EXIT_OK


def cmd_multiround(cfg: RunConfig) -> int:
    if not cfg.rounds:
        raise ConfigError("multiround needs at least one round (config 'rounds' or --round)")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    model = _model_for(cfg)
    mc = model.cfg
    z_T = tc.randn(tc.Prng(cfg.noise_seed), (mc.n_vis, mc.dim))
    requests = [EditRequest(r.target, r.edit_words, cfg.alpha, cfg.control_mode(), threshold=cfg.threshold)
                for r in cfg.rounds]
    first, results = multi_round(model, z_T, cfg.source_prompt, requests, cfg.schedule(), cfg.guidance(),
                                 cfg.block_set())
    src_img = model.latent_to_image(first.z_0)
    metrics.write_ppm(out / "round_0.ppm", src_img)
    prev = src_img
    for k, res in enumerate(results, 1):
        img = model.latent_to_image(res.z_0)
        metrics.write_ppm(out / f"round_{k}.ppm", img)
        print(_report(f"round_{k}", model, prev, img, res.mask))
        prev = img
    total = first.nfe + sum(r.nfe for r in results)
    print(f"multiround\trounds={len(results)}\tnfe={total}")
    return EXIT_OK


def _read_input(path: Path) -> np.ndarray:
    _require(path, "input")
    if path.suffix.lower() == ".ppm":
        return metrics.read_ppm(path)
    return tc.load_tensor(path)


def cmd_invert(cfg: RunConfig, input_path: str) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    model = _load_model(out, cfg) if (out / "weights" / "manifest.json").exists() else _model_for(cfg)
    mc = model.cfg
    x = _read_input(Path(input_path))
    is_latent = x.shape == (mc.n_vis, mc.dim)
    if not is_latent and x.shape != mc.image_shape:
        raise ConfigError(f"input shape {x.shape} is neither a latent nor a {mc.image_shape} image")
    z_0 = x if is_latent else model.image_to_latent(x)
    emb = model.embed(cfg.source_prompt)
    z_hat, _ = EulerInversion()(model, z_0, emb, cfg.schedule(), cfg.guidance())
    tc.save_tensor(out / "z_T_hat.cted", z_hat)
    z_rec, _ = sample(model, z_hat, emb, None, cfg.schedule(), cfg.guidance())
    fields = [f"invert\trecon_rel_err={relative_error(z_rec, z_0):.3e}"]
    ref = out / "cache" / "z_T.cted"
    if ref.exists():
        fields.append(f"z_T_rel_err={relative_error(z_hat, tc.load_tensor(ref)):.3e}")
    print("\t".join(fields))
    if not is_latent:
        rec = model.latent_to_image(z_rec)
        metrics.write_ppm(out / "reconstruction.ppm", rec)
        print(_report("reconstruction", model, x, rec, None))
    return EXIT_OK


def cmd_eval(directory: str, out: Optional[str] = None) -> int:
    d = Path(directory)
    if not d.is_dir():
        raise MissingArtifact(f"missing directory: {d}")
    lines = []
    for src in sorted(d.glob("*.src.ppm")):
        name = src.name[: -len(".src.ppm")]
        edit = _require(d / f"{name}.edit.ppm", f"edited image for {name}")
        a, b = metrics.read_ppm(src), metrics.read_ppm(edit)
        mask_path = d / f"{name}.mask.cted"
        pix = None
        if mask_path.exists():
            m = tc.load_tensor(mask_path)
            pix = m >= 0.5 if m.shape == a.shape[:2] else None
            if pix is None:
                raise ConfigError(f"{mask_path} must be an HxW pixel mask")
        lines.append(metrics.format_report(metrics.report(name, a, b, pix)))
    for line in lines:
        print(line)
    if out:
        Path(out).write_text("".join(l + "\n" for l in lines))
    return EXIT_OK


def cmd_dump_fixtures(seed: int, out: str) -> int:
    print(f"dump-fixtures\t{dump_fixtures(out, seed)}")
    return EXIT_OK


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        if args.command == "eval":
            return cmd_eval(args.directory, args.out)
        if args.command == "dump-fixtures":
            return cmd_dump_fixtures(args.seed, args.out)
        cfg = load_config(args)
        if args.command == "gen":
            return cmd_gen(cfg)
        if args.command == "edit":
            return cmd_edit(cfg, args.alpha_sweep)
        if args.command == "multiround":
            return cmd_multiround(cfg)
        return cmd_invert(cfg, args.input)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (MissingArtifact, FileNotFoundError, IncompleteCacheError, tc.TensorFileError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ConfigError, MaskError, PromptLengthError, ValueError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def main() -> None:
    sys.exit(run())
