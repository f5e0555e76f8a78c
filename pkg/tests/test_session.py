from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np
import pytest

from conftest import PROMPT, noise, source_cache, toy_model
from consistedit import metrics
from consistedit.control import ControlMode, Mode
from consistedit.masks import EditMask
from consistedit.mmdit import ModelConfig, ToyMMDiT, zero_weights
from consistedit.sampler import DivergenceError, GuidanceConfig, Schedule, sample
from consistedit.session import (
    EditRequest,
    IncompleteCacheError,
    SourceCache,
    edit_real,
    multi_round,
    run_edit,
    run_source,
)

F32 = np.float32
CFG = ModelConfig()
TARGET = "a blue car on the road"


def test_cache_completeness_count():
    g = GuidanceConfig(True, 2.0)
    c = run_source(toy_model(0), noise(0), PROMPT, Schedule(5), g, layers=[1, 3])
    assert len(c.entries) == 5 * 2 * 2 and c.is_complete()
    assert c.nfe == 10


def test_cache_deterministic():
    a = run_source(toy_model(1), noise(1), PROMPT, Schedule(6), edit_words=("red",))
    b = run_source(toy_model(1), noise(1), PROMPT, Schedule(6), edit_words=("red",))
    assert a.digest() == b.digest()


def test_recording_is_transparent():
    c = source_cache(0)
    m = toy_model(0)
    z0, _ = sample(m, noise(0), m.embed(PROMPT))
    assert np.array_equal(c.z_0, z0)


def test_source_and_edit_share_noise():
    c = source_cache(0)
    res = run_edit(toy_model(0), c, EditRequest(TARGET, mode=ControlMode(Mode.CONSISTEDIT)))
    assert np.array_equal(res.trace.latents[28], c.z_T) and np.array_equal(c.z_T, noise(0))


@pytest.mark.parametrize("mode", [Mode.STRUCTURE, Mode.CONSISTEDIT_STAR])
def test_self_edit_fixed_point(mode):
    c = source_cache(1)
    res = run_edit(toy_model(1), c, EditRequest(PROMPT, alpha=0.3, mode=ControlMode(mode)))
    assert np.array_equal(res.z_0, c.z_0) and res.nfe == c.nfe


def test_star_full_mask_follows_source_vision_rows():
    c = source_cache(2)
    seen = []

    def check(layer, ctx, target, fused):
        src = c.lookup(ctx.step, layer, ctx.branch)
        s = fused.split
        seen.append(np.array_equal(fused.q[s:], src.q[s:]) and np.array_equal(fused.v[s:], src.v[s:]))

    req = EditRequest(TARGET, alpha=1.0, mode=ControlMode(Mode.CONSISTEDIT_STAR), external_mask=EditMask.full(64))
    res = run_edit(toy_model(2), c, req, on_fuse=check)
    assert len(seen) == 28 * 4 and all(seen)
    # target text rows still reach the vision tokens, so the output may differ
    diag = run_edit(toy_model(2), c, replace(req, text_from_source=True))
    assert np.array_equal(diag.z_0, c.z_0)
    for t, z in c.trace.latents.items():
        assert np.array_equal(diag.trace.latents[t], z)
    assert not np.array_equal(res.z_0, c.z_0)


def test_mask_precedence():
    c = source_cache(0)
    m = toy_model(0)
    ext = EditMask.from_binary(np.arange(64) % 3 == 0)
    res = run_edit(m, c, EditRequest(TARGET, edit_words=("car",), external_mask=ext))
    assert np.array_equal(res.mask.binary, ext.binary)
    res = run_edit(m, c, EditRequest(TARGET, edit_words=("car",)))
    assert np.array_equal(res.mask.binary, c.word_mask(["car"]).binary)
    res = run_edit(m, c, EditRequest(TARGET))
    assert np.array_equal(res.mask.binary, c.mask.binary)


def test_default_mask_is_full_without_words():
    c = run_source(toy_model(0), noise(0), PROMPT, Schedule(3))
    res = run_edit(toy_model(0), c, EditRequest(TARGET))
    assert res.mask.count == 64


def test_incomplete_cache_rejected():
    c = run_source(toy_model(0), noise(0), PROMPT, Schedule(3))
    broken = replace(c, entries={k: v for k, v in c.entries.items() if k[0] != 2})
    with pytest.raises(IncompleteCacheError):
        run_edit(toy_model(0), broken, EditRequest(TARGET))


def test_uncached_layers_rejected():
    c = run_source(toy_model(0), noise(0), PROMPT, Schedule(3), layers=[2, 3])
    with pytest.raises(IncompleteCacheError):
        run_edit(toy_model(0), c, EditRequest(TARGET, mode=ControlMode(Mode.CONSISTEDIT)))
    ok = run_edit(toy_model(0), c, EditRequest(TARGET, mode=ControlMode(Mode.CONSISTEDIT, frozenset({2, 3}))))
    assert ok.nfe == 3


def test_alpha_validated():
    with pytest.raises(ValueError):
        EditRequest(TARGET, alpha=1.2)


def test_guidance_mismatch_rejected():
    c = run_source(toy_model(0), noise(0), PROMPT, Schedule(3))
    with pytest.raises(ValueError):
        run_edit(toy_model(0), c, EditRequest(TARGET, guidance=GuidanceConfig(True, 2.0)))


def test_cfg_branch_symmetry():
    g = GuidanceConfig(True, 3.0)
    c = run_source(toy_model(0), noise(0), PROMPT, Schedule(4), g, edit_words=("red",))
    assert {k[2] for k in c.entries} == {"cond", "uncond"}
    branches = []
    res = run_edit(toy_model(0), c, EditRequest(TARGET), on_fuse=lambda l, ctx, t, f: branches.append(ctx.branch))
    assert branches.count("cond") == branches.count("uncond") == 4 * 4
    assert res.nfe == c.nfe == 8
    same = run_edit(toy_model(0), c, EditRequest(PROMPT, mode=ControlMode(Mode.CONSISTEDIT_STAR)))
    assert np.array_equal(same.z_0, c.z_0)


def test_cache_immutable_under_concurrent_edits():
    c = run_source(toy_model(3), noise(3), PROMPT, Schedule(5), edit_words=("red",))
    before = c.digest()
    reqs = [EditRequest(TARGET, alpha=a, mode=ControlMode(m)) for a in (0.3, 1.0) for m in Mode]
    with ThreadPoolExecutor(4) as pool:
        outs = list(pool.map(lambda r: run_edit(toy_model(3), c, r), reqs))
    assert c.digest() == before
    serial = run_edit(toy_model(3), c, reqs[3])
    assert np.array_equal(serial.z_0, outs[3].z_0)


def test_cache_entries_read_only():
    c = run_source(toy_model(0), noise(0), PROMPT, Schedule(2))
    with pytest.raises(ValueError):
        next(iter(c.entries.values())).q[0, 0] = 1


def test_cache_save_load(tmp_path):
    c = run_source(toy_model(0), noise(0), PROMPT, Schedule(4), edit_words=("red",))
    c.save(tmp_path)
    back = SourceCache.load(tmp_path)
    assert back.digest() == c.digest()
    assert np.array_equal(back.mask.binary, c.mask.binary) and back.nfe == c.nfe
    req = EditRequest(TARGET, edit_words=("red",), alpha=0.5)
    assert np.array_equal(run_edit(toy_model(0), back, req).z_0, run_edit(toy_model(0), c, req).z_0)


# -- multi-round -----------------------------------------------------------------------


def test_single_round_is_run_edit():
    req = EditRequest(TARGET, edit_words=("red",), alpha=1.0)
    _, results = multi_round(toy_model(0), noise(0), PROMPT, [req])
    assert np.array_equal(results[0].z_0, run_edit(toy_model(0), source_cache(0), req).z_0)


@pytest.mark.parametrize("mode", [Mode.CONSISTEDIT, Mode.STRUCTURE])
def test_identity_rounds_return_source(mode):
    reqs = [EditRequest(PROMPT, alpha=0.3, mode=ControlMode(mode))] * 3
    first, results = multi_round(toy_model(1), noise(1), PROMPT, reqs, Schedule(6))
    assert all(np.array_equal(r.z_0, first.z_0) for r in results)


def test_three_round_chain_nfe():
    reqs = [
        EditRequest("a blue car on the road", edit_words=("red",), alpha=0.3),
        EditRequest("a blue bus on the road", edit_words=("car",), alpha=1.0),
        EditRequest("a green bus on the road", edit_words=("blue",), alpha=0.3),
    ]
    first, results = multi_round(toy_model(2), noise(2), PROMPT, reqs)
    assert first.nfe + sum(r.nfe for r in results) == 4 * 28
    assert results[1].mask.words == (2,)


def test_multi_round_needs_requests():
    with pytest.raises(ValueError):
        multi_round(toy_model(0), noise(0), PROMPT, [])


# -- real inputs --------------------------------------------------------------------------


def _image(seed):
    return np.random.default_rng(seed).random(CFG.image_shape).astype(F32)


def test_edit_real_zero_velocity_reconstructs():
    m = ToyMMDiT(CFG, zero_weights(CFG, 0), 2)
    img = _image(0)
    out = edit_real(m, img, PROMPT, EditRequest(TARGET), Schedule(6))
    assert np.abs(out.image - img).max() <= 1e-4


@pytest.mark.parametrize("seed", range(3))
def test_edit_real_reconstruction(seed):
    m = toy_model(seed)
    img = _image(seed)
    out = edit_real(m, img, PROMPT, EditRequest(PROMPT, mode=ControlMode(Mode.CONSISTEDIT)))
    full = np.ones(img.shape[:2], bool)
    assert metrics.psnr_masked(img, out.image, full) >= 60.0
    assert out.nfe == 28 * 2


def test_edit_real_divergence():
    m = ToyMMDiT.from_seed(CFG, 0)
    m.weights.layers[2].ff_w2[0, 0] = np.inf
    with pytest.raises(DivergenceError) as exc:
        edit_real(m, _image(0), PROMPT, EditRequest(TARGET), Schedule(5))
    assert exc.value.step == 1
