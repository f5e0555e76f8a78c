from functools import lru_cache
from pathlib import Path

import pytest

from consistedit import tensor as tc
from consistedit.mmdit import ModelConfig, ToyMMDiT
from consistedit.session import run_source

FIXTURES = Path(__file__).parent / "fixtures"
PROMPT = "a red car on the road"


@lru_cache(maxsize=None)
def toy_model(seed: int, cfg: ModelConfig = ModelConfig()) -> ToyMMDiT:
    return ToyMMDiT.from_seed(cfg, seed)


def noise(seed: int, cfg: ModelConfig = ModelConfig()):
    return tc.randn(tc.Prng(seed + 1), (cfg.n_vis, cfg.dim))


@lru_cache(maxsize=None)
def source_cache(seed: int, prompt: str = PROMPT, words: tuple = ("red",)):
    """Shared read-only source pass (default config, T=28, no guidance)."""
    return run_source(toy_model(seed), noise(seed), prompt, edit_words=words)


@pytest.fixture(scope="session")
def fixtures_dir() -> Path:
    return FIXTURES


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """criterion(n, title, ok, detail) records one PASS/FAIL line and asserts."""

    def record(n: int, title: str, ok: bool, detail: str = "") -> None:
        line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
