"""Editing masks extracted from source-pass text/vision attention."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor as tc
from .tensor import F32

DEFAULT_THRESHOLD = 0.1
DIRECTIONS = ("query", "key", "symmetric")


class MaskError(ValueError):
    pass


@dataclass(frozen=True)
class EditMask:
    scores: np.ndarray  # float32, max-normalised to [0, 1]
    binary: np.ndarray  # bool
    threshold: float
    words: tuple[int, ...] = ()

    def __post_init__(self):
        if self.scores.shape != self.binary.shape or self.scores.ndim != 1:
            raise MaskError(f"scores {self.scores.shape} vs binary {self.binary.shape}")

    def __len__(self) -> int:
        return self.binary.shape[0]

    @property
    def count(self) -> int:
        return int(self.binary.sum())

    @classmethod
    def from_binary(cls, binary, threshold: float = 0.5) -> "EditMask":
        b = np.asarray(binary).astype(bool).reshape(-1)
        return cls(b.astype(F32), b, threshold)

    @classmethod
    def full(cls, n_vis: int) -> "EditMask":
        return cls.from_binary(np.ones(n_vis, bool))

    @classmethod
    def empty(cls, n_vis: int) -> "EditMask":
        return cls.from_binary(np.zeros(n_vis, bool))


def threshold_scores(scores: np.ndarray, threshold: float = DEFAULT_THRESHOLD, words=()) -> EditMask:
    scores = tc.as_tensor(scores).reshape(-1)
    return EditMask(scores, scores >= F32(threshold), float(threshold), tuple(words))


@dataclass
class AttentionAccumulator:
    """Running text<->vision attention sums over heads, layers and steps.

    Keeps one column per text position so any word selection can be
    finalised after the pass. ``query_side[j, i]`` sums how much vision
    token j attends to text token i; ``key_side[j, i]`` the reverse.
    """

    n_txt: int
    n_vis: int
    query_side: np.ndarray = field(init=False)
    key_side: np.ndarray = field(init=False)
    count: int = 0

    def __post_init__(self):
        self.query_side = np.zeros((self.n_vis, self.n_txt), F32)
        self.key_side = np.zeros((self.n_vis, self.n_txt), F32)

    def add(self, probs: np.ndarray) -> None:
        """Add one evaluation's post-softmax weights (``[heads x n x n]`` or ``[n x n]``)."""
        p = probs if probs.ndim == 3 else probs[None]
        n = self.n_txt + self.n_vis
        if p.shape[1:] != (n, n):
            raise tc.ShapeError(f"attention weights {p.shape} do not match {n}x{n}")
        s = self.n_txt
        for h in range(p.shape[0]):
            self.query_side += p[h, s:, :s]
            self.key_side += p[h, :s, s:].T
        self.count += 1

    def copy(self) -> "AttentionAccumulator":
        other = AttentionAccumulator(self.n_txt, self.n_vis)
        other.query_side = self.query_side.copy()
        other.key_side = self.key_side.copy()
        other.count = self.count
        return other

    def scores(self, words: Sequence[int], direction: str = "query") -> np.ndarray:
        """Mean raw score per vision token for the given text positions."""
        if self.count <= 0:
            raise MaskError("no attention accumulated")
        words = _check_words(words, self.n_txt)
        if direction not in DIRECTIONS:
            raise MaskError(f"direction must be one of {DIRECTIONS}")

        def pick(m):
            acc = np.zeros(self.n_vis, F32)
            for i in words:
                acc += m[:, i]
            return acc

        if direction == "query":
            total = pick(self.query_side)
        elif direction == "key":
            total = pick(self.key_side)
        else:
            total = (pick(self.query_side) + pick(self.key_side)) * F32(0.5)
        return total / F32(self.count)

    def finalize(self, words: Sequence[int], threshold: float = DEFAULT_THRESHOLD, direction: str = "query") -> EditMask:
        return normalize_and_threshold(self.scores(words, direction), threshold, words)


def _check_words(words: Iterable[int], n_txt: int) -> tuple[int, ...]:
    words = tuple(int(w) for w in words)
    if not words:
        raise MaskError("empty word set")
    if any(not 0 <= w < n_txt for w in words):
        raise MaskError(f"word indices {words} outside [0, {n_txt})")
    return words


def accumulate(acc: AttentionAccumulator, attn_weights: np.ndarray, word_idx: Iterable[int]) -> None:
    """Add one map; ``word_idx`` is validated here, selected at finalize."""
    _check_words(word_idx, acc.n_txt)
    acc.add(attn_weights)


def normalize_and_threshold(mean_scores: np.ndarray, threshold: float = DEFAULT_THRESHOLD, words=()) -> EditMask:
    scores = tc.as_tensor(mean_scores).reshape(-1)
    top = scores.max()
    if top > 0:
        scores = scores / top
    return threshold_scores(scores, threshold, words)


def finalize(acc: AttentionAccumulator, words, threshold: float = DEFAULT_THRESHOLD, direction: str = "query") -> EditMask:
    return acc.finalize(words, threshold, direction)


def union(masks: Sequence[EditMask]) -> EditMask:
    if not masks:
        raise MaskError("union of no masks")
    n = len(masks[0])
    if any(len(m) != n for m in masks):
        raise MaskError(f"mask lengths differ: {[len(m) for m in masks]}")
    binary = np.zeros(n, bool)
    scores = np.zeros(n, F32)
    words: list[int] = []
    for m in masks:
        binary |= m.binary
        scores = np.maximum(scores, m.scores)
        words.extend(w for w in m.words if w not in words)
    return EditMask(scores, binary, min(m.threshold for m in masks), tuple(words))


def word_indices(prompt: str, edit_words: Iterable[str]) -> tuple[int, ...]:
    """Positions of each edit word among the prompt's whitespace tokens (all occurrences)."""
    tokens = prompt.split()
    out: list[int] = []
    for w in edit_words:
        hits = [i for i, tok in enumerate(tokens) if tok == w]
        if not hits:
            raise MaskError(f"edit word {w!r} not in prompt {prompt!r}")
        out.extend(i for i in hits if i not in out)
    return tuple(out)


def save_mask(path: str | Path, mask: EditMask) -> None:
    tc.save_tensor(path, mask.binary.astype(F32))


def load_external(path: str | Path, n_vis: int) -> EditMask:
    t = tc.load_tensor(path).reshape(-1)
    if t.shape[0] != n_vis:
        raise MaskError(f"external mask has {t.shape[0]} entries, expected {n_vis}")
    scores = np.clip(t, 0, 1).astype(F32)
    return EditMask(scores, scores >= F32(0.5), 0.5)


def upsample_to_pixels(mask: EditMask | np.ndarray, grid: tuple[int, int], patch: int) -> np.ndarray:
    """Nearest-neighbour patch-grid -> pixel-grid boolean mask."""
    b = np.asarray(getattr(mask, "binary", mask)).astype(bool).reshape(grid)
    return np.repeat(np.repeat(b, patch, axis=0), patch, axis=1)
