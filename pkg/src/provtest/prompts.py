"""Prompt space management and prompt selection.

Besides plain uniform sampling this holds the rejection sampler that, for
each output slot, draws ``k`` candidate prompts and keeps the one that most
lowers the running pairwise agreement among the reference models.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigurationError
from .modelio import ModelHandle

_WORDS = (
    "the old house at the end of our street was quiet when morning light came through "
    "a narrow window and every visitor who walked past would stop to look because "
    "nobody remembered who built it or why the garden behind its wall kept growing "
    "strange flowers in winter while my grandmother told stories about ships river "
    "market teacher music bridge letter city forest engine dinner island mountain "
    "doctor storm library painting village train coffee winter summer yesterday "
    "tomorrow suddenly carefully almost never always often quickly slowly bright "
    "dark green silver heavy empty famous secret simple ancient modern small large "
    "began found wanted believed opened carried learned noticed decided promised"
).split()


@dataclass
class PromptCorpus:
    """Ordered list of prompts forming the sampling space."""

    prompts: list[str]
    source_path: str | None = None

    def __post_init__(self):
        self.prompts = [p for p in self.prompts if p.strip()]
        if not self.prompts:
            raise ConfigurationError("prompt corpus is empty")

    def __len__(self):
        return len(self.prompts)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "PromptCorpus":
        """Read newline-delimited UTF-8 prompts; blank lines are skipped."""
        try:
            with open(path, encoding="utf-8") as fh:
                lines = [line.rstrip("\r\n") for line in fh]
        except OSError as exc:
            raise ConfigurationError(f"cannot read corpus {path}: {exc}") from exc
        return cls([line for line in lines if line.strip()], source_path=str(path))

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for p in self.prompts:
                fh.write(p + "\n")


def synthetic_corpus(size: int, rng: np.random.Generator) -> PromptCorpus:
    """Incomplete sentences of five to twenty words built from a fixed word list."""
    prompts = []
    seen = set()
    while len(prompts) < size:
        n = int(rng.integers(5, 21))
        text = " ".join(_WORDS[i] for i in rng.integers(0, len(_WORDS), n))
        text = text[0].upper() + text[1:]
        if text in seen:
            continue
        seen.add(text)
        prompts.append(text)
    return PromptCorpus(prompts)


def sample_uniform(corpus: PromptCorpus, count: int, rng: np.random.Generator) -> list[str]:
    """``count`` prompts drawn i.i.d. uniformly with replacement."""
    if count < 1:
        raise ConfigurationError(f"sample size must be >= 1, got {count}")
    idx = rng.integers(0, len(corpus), count)
    return [corpus.prompts[i] for i in idx]


class UniformPromptSource:
    """Endless i.i.d. prompt stream, optionally capped at ``limit`` draws."""

    def __init__(self, corpus: PromptCorpus, rng: np.random.Generator, limit: int | None = None):
        self.corpus = corpus
        self.rng = rng
        self.limit = limit
        self.drawn = 0

    def __iter__(self):
        return self

    def __next__(self) -> str:
        if self.limit is not None and self.drawn >= self.limit:
            raise StopIteration
        self.drawn += 1
        return self.corpus.prompts[int(self.rng.integers(0, len(self.corpus)))]


@dataclass
class AgreementMatrix:
    """Pairwise same-token counts over the prompts selected so far."""

    same: np.ndarray
    i: int = 0

    @classmethod
    def empty(cls, n_models: int) -> "AgreementMatrix":
        return cls(np.zeros((n_models, n_models), dtype=np.int64), 0)

    def update(self, equal: np.ndarray) -> None:
        self.same += equal.astype(np.int64)
        self.i += 1

    def ratios(self) -> np.ndarray:
        return self.same / max(self.i, 1)

    def mean_offdiagonal(self) -> float:
        n = self.same.shape[0]
        if n < 2 or self.i == 0:
            return 0.0
        off = self.same.sum() - np.trace(self.same)
        return float(off) / (n * (n - 1) * self.i)

    def check(self) -> None:
        assert (np.diag(self.same) == self.i).all()
        assert (self.same >= 0).all() and (self.same <= self.i).all()
        assert (self.same == self.same.T).all()


def _equality(tokens: Sequence[str]) -> np.ndarray:
    _, codes = np.unique(np.asarray(tokens, dtype=object).astype(str), return_inverse=True)
    return codes[:, None] == codes[None, :]


def selection_scores(same: np.ndarray, i: int, equal: np.ndarray, tau: float) -> np.ndarray:
    """Scores of candidate prompts for slot ``i`` (1-based).

    ``equal`` has shape ``(k, H, H)``: whether models l1 and l2 agree on
    candidate j. A pair contributes ``exp(tau * (old - new))`` when its
    agreement ratio would drop, with ``old = same / (i - 1)`` (0 on the first
    slot) and ``new = (same + equal) / i``.
    """
    eq = equal.astype(np.int64)
    if i == 1:
        return np.zeros(eq.shape[0])
    old = same / (i - 1)
    new = (same[None] + eq) / i
    # integer form of old > new avoids float ties
    drop = same[None] * i > (same[None] + eq) * (i - 1)
    weights = np.exp(tau * np.where(drop, old[None] - new, 0.0))
    return (weights * drop).sum(axis=(1, 2))


@dataclass
class Selection:
    prompts: list[str]
    matrix: AgreementMatrix
    outputs: dict[str, list[str]] = field(default_factory=dict)
    candidate_draws: int = 0
    queries: dict[str, int] = field(default_factory=dict)
    agreement_trace: list[float] = field(default_factory=list)


def rejection_sample(
    corpus: PromptCorpus,
    count: int,
    k: int,
    tau: float,
    models: Sequence[ModelHandle],
    rng: np.random.Generator,
) -> Selection:
    """Select ``count`` prompts, each the best-scoring of ``k`` fresh candidates.

    The agreement matrix is updated with the chosen prompt's outputs after each
    slot, and the reference models' outputs on the chosen prompts are kept in
    ``Selection.outputs`` so a tester can reuse them. Ties go to the candidate
    drawn first. With ``k = 1`` every draw is kept, which is uniform sampling.
    """
    if k < 1:
        raise ConfigurationError(f"k must be >= 1, got {k}")
    if count < 1:
        raise ConfigurationError(f"sample size must be >= 1, got {count}")
    if not models:
        raise ConfigurationError("rejection sampling needs at least one model")
    ids = [m.id for m in models]
    if len(set(ids)) != len(ids):
        raise ConfigurationError("duplicate model ids")
    n = len(models)
    matrix = AgreementMatrix.empty(n)
    sel = Selection([], matrix, {m: [] for m in ids}, 0, {m: 0 for m in ids})
    for i in range(1, count + 1):
        idx = rng.integers(0, len(corpus), k)
        cands = [corpus.prompts[j] for j in idx]
        sel.candidate_draws += k
        tokens = [m.first_tokens(cands) for m in models]  # (H, k)
        for m in ids:
            sel.queries[m] += k
        equal = np.stack([_equality([tokens[h][j] for h in range(n)]) for j in range(k)])
        if k == 1:
            best = 0
        else:
            scores = selection_scores(matrix.same, i, equal, tau)
            best = int(np.argmax(scores))  # first maximum on ties
        sel.prompts.append(cands[best])
        for h, m in enumerate(ids):
            sel.outputs[m].append(tokens[h][best])
        matrix.update(equal[best])
        sel.agreement_trace.append(matrix.mean_offdiagonal())
    return sel


def mean_pairwise_agreement(models: Sequence[ModelHandle], prompts: Sequence[str]) -> float:
    """Average agreement ratio over unordered model pairs."""
    tokens = [np.asarray(m.first_tokens(prompts), dtype=object) for m in models]
    n = len(tokens)
    if n < 2:
        return math.nan
    total = 0.0
    for a in range(n):
        for b in range(a + 1, n):
            total += float(np.mean(tokens[a] == tokens[b]))
    return total / (n * (n - 1) / 2)
