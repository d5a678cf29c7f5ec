"""Synthetic model zoo and evaluation harness.

A zoo holds base ("pre-trained") models spread over domain groups, derived
children that copy a base except on a ``rho`` fraction of prompts, and
independent models that share a group's token profile but no parent. The
harness runs a tester over every child and scores the verdicts against the
ground truth.
"""

from __future__ import annotations

import json
import multiprocessing
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, ProvenanceError
from .modelio import ModelHandle, SyntheticBackend, SyntheticModelSpec
from .prompts import (
    PromptCorpus,
    UniformPromptSource,
    mean_pairwise_agreement,
    rejection_sample,
    sample_uniform,
    synthetic_corpus,
)
from .seeding import substream
from .tester import (
    SimilarityStat,
    decide_identify,
    identify_parent,
    identify_parent_bai,
    similarity_stats,
)

RHO_LEVELS = tuple(round(0.05 * i, 2) for i in range(1, 13))  # 0.05 .. 0.60


@dataclass
class BenchmarkSpec:
    n_base: int = 20
    n_groups: int = 10
    vocab_size: int = 1000
    zipf_exponent: float = 1.1
    children: list[tuple[int, float]] = field(default_factory=list)
    n_independent: int = 30
    master_seed: int = 0
    corpus_size: int = 20000

    def __post_init__(self):
        self.children = [(int(p), float(r)) for p, r in self.children]
        if self.n_base < 1 or self.n_groups < 1:
            raise ConfigurationError("n_base and n_groups must be positive")
        if self.n_independent < 0 or self.corpus_size < 1:
            raise ConfigurationError("n_independent must be >= 0 and corpus_size >= 1")
        for p, r in self.children:
            if not 0 <= p < self.n_base:
                raise ConfigurationError(f"child parent index {p} out of range")
            if not 0.0 <= r <= 1.0:
                raise ConfigurationError(f"perturbation rate {r} outside [0, 1]")

    @classmethod
    def default(cls, master_seed: int = 0, n_derived: int = 100, **overrides) -> "BenchmarkSpec":
        """The shipped desk-scale benchmark: rho stratified over 0.05..0.60."""
        n_base = overrides.pop("n_base", 20)
        children = [(j % n_base, RHO_LEVELS[j % len(RHO_LEVELS)]) for j in range(n_derived)]
        return cls(n_base=n_base, children=children, master_seed=master_seed, **overrides)

    @classmethod
    def from_dict(cls, data: dict) -> "BenchmarkSpec":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown benchmark spec keys: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigurationError(f"malformed benchmark spec: {exc}") from exc

    @classmethod
    def load(cls, path: str | os.PathLike) -> "BenchmarkSpec":
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read benchmark spec {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigurationError("benchmark spec must be a JSON object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["children"] = [list(c) for c in self.children]
        return d


@dataclass(frozen=True)
class ChildInfo:
    model_id: str
    parent_id: str | None
    rho: float | None


@dataclass
class Zoo:
    spec: BenchmarkSpec
    models: dict[str, SyntheticModelSpec]
    base_ids: list[str]
    children: list[ChildInfo]
    corpus: PromptCorpus

    def backend(self) -> SyntheticBackend:
        return SyntheticBackend(self.models)

    def handles(self, ids: Sequence[str]) -> list[ModelHandle]:
        backend = self.backend()
        return [ModelHandle(i, backend) for i in ids]

    def ground_truth(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "base_ids": list(self.base_ids),
            "models": {k: v.to_dict() for k, v in self.models.items()},
            "children": [asdict(c) for c in self.children],
        }

    @classmethod
    def from_ground_truth(cls, data: dict) -> "Zoo":
        spec = BenchmarkSpec.from_dict(data["spec"])
        fresh = generate_zoo(spec)
        if fresh.ground_truth() != json.loads(json.dumps(data)):
            raise ConfigurationError("ground-truth file does not match its embedded spec")
        return fresh


def generate_zoo(spec: BenchmarkSpec) -> Zoo:
    """Deterministic zoo from ``spec.master_seed``."""
    rng = substream(spec.master_seed, "zoo-generation")
    seeds = [int(s) for s in rng.integers(0, 2**63, spec.n_base + len(spec.children) + spec.n_independent)]
    common = dict(vocab_size=spec.vocab_size, zipf_exponent=spec.zipf_exponent)
    models: dict[str, SyntheticModelSpec] = {}
    base_ids = []
    for i in range(spec.n_base):
        mid = f"base-{i:02d}"
        models[mid] = SyntheticModelSpec(seed=seeds[i], domain_group=i % spec.n_groups, **common)
        base_ids.append(mid)
    children = []
    offset = spec.n_base
    for j, (p, rho) in enumerate(spec.children):
        parent = models[base_ids[p]]
        mid = f"child-{j:03d}"
        models[mid] = SyntheticModelSpec(
            seed=seeds[offset + j],
            domain_group=parent.domain_group,
            parent_seed=parent.seed,
            perturbation_rate=rho,
            **common,
        )
        children.append(ChildInfo(mid, base_ids[p], rho))
    offset += len(spec.children)
    for j in range(spec.n_independent):
        mid = f"indep-{j:03d}"
        models[mid] = SyntheticModelSpec(
            seed=seeds[offset + j], domain_group=j % spec.n_groups, **common
        )
        children.append(ChildInfo(mid, None, None))
    corpus = synthetic_corpus(spec.corpus_size, substream(spec.master_seed, "corpus"))
    return Zoo(spec, models, base_ids, children, corpus)


@dataclass
class TesterConfig:
    n_prompts: int = 1000
    alpha: float = 0.05
    k: int = 1
    tau: float = 10.0
    bai: bool = False
    budget: int | None = None
    seed: int = 0

    __test__ = False  # not a pytest class despite the name

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ConfigurationError("alpha must lie in (0, 1)")
        if self.k < 1:
            raise ConfigurationError("k must be >= 1")
        if self.n_prompts < 1:
            raise ConfigurationError("number of prompts must be >= 1")
        if self.budget is not None and self.budget < 1:
            raise ConfigurationError("budget must be >= 1")

    @property
    def sampling(self) -> str:
        return "rejection" if self.k > 1 else "uniform"

    @property
    def variant(self) -> str:
        return "bai" if self.bai else "identify"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sampling"] = self.sampling
        d["variant"] = self.variant
        if self.bai and self.budget is None:
            d["budget"] = self.n_prompts
        return d


@dataclass
class ChildResult:
    model_id: str
    true_parent: str | None
    rho: float | None
    positive: bool
    predicted_parent: str | None
    correct: bool
    parent_top1: bool
    online_queries: int
    offline_queries: int
    error: str | None = None


@dataclass
class EvalReport:
    results: list[ChildResult]
    config: dict
    mean_reference_agreement: float | None = None
    selection_queries: int = 0

    @property
    def n_derived(self) -> int:
        return sum(r.true_parent is not None for r in self.results)

    @property
    def positives(self) -> int:
        return sum(r.positive for r in self.results)

    @property
    def correct(self) -> int:
        return sum(r.correct for r in self.results)

    @property
    def precision(self) -> float | None:
        return self.correct / self.positives if self.positives else None

    @property
    def recall(self) -> float | None:
        return self.correct / self.n_derived if self.n_derived else None

    @property
    def parent_top1_rate(self) -> float | None:
        if not self.n_derived:
            return None
        return sum(r.parent_top1 for r in self.results if r.true_parent) / self.n_derived

    @property
    def mean_online_queries(self) -> float:
        return float(np.mean([r.online_queries for r in self.results])) if self.results else 0.0

    @property
    def mean_offline_queries(self) -> float:
        return float(np.mean([r.offline_queries for r in self.results])) if self.results else 0.0

    def to_dict(self) -> dict:
        na = lambda v: "n/a" if v is None else v  # noqa: E731
        return {
            "config": self.config,
            "children": len(self.results),
            "derived": self.n_derived,
            "positives": self.positives,
            "correct_positives": self.correct,
            "incorrect_positives": self.positives - self.correct,
            "precision": na(self.precision),
            "recall": na(self.recall),
            "parent_top1_rate": na(self.parent_top1_rate),
            "mean_online_queries": self.mean_online_queries,
            "mean_offline_queries": self.mean_offline_queries,
            "mean_reference_agreement": na(self.mean_reference_agreement),
            "selection_offline_queries": self.selection_queries,
            "errors": sum(r.error is not None for r in self.results),
            "verdicts": [asdict(r) for r in self.results],
        }


def _top1(stats: Sequence[SimilarityStat], parent: str | None) -> bool:
    if parent is None:
        return False
    by_id = {s.model_id: s.mu for s in stats}
    best = by_id[parent]
    return all(mu < best for mid, mu in by_id.items() if mid != parent)


def _eval_children(task) -> list[ChildResult]:
    models, base_ids, children, prompts, ref_outputs, cfg, corpus = task
    backend = SyntheticBackend(models)
    bases = [ModelHandle(b, backend) for b in base_ids]
    out = []
    for child in children:
        g = ModelHandle(child.model_id, backend)
        try:
            if cfg.bai:
                source = UniformPromptSource(corpus, substream(cfg.seed, "bai-rounds", child.model_id))
                v = identify_parent_bai(
                    g, bases, bases, source, cfg.alpha, cfg.budget or cfg.n_prompts
                )
            else:
                v = identify_parent(
                    g, bases, bases, prompts, cfg.alpha,
                    reference_outputs=ref_outputs, sampling_mode=cfg.sampling,
                )
        except ProvenanceError as exc:
            out.append(ChildResult(child.model_id, child.parent_id, child.rho, False, None,
                                   False, False, 0, 0, error=str(exc)))
            continue
        correct = v.positive and v.parent_id == child.parent_id and child.parent_id is not None
        out.append(
            ChildResult(
                child.model_id,
                child.parent_id,
                child.rho,
                v.positive,
                v.parent_id,
                correct,
                _top1(v.stats, child.parent_id),
                sum(v.queries_used["online"].values()),
                sum(v.queries_used["offline"].values()),
            )
        )
    return out


def _shared_prompts(zoo: Zoo, cfg: TesterConfig):
    """Prompts and base outputs shared by every child's test."""
    bases = zoo.handles(zoo.base_ids)
    rng = substream(cfg.seed, "prompt-sampling")
    if cfg.k > 1:
        sel = rejection_sample(zoo.corpus, cfg.n_prompts, cfg.k, cfg.tau, bases, rng)
        return sel.prompts, sel.outputs, sum(sel.queries.values())
    prompts = sample_uniform(zoo.corpus, cfg.n_prompts, rng)
    return prompts, {b.id: b.first_tokens(prompts) for b in bases}, 0


def _run_tasks(zoo, children, prompts, ref_outputs, cfg, workers) -> list[ChildResult]:
    workers = max(1, int(workers))
    chunks = [list(children[i::workers]) for i in range(workers)]
    tasks = [(zoo.models, zoo.base_ids, c, prompts, ref_outputs, cfg, zoo.corpus) for c in chunks if c]
    if workers == 1 or len(tasks) == 1:
        results = [r for t in tasks for r in _eval_children(t)]
    else:
        ctx = multiprocessing.get_context("fork")
        with ProcessPoolExecutor(len(tasks), mp_context=ctx) as pool:
            results = [r for part in pool.map(_eval_children, tasks) for r in part]
    order = {c.model_id: i for i, c in enumerate(zoo.children)}
    return sorted(results, key=lambda r: order[r.model_id])


def evaluate(zoo: Zoo, cfg: TesterConfig, workers: int = 1) -> EvalReport:
    """Run the tester on every child with all base models as candidates and controls."""
    if cfg.bai:
        prompts, ref_outputs, agreement, sel_queries = [], {}, None, 0
    else:
        prompts, ref_outputs, sel_queries = _shared_prompts(zoo, cfg)
        agreement = mean_pairwise_agreement(zoo.handles(zoo.base_ids), prompts)
    results = _run_tasks(zoo, zoo.children, prompts, ref_outputs, cfg, workers)
    config = {"tester": cfg.to_dict(), "control_subset_size": len(zoo.base_ids),
              "zoo_seed": zoo.spec.master_seed}
    return EvalReport(results, config, agreement, sel_queries)


@dataclass
class AblationRow:
    size: int
    trials: int
    mean_precision: float | None
    mean_recall: float | None
    precision_undefined_trials: int
    recall_std: float

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("mean_precision", "mean_recall"):
            if d[k] is None:
                d[k] = "n/a"
        return d


def ablate_controls(
    zoo: Zoo, subset_sizes: Sequence[int], trials: int, cfg: TesterConfig
) -> list[AblationRow]:
    """Precision/recall when the control set is a random subset of the bases.

    For each child the most similar base (over all bases) is the suspected
    parent; it is tested against the sampled controls other than itself. With
    the full control set this reproduces :func:`evaluate` exactly.
    """
    n_base = len(zoo.base_ids)
    for s in subset_sizes:
        if not 1 <= s <= n_base:
            raise ConfigurationError(f"subset size {s} outside [1, {n_base}]")
    if trials < 1:
        raise ConfigurationError("trials must be >= 1")
    if cfg.bai:
        raise ConfigurationError("control ablation runs the fixed-budget tester only")
    prompts, ref_outputs, _ = _shared_prompts(zoo, cfg)
    backend = zoo.backend()
    per_child = []
    for child in zoo.children:
        g_tokens = ModelHandle(child.model_id, backend).first_tokens(prompts)
        stats = similarity_stats(g_tokens, zoo.handles(zoo.base_ids), prompts, ref_outputs)
        best = max(range(n_base), key=lambda i: stats[i].hits)
        per_child.append((child, stats, best))
    n_derived = sum(c.parent_id is not None for c in zoo.children)
    rows = []
    for size in subset_sizes:
        precisions, recalls = [], []
        undefined = 0
        for trial in range(trials):
            rng = substream(cfg.seed, "ablation", size, trial)
            subset = set(int(i) for i in rng.choice(n_base, size, replace=False))
            positives = correct = 0
            for child, stats, best in per_child:
                controls = [stats[i] for i in sorted(subset) if i != best]
                if not controls:
                    continue
                ok, parent, _, _ = decide_identify([stats[best]], controls, cfg.alpha)
                if ok:
                    positives += 1
                    correct += parent == child.parent_id
            if positives:
                precisions.append(correct / positives)
            else:
                undefined += 1
            if n_derived:
                recalls.append(correct / n_derived)
        rows.append(
            AblationRow(
                size,
                trials,
                float(np.mean(precisions)) if precisions else None,
                float(np.mean(recalls)) if recalls else None,
                undefined,
                float(np.std(recalls)) if recalls else 0.0,
            )
        )
    return rows
