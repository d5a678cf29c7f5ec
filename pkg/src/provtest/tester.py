"""Provenance deciders.

``test_pair``            - is g derived from the designated f?
``identify_parent``      - is g derived from some member of a candidate set?
``identify_parent_bai``  - the same question answered by successive elimination,
                           spending fewer queries on clearly dissimilar models.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np

from .errors import ConfigurationError, PromptSourceExhausted
from .modelio import ModelHandle
from .stats import PValueRecord, bai_confidence_radius, holm_bonferroni, z_test

log = logging.getLogger(__name__)

MIN_PROMPTS = 30


@dataclass(frozen=True)
class SimilarityStat:
    model_id: str
    hits: int
    total: int

    def __post_init__(self):
        if not 0 <= self.hits <= self.total:
            raise ValueError(f"hits={self.hits} outside [0, {self.total}]")

    @property
    def mu(self) -> float:
        return self.hits / self.total if self.total else 0.0

    def to_dict(self) -> dict:
        return {"model_id": self.model_id, "hits": self.hits, "total": self.total, "mu": self.mu}


@dataclass
class Verdict:
    positive: bool
    parent_id: str | None
    family_alpha: float
    tester_kind: str
    sampling_mode: str = "uniform"
    pvalues: list[PValueRecord] = field(default_factory=list)
    stats: list[SimilarityStat] = field(default_factory=list)
    queries_used: dict[str, dict[str, int]] = field(default_factory=dict)
    reason: str = ""
    diagnostics: dict[str, int] = field(default_factory=dict)

    def similarity(self, model_id: str) -> float:
        for s in self.stats:
            if s.model_id == model_id:
                return s.mu
        raise KeyError(model_id)

    def to_report(self) -> dict:
        return {
            "verdict": "positive" if self.positive else "negative",
            "positive": self.positive,
            "parent_id": self.parent_id,
            "pvalues": [r.to_dict() for r in self.pvalues],
            "similarities": [s.to_dict() for s in self.stats],
            "queries": self.queries_used,
            "tester_kind": self.tester_kind,
            "sampling": self.sampling_mode,
            "alpha": self.family_alpha,
            "reason": self.reason,
            "diagnostics": dict(self.diagnostics),
        }


@dataclass
class ArmState:
    model_id: str
    hits: int = 0
    tots: int = 0
    active: bool = True

    @property
    def mu(self) -> float:
        return self.hits / self.tots if self.tots else 0.0


def _check_alpha(alpha: float) -> None:
    if not 0.0 < alpha < 1.0:
        raise ConfigurationError(f"alpha must lie in (0, 1), got {alpha}")


def _check_unique(ids: Iterable[str], what: str) -> None:
    seen = set()
    for i in ids:
        if i in seen:
            raise ConfigurationError(f"duplicate model id {i!r} in {what}")
        seen.add(i)


def _prepare_prompts(prompts: Sequence[str], n_prompts: int | None) -> list[str]:
    prompts = list(prompts)
    if n_prompts is not None:
        if len(prompts) < n_prompts:
            raise ConfigurationError(f"need {n_prompts} prompts, got {len(prompts)}")
        prompts = prompts[:n_prompts]
    if len(prompts) < MIN_PROMPTS:
        raise ConfigurationError(
            f"at least {MIN_PROMPTS} prompts are required for the z-test, got {len(prompts)}"
        )
    return prompts


def similarity_stats(
    g_tokens: Sequence[str],
    models: Sequence[ModelHandle],
    prompts: Sequence[str],
    reference_outputs: Mapping[str, Sequence[str]] | None = None,
) -> list[SimilarityStat]:
    """Agreement of every model with ``g`` on the shared prompts."""
    g = np.asarray(g_tokens, dtype=object)
    out = []
    for m in models:
        if reference_outputs is not None and m.id in reference_outputs:
            tokens = reference_outputs[m.id]
            if len(tokens) != len(prompts):
                raise ConfigurationError(f"stored outputs of {m.id!r} do not match the prompts")
        else:
            tokens = m.first_tokens(prompts)
        hits = int(np.count_nonzero(g == np.asarray(tokens, dtype=object)))
        out.append(SimilarityStat(m.id, hits, len(prompts)))
    return out


def decide_pair(
    f_stat: SimilarityStat, control_stats: Sequence[SimilarityStat], alpha: float
) -> tuple[bool, list[PValueRecord]]:
    """Holm over one z-test per control: is f's agreement above every control's?"""
    n = f_stat.total
    records = [PValueRecord(c.model_id, z_test(f_stat.mu, c.mu, n)) for c in control_stats]
    return holm_bonferroni(records, alpha)


def decide_identify(
    candidate_stats: Sequence[SimilarityStat],
    control_stats: Sequence[SimilarityStat],
    alpha: float,
) -> tuple[bool, str | None, list[PValueRecord], str]:
    """Candidate-set decision from precomputed similarities.

    Returns ``(positive, parent_id, pvalues, reason)``. The maximiser must be
    a candidate; a control that ties the best candidate wins the tie.
    """
    if not candidate_stats:
        raise ConfigurationError("candidate set is empty")
    if len(candidate_stats) + len(control_stats) < 2:
        raise ConfigurationError("need at least one model besides the best candidate to compare")
    best_c = max(candidate_stats, key=lambda s: s.hits)
    best_ctrl_hits = max((s.hits for s in control_stats), default=-1)
    if best_ctrl_hits >= best_c.hits:
        return False, None, [], "most similar model is a control"
    n = best_c.total
    records = [
        PValueRecord(s.model_id, z_test(best_c.mu, s.mu, n))
        for s in list(candidate_stats) + list(control_stats)
        if s is not best_c
    ]
    rejected, records = holm_bonferroni(records, alpha)
    if not rejected:
        return False, None, records, "not all comparisons significant"
    return True, best_c.model_id, records, "all comparisons significant"


def test_pair(
    f: ModelHandle,
    g: ModelHandle,
    controls: Sequence[ModelHandle],
    prompts: Sequence[str],
    alpha: float = 0.05,
    n_prompts: int | None = None,
    reference_outputs: Mapping[str, Sequence[str]] | None = None,
    sampling_mode: str = "uniform",
) -> Verdict:
    """Known-parent test: positive iff f agrees with g significantly more than every control."""
    _check_alpha(alpha)
    if not controls:
        raise ConfigurationError("at least one control model is required")
    _check_unique([f.id, g.id, *(c.id for c in controls)], "pair test")
    prompts = _prepare_prompts(prompts, n_prompts)
    T = len(prompts)
    g_tokens = g.first_tokens(prompts)
    stats = similarity_stats(g_tokens, [f, *controls], prompts, reference_outputs)
    positive, records = decide_pair(stats[0], stats[1:], alpha)
    return Verdict(
        positive=positive,
        parent_id=f.id if positive else None,
        family_alpha=alpha,
        tester_kind="pair",
        sampling_mode=sampling_mode,
        pvalues=records,
        stats=stats,
        queries_used={"online": {g.id: T}, "offline": {s.model_id: T for s in stats}},
        reason="all comparisons significant" if positive else "not all comparisons significant",
    )


def _dedup_roles(
    g: ModelHandle, candidates: Sequence[ModelHandle], controls: Sequence[ModelHandle]
) -> tuple[list[ModelHandle], list[ModelHandle]]:
    if not candidates:
        raise ConfigurationError("candidate set is empty")
    _check_unique([c.id for c in candidates], "candidates")
    _check_unique([c.id for c in controls], "controls")
    cand_ids = {c.id for c in candidates}
    if g.id in cand_ids or any(c.id == g.id for c in controls):
        raise ConfigurationError(f"tested model {g.id!r} cannot be a candidate or control")
    return list(candidates), [c for c in controls if c.id not in cand_ids]


def identify_parent(
    g: ModelHandle,
    candidates: Sequence[ModelHandle],
    controls: Sequence[ModelHandle],
    prompts: Sequence[str],
    alpha: float = 0.05,
    n_prompts: int | None = None,
    reference_outputs: Mapping[str, Sequence[str]] | None = None,
    sampling_mode: str = "uniform",
) -> Verdict:
    """Decide whether ``g`` derives from one of ``candidates``.

    Models listed both as candidate and control act as candidates only.
    """
    _check_alpha(alpha)
    cands, ctrls = _dedup_roles(g, candidates, controls)
    if len(cands) + len(ctrls) < 2:
        raise ConfigurationError("a single candidate with no controls has no baseline")
    prompts = _prepare_prompts(prompts, n_prompts)
    T = len(prompts)
    g_tokens = g.first_tokens(prompts)
    stats = similarity_stats(g_tokens, [*cands, *ctrls], prompts, reference_outputs)
    positive, parent, records, reason = decide_identify(
        stats[: len(cands)], stats[len(cands):], alpha
    )
    return Verdict(
        positive=positive,
        parent_id=parent,
        family_alpha=alpha,
        tester_kind="identify",
        sampling_mode=sampling_mode,
        pvalues=records,
        stats=stats,
        queries_used={"online": {g.id: T}, "offline": {s.model_id: T for s in stats}},
        reason=reason,
    )


def successive_elimination(
    pull: Callable[[int, Sequence[int]], Sequence[int]],
    n_arms: int,
    alpha: float,
    budget: int,
) -> tuple[list[ArmState], int, int]:
    """Successive elimination over Bernoulli arms.

    ``pull(t, active)`` returns one 0/1 reward per active arm index for round
    ``t`` (1-based). Elimination compares against the best *active* arm.
    Stops when one arm is left or the summed pulls exceed ``budget``.
    Returns ``(arms, rounds, frozen_leader_rounds)`` where the last counts
    rounds on which an eliminated arm had the highest empirical mean.
    """
    _check_alpha(alpha)
    if n_arms < 1:
        raise ConfigurationError("need at least one arm")
    arms = [ArmState(str(i)) for i in range(n_arms)]
    t = 0
    frozen_leader = 0
    total = 0
    while True:
        t += 1
        active = [i for i, a in enumerate(arms) if a.active]
        rewards = pull(t, active)
        for i, r in zip(active, rewards):
            arms[i].hits += int(r)
            arms[i].tots += 1
        total += len(active)
        mu_best = max(arms[i].mu for i in active)
        if max(a.mu for a in arms if a.tots) > mu_best:
            frozen_leader += 1
        u = bai_confidence_radius(t, alpha)
        for i in active:
            if mu_best - u > arms[i].mu + u:
                arms[i].active = False
        if sum(a.active for a in arms) == 1:
            break
        if total > budget:
            break
    return arms, t, frozen_leader


def identify_parent_bai(
    g: ModelHandle,
    candidates: Sequence[ModelHandle],
    controls: Sequence[ModelHandle],
    prompt_source: Iterable[str],
    alpha: float = 0.05,
    budget_per_model: int = 1000,
) -> Verdict:
    """Best-arm-identification tester.

    Each round draws one fresh prompt, queries g once and every active model
    once. Positive iff exactly one model survives and it is a candidate.
    The total offline budget is ``budget_per_model * (#candidates + #controls)``.
    """
    _check_alpha(alpha)
    if budget_per_model < 1:
        raise ConfigurationError("budget per model must be >= 1")
    cands, ctrls = _dedup_roles(g, candidates, controls)
    models = [*cands, *ctrls]
    it: Iterator[str] = iter(prompt_source)

    def pull(t: int, active: Sequence[int]) -> list[int]:
        try:
            x = next(it)
        except StopIteration:
            raise PromptSourceExhausted(f"prompt source ran dry at round {t}") from None
        (yg,) = g.first_tokens([x])
        return [int(models[i].first_tokens([x])[0] == yg) for i in active]

    arms, rounds, frozen = successive_elimination(
        pull, len(models), alpha, budget_per_model * len(models)
    )
    for arm, m in zip(arms, models):
        arm.model_id = m.id
    survivors = [a for a in arms if a.active]
    cand_ids = {c.id for c in cands}
    positive = len(survivors) == 1 and survivors[0].model_id in cand_ids
    if frozen:
        log.debug("BAI: eliminated arm led on %d rounds", frozen)
    if positive:
        reason = "single surviving arm is a candidate"
    elif len(survivors) == 1:
        reason = "single surviving arm is a control"
    else:
        reason = f"budget exhausted with {len(survivors)} arms active"
    return Verdict(
        positive=positive,
        parent_id=survivors[0].model_id if positive else None,
        family_alpha=alpha,
        tester_kind="bai",
        pvalues=[],
        stats=[SimilarityStat(a.model_id, a.hits, a.tots) for a in arms],
        queries_used={"online": {g.id: rounds}, "offline": {a.model_id: a.tots for a in arms}},
        reason=reason,
        diagnostics={"rounds": rounds, "frozen_leader_rounds": frozen},
    )


# keep pytest from collecting the library function when imported into tests
test_pair.__test__ = False
