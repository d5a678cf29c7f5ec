"""Command-line entry point.

    provtest pair       --f F --g G --controls C1,C2,...
    provtest identify   --g G --candidates F1,F2 --controls C1,... [--bai --budget N] [--rejection-k K]
    provtest bench      generate|eval|ablate
    provtest sample-prompts --models M1,M2,... [--rejection-k K]

Every command writes one JSON report (``--report PATH`` or stdout). Exit
status: 0 when a verdict/report was produced (a negative verdict included),
2 on configuration errors, 3 when a model backend fails.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .bench import BenchmarkSpec, TesterConfig, Zoo, ablate_controls, evaluate, generate_zoo
from .errors import BackendError, ConfigurationError
from .modelio import (
    Backend,
    HttpBackend,
    HttpConfig,
    ModelHandle,
    QueryCache,
    ReplayBackend,
    SyntheticBackend,
)
from .prompts import PromptCorpus, UniformPromptSource, rejection_sample, sample_uniform
from .seeding import substream
from .tester import MIN_PROMPTS, identify_parent, identify_parent_bai, test_pair

log = logging.getLogger("provtest")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_BACKEND = 3


@dataclass
class RunConfig:
    n_prompts: int = 1000
    alpha: float = 0.05
    k: int = 1
    tau: float = 10.0
    budget: int | None = None
    backend: str = "synthetic"
    corpus: str | None = None
    zoo: str | None = None
    http_config: str | None = None
    cache: str | None = None
    seed: int = 0
    report: str | None = None
    extra: dict = field(default_factory=dict)

    def validate(self, needs_ztest: bool = True) -> None:
        if not 0.0 < self.alpha < 1.0:
            raise ConfigurationError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.k < 1:
            raise ConfigurationError(f"--rejection-k must be >= 1, got {self.k}")
        if self.n_prompts < 1:
            raise ConfigurationError("number of prompts must be >= 1")
        if needs_ztest and self.n_prompts < MIN_PROMPTS:
            raise ConfigurationError(
                f"-T must be >= {MIN_PROMPTS} for the z-test, got {self.n_prompts}"
            )

    def echo(self) -> dict:
        """Effective configuration embedded in reports (worker count excluded)."""
        d = {
            "n_prompts": self.n_prompts,
            "alpha": self.alpha,
            "rejection_k": self.k,
            "tau": self.tau,
            "budget": self.budget,
            "backend": self.backend,
            "corpus": self.corpus,
            "zoo": self.zoo,
            "cache": self.cache,
            "seed": self.seed,
            "sampling": "rejection" if self.k > 1 else "uniform",
        }
        d.update(self.extra)
        return d


def _ids(text: str | None) -> list[str]:
    if not text:
        return []
    return [t.strip() for t in text.split(",") if t.strip()]


def _config_from_args(args) -> RunConfig:
    return RunConfig(
        n_prompts=args.prompts,
        alpha=args.alpha,
        k=getattr(args, "rejection_k", 1),
        tau=getattr(args, "tau", 10.0),
        budget=getattr(args, "budget", None),
        backend=getattr(args, "backend", "synthetic"),
        corpus=getattr(args, "corpus", None),
        zoo=getattr(args, "zoo", None),
        http_config=getattr(args, "http_config", None),
        cache=getattr(args, "cache", None),
        seed=args.seed,
        report=args.report,
    )


def _load_zoo(path: str) -> Zoo:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read zoo file {path}: {exc}") from exc
    if "spec" not in data:
        raise ConfigurationError(f"{path} is not a zoo ground-truth file")
    return Zoo.from_ground_truth(data)


class Session:
    """Resolves model ids and the prompt corpus for one run."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.zoo: Zoo | None = None
        self.cache = QueryCache(cfg.cache) if cfg.cache else None
        self.backend = self._make_backend()
        self.corpus = self._load_corpus()

    def _make_backend(self) -> Backend:
        cfg = self.cfg
        if cfg.backend == "synthetic":
            if not cfg.zoo:
                raise ConfigurationError("synthetic backend needs --zoo (from `bench generate`)")
            self.zoo = _load_zoo(cfg.zoo)
            return SyntheticBackend(self.zoo.models)
        if cfg.backend == "http":
            if not cfg.http_config:
                raise ConfigurationError("http backend needs --http-config")
            try:
                return HttpBackend(HttpConfig.load(cfg.http_config))
            except (OSError, json.JSONDecodeError, TypeError) as exc:
                raise ConfigurationError(f"bad http config: {exc}") from exc
        if cfg.backend == "replay":
            if self.cache is None:
                raise ConfigurationError("replay backend needs --cache DIR")
            return ReplayBackend(self.cache, source_backend=cfg.extra.get("replay_source", "http"))
        raise ConfigurationError(f"unknown backend {cfg.backend!r}")

    def _load_corpus(self) -> PromptCorpus:
        if self.cfg.corpus:
            return PromptCorpus.load(self.cfg.corpus)
        if self.zoo is not None:
            return self.zoo.corpus
        raise ConfigurationError("--corpus is required for this backend")

    def handle(self, model_id: str) -> ModelHandle:
        if not self.backend.knows(model_id):
            raise ConfigurationError(f"unknown model id {model_id!r}")
        return ModelHandle(model_id, self.backend, cache=self.cache)

    def handles(self, ids: list[str]) -> list[ModelHandle]:
        return [self.handle(i) for i in ids]

    def prompts(self, references: list[ModelHandle]):
        """Prompts for a fixed-budget test plus any reference outputs already collected."""
        rng = substream(self.cfg.seed, "prompt-sampling")
        if self.cfg.k > 1:
            sel = rejection_sample(self.corpus, self.cfg.n_prompts, self.cfg.k, self.cfg.tau,
                                   references, rng)
            return sel.prompts, sel.outputs, sel
        return sample_uniform(self.corpus, self.cfg.n_prompts, rng), None, None


def _write_report(report: dict, path: str | None) -> None:
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def cmd_pair(args) -> int:
    cfg = _config_from_args(args)
    cfg.validate()
    session = Session(cfg)
    f, g = session.handle(args.f), session.handle(args.g)
    controls = session.handles(_ids(args.controls))
    prompts, outputs, sel = session.prompts([f, *controls])
    verdict = test_pair(f, g, controls, prompts, cfg.alpha, reference_outputs=outputs,
                        sampling_mode="rejection" if sel else "uniform")
    report = verdict.to_report()
    report["config"] = cfg.echo() | {"command": "pair", "f": f.id, "g": g.id,
                                     "controls": [c.id for c in controls]}
    if sel is not None:
        report["selection_queries"] = sel.queries
    _write_report(report, cfg.report)
    return EXIT_OK


def cmd_identify(args) -> int:
    cfg = _config_from_args(args)
    cfg.extra["variant"] = "bai" if args.bai else "identify"
    cfg.validate(needs_ztest=not args.bai)
    session = Session(cfg)
    g = session.handle(args.g)
    candidates = session.handles(_ids(args.candidates))
    controls = session.handles(_ids(args.controls))
    if args.bai:
        budget = cfg.budget or cfg.n_prompts
        cfg.budget = budget
        source = UniformPromptSource(session.corpus, substream(cfg.seed, "bai-rounds"))
        verdict = identify_parent_bai(g, candidates, controls, source, cfg.alpha, budget)
        sel = None
    else:
        seen = {}
        for m in [*candidates, *controls]:
            seen.setdefault(m.id, m)
        prompts, outputs, sel = session.prompts(list(seen.values()))
        verdict = identify_parent(g, candidates, controls, prompts, cfg.alpha,
                                  reference_outputs=outputs,
                                  sampling_mode="rejection" if sel else "uniform")
    report = verdict.to_report()
    report["config"] = cfg.echo() | {"command": "identify", "g": g.id,
                                     "candidates": [c.id for c in candidates],
                                     "controls": [c.id for c in controls]}
    if sel is not None:
        report["selection_queries"] = sel.queries
    _write_report(report, cfg.report)
    return EXIT_OK


def cmd_sample_prompts(args) -> int:
    cfg = _config_from_args(args)
    cfg.validate(needs_ztest=False)
    session = Session(cfg)
    models = session.handles(_ids(args.models))
    rng = substream(cfg.seed, "prompt-sampling")
    if cfg.k > 1:
        if not models:
            raise ConfigurationError("rejection sampling needs --models")
        sel = rejection_sample(session.corpus, cfg.n_prompts, cfg.k, cfg.tau, models, rng)
        prompts = sel.prompts
        extra = {"mean_reference_agreement": sel.matrix.mean_offdiagonal(),
                 "queries": sel.queries}
    else:
        prompts = sample_uniform(session.corpus, cfg.n_prompts, rng)
        extra = {"queries": {}}
    report = {"prompts": prompts, "config": cfg.echo() | {"command": "sample-prompts",
                                                          "models": [m.id for m in models]}}
    report.update(extra)
    _write_report(report, cfg.report)
    return EXIT_OK


def _bench_spec(args) -> BenchmarkSpec:
    if args.spec:
        return BenchmarkSpec.load(args.spec)
    if args.zoo:
        return _load_zoo(args.zoo).spec
    return BenchmarkSpec.default()


def cmd_bench(args) -> int:
    if args.prompts < 1:
        raise ConfigurationError("number of prompts must be >= 1")
    if args.mode != "generate" and not args.bai and args.prompts < MIN_PROMPTS:
        raise ConfigurationError(f"-T must be >= {MIN_PROMPTS} for the z-test")
    spec = _bench_spec(args)
    zoo = _load_zoo(args.zoo) if args.zoo else generate_zoo(spec)
    if args.mode == "generate":
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "zoo.json", "w", encoding="utf-8") as fh:
            json.dump(zoo.ground_truth(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        zoo.corpus.save(out / "corpus.txt")
        summary = {
            "command": "bench generate",
            "zoo": str(out / "zoo.json"),
            "corpus": str(out / "corpus.txt"),
            "bases": len(zoo.base_ids),
            "children": len(zoo.children),
            "derived": sum(c.parent_id is not None for c in zoo.children),
            "config": {"spec": spec.to_dict()},
        }
        _write_report(summary, args.report)
        return EXIT_OK
    tcfg = TesterConfig(
        n_prompts=args.prompts, alpha=args.alpha, k=args.rejection_k, tau=args.tau,
        bai=args.bai, budget=args.budget, seed=args.seed,
    )
    if args.mode == "eval":
        report = evaluate(zoo, tcfg, workers=args.workers).to_dict()
        report["config"]["spec"] = spec.to_dict()
        report["config"]["command"] = "bench eval"
    else:
        sizes = [int(s) for s in _ids(args.sizes)] or [1, 2, 4, 8, 16, len(zoo.base_ids)]
        rows = ablate_controls(zoo, sizes, args.trials, tcfg)
        report = {
            "rows": [r.to_dict() for r in rows],
            "config": {"tester": tcfg.to_dict(), "spec": spec.to_dict(),
                       "trials": args.trials, "command": "bench ablate"},
        }
    _write_report(report, args.report)
    return EXIT_OK


def _common(p: argparse.ArgumentParser, models: bool = True) -> None:
    p.add_argument("-T", "--prompts", type=int, default=1000, help="number of prompts")
    p.add_argument("--alpha", type=float, default=0.05, help="family-wise significance level")
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--report", help="report path (default: stdout)")
    p.add_argument("--rejection-k", type=int, default=1, help="candidates per selected prompt")
    p.add_argument("--tau", type=float, default=10.0, help="rejection-sampling temperature")
    if models:
        p.add_argument("--backend", choices=["synthetic", "replay", "http"], default="synthetic")
        p.add_argument("--zoo", help="zoo ground-truth file (synthetic backend)")
        p.add_argument("--corpus", help="newline-delimited prompt corpus")
        p.add_argument("--http-config", help="JSON endpoint description (http backend)")
        p.add_argument("--cache", help="query cache directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="provtest", description="Black-box model provenance tests")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--workers", type=int, default=os.cpu_count() or 1,
                        help="parallel workers (output does not depend on it)")
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pair", help="test a known (f, g) pair against controls")
    _common(p)
    p.add_argument("--f", required=True, help="suspected parent")
    p.add_argument("--g", required=True, help="tested model")
    p.add_argument("--controls", required=True, help="comma-separated control ids")
    p.set_defaults(func=cmd_pair)

    p = sub.add_parser("identify", help="find g's parent among candidates")
    _common(p)
    p.add_argument("--g", required=True)
    p.add_argument("--candidates", required=True)
    p.add_argument("--controls", default="")
    p.add_argument("--bai", action="store_true", help="best-arm-identification tester")
    p.add_argument("--budget", type=int, help="max average prompts per model for --bai")
    p.set_defaults(func=cmd_identify)

    p = sub.add_parser("sample-prompts", help="emit a selected prompt list for audit")
    _common(p)
    p.add_argument("--models", default="", help="reference models for rejection sampling")
    p.set_defaults(func=cmd_sample_prompts)

    p = sub.add_parser("bench", help="synthetic benchmark")
    p.add_argument("mode", choices=["generate", "eval", "ablate"])
    _common(p, models=False)
    p.add_argument("--spec", help="benchmark spec JSON (default: shipped spec)")
    p.add_argument("--zoo", help="existing zoo.json instead of --spec")
    p.add_argument("--out", default="zoo", help="output directory for generate")
    p.add_argument("--bai", action="store_true")
    p.add_argument("--budget", type=int)
    p.add_argument("--sizes", default="", help="control subset sizes for ablate")
    p.add_argument("--trials", type=int, default=100)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"provtest: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BackendError as exc:
        print(f"provtest: backend error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return EXIT_BACKEND


if __name__ == "__main__":
    sys.exit(main())
