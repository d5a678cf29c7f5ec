"""Black-box model access: prompt in, first output token out.

Three backends share one interface:

* ``SyntheticBackend`` - seeded stand-in models drawn from Zipf token profiles
* ``ReplayBackend``    - answers only from a recorded query cache
* ``HttpBackend``      - a completions endpoint queried with greedy, 1-token decoding

Any backend can be wrapped by a persistent :class:`QueryCache`, which lets
offline queries to reference models be reused across tests.
"""

from __future__ import annotations

import bisect
import codecs
import copy
import hashlib
import json
import logging
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .errors import (
    BackendError,
    BackendUnreachable,
    CacheCorrupted,
    CacheMiss,
    ConfigurationError,
    MalformedResponse,
    RateLimited,
)
from .seeding import MASK64, splitmix64, splitmix64_array

log = logging.getLogger(__name__)

_STREAM_TOKEN = 0x243F6A8885A308D3
_STREAM_PERTURB = 0x13198A2E03707344


@dataclass(frozen=True)
class DecodeParams:
    max_tokens: int = 1
    temperature: float = 0.0


GREEDY = DecodeParams()


@dataclass(frozen=True)
class TokenObservation:
    model_id: str
    prompt_hash: int
    token: str


def canonical_token(text: str) -> str:
    """Drop exactly one leading space; tokenizers disagree on it."""
    return text[1:] if text.startswith(" ") else text


@lru_cache(maxsize=1 << 17)
def prompt_hash(prompt: str) -> int:
    return int.from_bytes(
        hashlib.blake2b(prompt.encode("utf-8"), digest_size=8).digest(), "big"
    )


# --------------------------------------------------------------------------
# synthetic models


@dataclass(frozen=True)
class SyntheticModelSpec:
    """A seeded stand-in model.

    Base models (``parent_seed is None``) draw every token from their group's
    Zipf profile. Derived models copy the parent on a ``1 - perturbation_rate``
    fraction of prompts and redraw with their own seed elsewhere.
    """

    seed: int
    vocab_size: int = 1000
    domain_group: int = 0
    parent_seed: int | None = None
    perturbation_rate: float = 0.0
    zipf_exponent: float = 1.1

    def __post_init__(self):
        if self.vocab_size < 1:
            raise ConfigurationError("vocab_size must be positive")
        if not 0.0 <= self.perturbation_rate <= 1.0:
            raise ConfigurationError("perturbation_rate must lie in [0, 1]")

    @property
    def is_derived(self) -> bool:
        return self.parent_seed is not None

    def parent_spec(self) -> "SyntheticModelSpec":
        return SyntheticModelSpec(
            seed=self.parent_seed,
            vocab_size=self.vocab_size,
            domain_group=self.domain_group,
            zipf_exponent=self.zipf_exponent,
        )

    def to_dict(self) -> dict:
        return asdict(self)


@lru_cache(maxsize=64)
def _zipf_cdf(vocab_size: int, exponent: float) -> tuple[np.ndarray, tuple[float, ...]]:
    weights = np.arange(1, vocab_size + 1, dtype=np.float64) ** -exponent
    cdf = np.cumsum(weights / weights.sum())
    cdf[-1] = 1.0
    return cdf, tuple(cdf.tolist())


def zipf_probabilities(vocab_size: int, exponent: float) -> np.ndarray:
    weights = np.arange(1, vocab_size + 1, dtype=np.float64) ** -exponent
    return weights / weights.sum()


def _stream_key(seed: int, stream: int) -> int:
    return splitmix64((seed ^ stream) & MASK64)


def _uniform(key: int, phash: int) -> float:
    return (splitmix64(key ^ phash) >> 11) * 2.0**-53


def _uniform_array(key: int, phashes: np.ndarray) -> np.ndarray:
    x = splitmix64_array(phashes ^ np.uint64(key))
    return (x >> np.uint64(11)).astype(np.float64) * 2.0**-53


def _perturb_key(spec: SyntheticModelSpec) -> int:
    return _stream_key(splitmix64(spec.parent_seed & MASK64) ^ spec.seed, _STREAM_PERTURB)


def _rank(spec: SyntheticModelSpec, u: float) -> int:
    _, cdf = _zipf_cdf(spec.vocab_size, spec.zipf_exponent)
    return min(bisect.bisect_right(cdf, u), spec.vocab_size - 1)


def synth_token_id(spec: SyntheticModelSpec, phash: int) -> int:
    if spec.is_derived:
        u = _uniform(_perturb_key(spec), phash)
        if u >= spec.perturbation_rate:
            return synth_token_id(spec.parent_spec(), phash)
    u = _uniform(_stream_key(spec.seed, _STREAM_TOKEN), phash)
    return spec.domain_group * spec.vocab_size + _rank(spec, u)


def synth_token(spec: SyntheticModelSpec, prompt: str) -> str:
    """Token emitted by a synthetic model; a pure function of (spec, prompt)."""
    return str(synth_token_id(spec, prompt_hash(prompt)))


def synth_token_ids(spec: SyntheticModelSpec, phashes: np.ndarray) -> np.ndarray:
    """Vectorised :func:`synth_token_id` over an array of prompt hashes."""
    phashes = np.asarray(phashes, dtype=np.uint64)
    cdf, _ = _zipf_cdf(spec.vocab_size, spec.zipf_exponent)
    u = _uniform_array(_stream_key(spec.seed, _STREAM_TOKEN), phashes)
    ranks = np.minimum(np.searchsorted(cdf, u, side="right"), spec.vocab_size - 1)
    ids = ranks.astype(np.int64) + spec.domain_group * spec.vocab_size
    if spec.is_derived:
        keep = _uniform_array(_perturb_key(spec), phashes) >= spec.perturbation_rate
        parent_ids = synth_token_ids(spec.parent_spec(), phashes)
        ids = np.where(keep, parent_ids, ids)
    return ids


def prompt_hashes(prompts: Iterable[str]) -> np.ndarray:
    return np.fromiter((prompt_hash(p) for p in prompts), dtype=np.uint64)


# --------------------------------------------------------------------------
# backends


class Backend:
    backend_id = "abstract"

    def first_tokens(self, model_id: str, prompts: Sequence[str]) -> list[str]:
        raise NotImplementedError

    def knows(self, model_id: str) -> bool:
        return True


class SyntheticBackend(Backend):
    backend_id = "synthetic"

    def __init__(self, specs: dict[str, SyntheticModelSpec]):
        self.specs = dict(specs)

    def knows(self, model_id):
        return model_id in self.specs

    def spec(self, model_id: str) -> SyntheticModelSpec:
        try:
            return self.specs[model_id]
        except KeyError:
            raise ConfigurationError(f"unknown synthetic model {model_id!r}") from None

    def first_tokens(self, model_id, prompts):
        spec = self.spec(model_id)
        if len(prompts) == 1:
            return [synth_token(spec, prompts[0])]
        return [str(t) for t in synth_token_ids(spec, prompt_hashes(prompts)).tolist()]


class QueryCache:
    """Append-only per-model record files of ``prompt_hash<TAB>token``.

    The first line of each file is a ``#`` header holding the model id,
    backend id and decode parameters as JSON. Tokens are stored with
    backslash escapes so tabs and newlines survive the round trip.
    """

    def __init__(self, directory: str | os.PathLike):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self._tables: dict[tuple, dict[int, str]] = {}
        self._lock = threading.Lock()

    @staticmethod
    def _header(backend_id: str, model_id: str, decode: DecodeParams) -> dict:
        return {"backend": backend_id, "model_id": model_id, "decode_params": asdict(decode)}

    def path_for(self, backend_id: str, model_id: str, decode: DecodeParams) -> Path:
        key = json.dumps(self._header(backend_id, model_id, decode), sort_keys=True)
        digest = hashlib.blake2b(key.encode(), digest_size=6).hexdigest()
        safe = re.sub(r"[^A-Za-z0-9._-]+", "_", model_id)[:60]
        return self.directory / f"{backend_id}__{safe}__{digest}.tsv"

    def _load(self, backend_id, model_id, decode) -> dict[int, str]:
        key = (backend_id, model_id, decode)
        table = self._tables.get(key)
        if table is not None:
            return table
        table = {}
        path = self.path_for(backend_id, model_id, decode)
        if path.exists():
            with open(path, encoding="utf-8") as fh:
                lines = fh.read().split("\n")
            if not lines or not lines[0].startswith("# "):
                raise CacheCorrupted(f"{path}: missing header")
            try:
                header = json.loads(lines[0][2:])
            except json.JSONDecodeError as exc:
                raise CacheCorrupted(f"{path}: bad header") from exc
            if header != self._header(backend_id, model_id, decode):
                raise CacheCorrupted(f"{path}: header does not match model/decode params")
            for lineno, line in enumerate(lines[1:], start=2):
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 2:
                    raise CacheCorrupted(f"{path}:{lineno}: expected 2 fields")
                try:
                    h = int(parts[0], 16)
                    token = codecs.decode(parts[1], "unicode_escape")
                except (ValueError, UnicodeDecodeError) as exc:
                    raise CacheCorrupted(f"{path}:{lineno}: {exc}") from exc
                table[h] = token
        self._tables[key] = table
        return table

    def get(self, backend_id, model_id, decode, phash: int) -> str | None:
        with self._lock:
            return self._load(backend_id, model_id, decode).get(phash)

    def put_many(self, backend_id, model_id, decode, items: Iterable[tuple[int, str]]):
        with self._lock:
            table = self._load(backend_id, model_id, decode)
            path = self.path_for(backend_id, model_id, decode)
            fresh = [(h, t) for h, t in items if h not in table]
            if not fresh:
                return
            new_file = not path.exists()
            with open(path, "a", encoding="utf-8") as fh:
                if new_file:
                    header = self._header(backend_id, model_id, decode)
                    fh.write("# " + json.dumps(header, sort_keys=True) + "\n")
                for h, t in fresh:
                    escaped = t.encode("unicode_escape").decode("ascii")
                    fh.write(f"{h:016x}\t{escaped}\n")
                    table[h] = t


class ReplayBackend(Backend):
    """Serves recorded answers only; never reaches a live model."""

    backend_id = "replay"

    def __init__(self, cache: QueryCache, source_backend: str = "http", decode=GREEDY):
        self.cache = cache
        self.source_backend = source_backend
        self.decode = decode

    def first_tokens(self, model_id, prompts):
        out = []
        for p in prompts:
            tok = self.cache.get(self.source_backend, model_id, self.decode, prompt_hash(p))
            if tok is None:
                raise CacheMiss(f"no recorded answer of {model_id!r} for prompt {p[:40]!r}")
            out.append(tok)
        return out


@dataclass
class HttpConfig:
    """Wire format of a completions endpoint.

    ``request_template`` is JSON whose string leaves equal to ``"{model}"``,
    ``"{prompt}"``, ``"{max_tokens}"`` or ``"{temperature}"`` are substituted.
    ``response_path`` is a dotted path (integers index lists) to the text.
    """

    endpoint: str
    models: dict[str, str] = field(default_factory=dict)
    request_template: dict[str, Any] = field(
        default_factory=lambda: {
            "model": "{model}",
            "prompt": "{prompt}",
            "max_tokens": "{max_tokens}",
            "temperature": "{temperature}",
        }
    )
    response_path: str = "choices.0.text"
    auth_env: str | None = None
    max_attempts: int = 5
    backoff_base: float = 0.5
    timeout: float = 30.0
    workers: int = 4

    @classmethod
    def from_dict(cls, data: dict) -> "HttpConfig":
        if "endpoint" not in data:
            raise ConfigurationError("http config needs an 'endpoint'")
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown http config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "HttpConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _fill(template: Any, values: dict[str, Any]) -> Any:
    if isinstance(template, dict):
        return {k: _fill(v, values) for k, v in template.items()}
    if isinstance(template, list):
        return [_fill(v, values) for v in template]
    if isinstance(template, str) and template in values:
        return values[template]
    return template


def extract_path(payload: Any, path: str) -> Any:
    node = payload
    for part in path.split("."):
        if isinstance(node, list):
            try:
                node = node[int(part)]
            except (ValueError, IndexError) as exc:
                raise MalformedResponse(f"cannot index response at {part!r}") from exc
        elif isinstance(node, dict):
            if part not in node:
                raise MalformedResponse(f"response has no field {part!r}")
            node = node[part]
        else:
            raise MalformedResponse(f"cannot descend into {type(node).__name__} at {part!r}")
    return node


class HttpBackend(Backend):
    backend_id = "http"

    def __init__(self, config: HttpConfig, decode: DecodeParams = GREEDY, session=None):
        import requests

        self.config = config
        self.decode = decode
        self._requests = requests
        self.session = session or requests.Session()
        self.retries = 0
        self._retry_lock = threading.Lock()

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.config.auth_env:
            key = os.environ.get(self.config.auth_env)
            if not key:
                raise ConfigurationError(f"environment variable {self.config.auth_env} is not set")
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def http_first_token(self, model_name: str, prompt: str) -> str:
        body = _fill(
            copy.deepcopy(self.config.request_template),
            {
                "{model}": model_name,
                "{prompt}": prompt,
                "{max_tokens}": self.decode.max_tokens,
                "{temperature}": self.decode.temperature,
            },
        )
        headers = self._headers()
        last_status = None
        for attempt in range(1, self.config.max_attempts + 1):
            try:
                resp = self.session.post(
                    self.config.endpoint, json=body, headers=headers, timeout=self.config.timeout
                )
            except self._requests.RequestException as exc:
                last_status = None
                log.warning("attempt %d to %s failed: %s", attempt, self.config.endpoint, exc)
            else:
                if resp.status_code == 200:
                    if attempt > 1:
                        log.info("request succeeded after %d retries", attempt - 1)
                    try:
                        payload = resp.json()
                    except ValueError as exc:
                        raise MalformedResponse("response is not JSON") from exc
                    text = extract_path(payload, self.config.response_path)
                    if not isinstance(text, str):
                        raise MalformedResponse(f"token at {self.config.response_path} is not text")
                    return canonical_token(text)
                last_status = resp.status_code
                if resp.status_code != 429 and resp.status_code < 500:
                    raise BackendError(f"HTTP {resp.status_code} from {self.config.endpoint}")
                log.warning("attempt %d got HTTP %d, retrying", attempt, resp.status_code)
            if attempt < self.config.max_attempts:
                with self._retry_lock:
                    self.retries += 1
                time.sleep(self.config.backoff_base * 2 ** (attempt - 1))
        if last_status == 429:
            raise RateLimited(f"rate limited after {self.config.max_attempts} attempts")
        raise BackendUnreachable(
            f"{self.config.endpoint} failed after {self.config.max_attempts} attempts"
        )

    def first_tokens(self, model_id, prompts):
        name = self.config.models.get(model_id, model_id)
        if len(prompts) <= 1 or self.config.workers <= 1:
            return [self.http_first_token(name, p) for p in prompts]
        with ThreadPoolExecutor(self.config.workers) as pool:
            return list(pool.map(lambda p: self.http_first_token(name, p), prompts))


# --------------------------------------------------------------------------
# handles


@dataclass(eq=False)
class ModelHandle:
    """A queryable model: identifier, backend and (fixed) decoding parameters."""

    id: str
    backend: Backend
    cache: QueryCache | None = None
    decode_params: DecodeParams = GREEDY

    def __post_init__(self):
        if not self.id:
            raise ConfigurationError("model id must be non-empty")

    @property
    def backend_name(self) -> str:
        return self.backend.backend_id

    def first_tokens(self, prompts: Sequence[str]) -> list[str]:
        if any(not p for p in prompts):
            raise ConfigurationError("prompts must be non-empty")
        if self.cache is None or isinstance(self.backend, ReplayBackend):
            return self.backend.first_tokens(self.id, list(prompts))
        bid = self.backend.backend_id
        hashes = [prompt_hash(p) for p in prompts]
        out: list[str | None] = [
            self.cache.get(bid, self.id, self.decode_params, h) for h in hashes
        ]
        missing = [i for i, t in enumerate(out) if t is None]
        if missing:
            fetched = self.backend.first_tokens(self.id, [prompts[i] for i in missing])
            for i, tok in zip(missing, fetched):
                out[i] = tok
            self.cache.put_many(
                bid, self.id, self.decode_params, [(hashes[i], out[i]) for i in missing]
            )
        return out  # type: ignore[return-value]

    def __repr__(self):
        return f"ModelHandle({self.id!r}, {self.backend_name})"


def query_first_token(model: ModelHandle, prompt: str) -> TokenObservation:
    if not prompt:
        raise ConfigurationError("prompt must be non-empty")
    (token,) = model.first_tokens([prompt])
    return TokenObservation(model.id, prompt_hash(prompt), token)
