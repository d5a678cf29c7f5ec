import json
import logging
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import collision_mass, zipf_probs
from provtest.errors import (
    BackendError,
    BackendUnreachable,
    CacheCorrupted,
    CacheMiss,
    MalformedResponse,
    RateLimited,
)
from provtest.modelio import (
    GREEDY,
    HttpBackend,
    HttpConfig,
    ModelHandle,
    QueryCache,
    ReplayBackend,
    SyntheticBackend,
    SyntheticModelSpec,
    _perturb_key,
    _uniform_array,
    canonical_token,
    prompt_hash,
    prompt_hashes,
    query_first_token,
    synth_token,
    synth_token_ids,
)

PROMPTS = [f"prompt number {i} about the weather" for i in range(10_000)]
C_1000_11 = collision_mass(zipf_probs(1000, 1.1))


def agreement(a, b, prompts=PROMPTS):
    ta = synth_token_ids(a, prompt_hashes(prompts))
    tb = synth_token_ids(b, prompt_hashes(prompts))
    return float(np.mean(ta == tb))


class TestSynthetic:
    def test_deterministic(self):
        spec = SyntheticModelSpec(seed=7)
        assert synth_token(spec, "hello there") == synth_token(spec, "hello there")

    def test_scalar_and_vector_paths_agree(self):
        base = SyntheticModelSpec(seed=3, domain_group=2)
        child = SyntheticModelSpec(seed=9, domain_group=2, parent_seed=3, perturbation_rate=0.4)
        for spec in (base, child):
            vec = synth_token_ids(spec, prompt_hashes(PROMPTS[:500]))
            assert [str(v) for v in vec] == [synth_token(spec, p) for p in PROMPTS[:500]]

    def test_rho_zero_copies_parent(self):
        parent = SyntheticModelSpec(seed=5)
        child = SyntheticModelSpec(seed=6, parent_seed=5, perturbation_rate=0.0)
        assert agreement(parent, child) == 1.0

    def test_rho_02_matches_collision_oracle(self):
        parent = SyntheticModelSpec(seed=5)
        child = SyntheticModelSpec(seed=6, parent_seed=5, perturbation_rate=0.2)
        expected = 0.8 + 0.2 * C_1000_11
        assert abs(agreement(parent, child) - expected) <= 0.02

    def test_rho_one_is_unrelated(self):
        parent = SyntheticModelSpec(seed=5)
        child = SyntheticModelSpec(seed=6, parent_seed=5, perturbation_rate=1.0)
        assert abs(agreement(parent, child) - C_1000_11) <= 0.02

    def test_same_group_bases_agree_at_collision_mass(self):
        a = SyntheticModelSpec(seed=101, domain_group=4)
        b = SyntheticModelSpec(seed=202, domain_group=4)
        assert abs(agreement(a, b) - C_1000_11) <= 0.02

    def test_different_groups_never_agree(self):
        a = SyntheticModelSpec(seed=101, domain_group=0)
        b = SyntheticModelSpec(seed=202, domain_group=1)
        assert agreement(a, b) == 0.0

    def test_agreement_non_increasing_in_rho(self):
        parent = SyntheticModelSpec(seed=5)
        hashes = prompt_hashes(PROMPTS[:3000])
        p_tok = synth_token_ids(parent, hashes)
        copied_prev = None
        for rho in np.linspace(0, 1, 11):
            child = SyntheticModelSpec(seed=6, parent_seed=5, perturbation_rate=float(rho))
            c_tok = synth_token_ids(child, hashes)
            # unperturbed prompts form a shrinking set
            kept = _uniform_array(_perturb_key(child), hashes) >= rho
            assert (c_tok[kept] == p_tok[kept]).all()
            if copied_prev is not None:
                assert not (kept & ~copied_prev).any()
            copied_prev = kept

    @settings(max_examples=50)
    @given(st.integers(0, 2**63 - 1), st.text(min_size=1, max_size=40))
    def test_pure_function(self, seed, prompt):
        spec = SyntheticModelSpec(seed=seed)
        assert synth_token(spec, prompt) == synth_token(SyntheticModelSpec(seed=seed), prompt)


class TestCache:
    def test_cold_and_warm_cache_agree(self, tmp_path):
        backend = SyntheticBackend({"m": SyntheticModelSpec(seed=1)})
        prompts = PROMPTS[:50]
        cold = ModelHandle("m", backend, cache=QueryCache(tmp_path)).first_tokens(prompts)
        warm = ModelHandle("m", backend, cache=QueryCache(tmp_path)).first_tokens(prompts)
        plain = ModelHandle("m", backend).first_tokens(prompts)
        assert cold == warm == plain

    def test_file_format(self, tmp_path):
        cache = QueryCache(tmp_path)
        handle = ModelHandle("m", SyntheticBackend({"m": SyntheticModelSpec(seed=1)}), cache=cache)
        handle.first_tokens(["a prompt"])
        (path,) = tmp_path.iterdir()
        lines = path.read_text(encoding="utf-8").splitlines()
        header = json.loads(lines[0][2:])
        assert header["model_id"] == "m"
        assert header["decode_params"] == {"max_tokens": 1, "temperature": 0.0}
        h, tok = lines[1].split("\t")
        assert len(h) == 16 and tok == synth_token(SyntheticModelSpec(seed=1), "a prompt")

    def test_awkward_tokens_round_trip(self, tmp_path):
        cache = QueryCache(tmp_path)
        cache.put_many("http", "m", GREEDY, [(1, "a\tb"), (2, "\n"), (3, "é")])
        fresh = QueryCache(tmp_path)
        assert [fresh.get("http", "m", GREEDY, h) for h in (1, 2, 3)] == [
            "a\tb", "\n", "é"]

    def test_corruption_is_an_error(self, tmp_path):
        cache = QueryCache(tmp_path)
        cache.put_many("http", "m", GREEDY, [(1, "x")])
        path = cache.path_for("http", "m", GREEDY)
        with open(path, "a") as fh:
            fh.write("garbage-without-tab\n")
        with pytest.raises(CacheCorrupted):
            QueryCache(tmp_path).get("http", "m", GREEDY, 1)

    def test_replay_miss(self, tmp_path):
        cache = QueryCache(tmp_path)
        cache.put_many("http", "m", GREEDY, [])
        handle = ModelHandle("m", ReplayBackend(cache))
        with pytest.raises(CacheMiss):
            query_first_token(handle, "never seen")

    def test_replay_serves_recorded(self, tmp_path):
        cache = QueryCache(tmp_path)
        cache.put_many("http", "m", GREEDY, [(prompt_hash("hi"), "there")])
        obs = query_first_token(ModelHandle("m", ReplayBackend(QueryCache(tmp_path))), "hi")
        assert obs.token == "there" and obs.model_id == "m"

    def test_concurrent_writers(self, tmp_path):
        cache = QueryCache(tmp_path)
        handle = ModelHandle("m", SyntheticBackend({"m": SyntheticModelSpec(seed=1)}), cache=cache)
        chunks = [PROMPTS[i * 100:(i + 1) * 100] for i in range(8)]
        threads = [threading.Thread(target=handle.first_tokens, args=(c,)) for c in chunks]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        lines = next(tmp_path.iterdir()).read_text().splitlines()
        assert len(lines) == 1 + 800


def test_canonical_token():
    assert canonical_token(" the") == "the"
    assert canonical_token("  the") == " the"
    assert canonical_token("the") == "the"


# ---------------------------------------------------------------------------
# HTTP backend against a local stub


class _Stub(BaseHTTPRequestHandler):
    script: list = []
    seen: list = []

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        type(self).seen.append((body, self.headers.get("Authorization")))
        status, payload = type(self).script.pop(0) if type(self).script else (200, None)
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.end_headers()
        if payload is not None:
            self.wfile.write(payload if isinstance(payload, bytes) else json.dumps(payload).encode())

    def log_message(self, *args):
        pass


@pytest.fixture
def stub():
    _Stub.script = []
    _Stub.seen = []
    server = ThreadingHTTPServer(("127.0.0.1", 0), _Stub)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield _Stub, f"http://127.0.0.1:{server.server_address[1]}/v1/completions"
    server.shutdown()


def _http(url, **kw):
    return HttpBackend(HttpConfig(endpoint=url, backoff_base=0.0, timeout=5, **kw))


def ok(text):
    return 200, {"choices": [{"text": text}]}


class TestHttp:
    def test_echo(self, stub):
        s, url = stub
        s.script = [ok("the")]
        assert _http(url).http_first_token("gpt", "Once upon a") == "the"
        body, _ = s.seen[0]
        assert body == {"model": "gpt", "prompt": "Once upon a", "max_tokens": 1, "temperature": 0.0}

    def test_leading_space_trimmed(self, stub):
        s, url = stub
        s.script = [ok(" the")]
        assert _http(url).http_first_token("gpt", "x") == "the"

    def test_retry_after_429(self, stub, caplog):
        s, url = stub
        s.script = [(429, {"error": "slow down"}), ok("the")]
        backend = _http(url)
        with caplog.at_level(logging.INFO, logger="provtest.modelio"):
            assert backend.http_first_token("gpt", "x") == "the"
        assert backend.retries == 1
        assert "after 1 retries" in caplog.text

    def test_rate_limit_gives_up_after_five(self, stub):
        s, url = stub
        s.script = [(429, {})] * 5
        backend = _http(url)
        with pytest.raises(RateLimited) as exc:
            backend.http_first_token("gpt", "x")
        assert exc.value.retryable
        assert len(s.seen) == 5

    def test_malformed(self, stub):
        s, url = stub
        s.script = [(200, {"choices": []})]
        with pytest.raises(MalformedResponse) as exc:
            _http(url).http_first_token("gpt", "x")
        assert not exc.value.retryable

    def test_client_error_not_retried(self, stub):
        s, url = stub
        s.script = [(404, {})]
        with pytest.raises(BackendError):
            _http(url).http_first_token("gpt", "x")
        assert len(s.seen) == 1

    def test_unreachable(self):
        backend = _http("http://127.0.0.1:9/none", max_attempts=2)
        with pytest.raises(BackendUnreachable):
            backend.http_first_token("gpt", "x")

    def test_custom_template_and_auth(self, stub, monkeypatch):
        s, url = stub
        s.script = [(200, {"out": {"tokens": ["Hello", "x"]}})]
        monkeypatch.setenv("STUB_KEY", "secret")
        backend = _http(
            url,
            request_template={"m": "{model}", "input": {"text": "{prompt}"}, "n": "{max_tokens}"},
            response_path="out.tokens.0",
            auth_env="STUB_KEY",
            models={"alias": "real-name"},
        )
        handle = ModelHandle("alias", backend)
        assert query_first_token(handle, "Hi").token == "Hello"
        body, auth = s.seen[0]
        assert body == {"m": "real-name", "input": {"text": "Hi"}, "n": 1}
        assert auth == "Bearer secret"

    def test_cache_write_through(self, stub, tmp_path):
        s, url = stub
        s.script = [ok(" a"), ok(" b")]
        handle = ModelHandle("gpt", _http(url, workers=1), cache=QueryCache(tmp_path))
        assert handle.first_tokens(["p1", "p2"]) == ["a", "b"]
        replay = ModelHandle("gpt", ReplayBackend(QueryCache(tmp_path)))
        assert replay.first_tokens(["p2", "p1"]) == ["b", "a"]
        assert len(s.seen) == 2
