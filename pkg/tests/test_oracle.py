import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest
from fastapi.testclient import TestClient

from helpers import base_document, fixture_path
from trial_redesign.explore import ChoiceGroup, exhaustive
from trial_redesign.modification import ActionType, Augmentation, Validation
from trial_redesign.oracle import (
    BadPattern,
    BadResponse,
    ReferenceOracle,
    RemoteOracle,
    Rule,
    ScoreCache,
    ScoringSpec,
    Transport,
    cached_score,
    load_scoring_spec,
    oracle_from_uri,
    reference_score,
    remote_score,
)
from trial_redesign.protocol import INCLUSION, AspectRef, canonicalize, load_protocol, protocol_from_document
from trial_redesign.service import create_app


def enrollment():
    return load_protocol(fixture_path("enrollment", "protocol.json"))


def test_negative_rule_on_waiting_phrase():
    spec = ScoringSpec(0.5, (Rule("wait to undergo", -0.1, aspects=(INCLUSION,)),))
    assert reference_score(spec, enrollment()) == pytest.approx(0.4, abs=1e-12)


def test_empty_rules_give_base():
    assert reference_score(ScoringSpec(0.37), enrollment()) == 0.37


def test_clamp_upper():
    spec = ScoringSpec(0.95, (Rule("cataract", 0.1),))
    assert reference_score(spec, enrollment()) == 0.99


def test_rule_scope_absent_and_regex():
    p = enrollment()
    only_exclusion = ScoringSpec(0.5, (Rule("wait to undergo", -0.1, aspects=("eligibility/exclusion_criteria",)),))
    assert reference_score(only_exclusion, p) == 0.5
    absent = ScoringSpec(0.5, (Rule("anterior chamber cell grade", -0.05, aspects=(INCLUSION,), when="absent"),))
    assert reference_score(absent, p) == pytest.approx(0.45)
    rx = ScoringSpec(0.5, (Rule(r"\b\d+ days\b", 0.02, regex=True),))
    assert reference_score(rx, p) == pytest.approx(0.52)
    with pytest.raises(BadPattern):
        Rule("(", 0.1, regex=True)
    with pytest.raises(ValueError):
        Rule("x", float("nan"))
    with pytest.raises(ValueError):
        ScoringSpec(0.5, clamp=(0.9, 0.1))


def test_spec_file_roundtrip():
    spec = load_scoring_spec(fixture_path("enrollment", "spec.json"))
    assert ScoringSpec.from_dict(spec.to_dict()) == spec
    assert ReferenceOracle(spec).descriptor == ReferenceOracle(ScoringSpec.from_dict(spec.to_dict())).descriptor


class _Stub:
    """Tiny scoring endpoint: replies with whatever ``payload`` holds, after ``delay`` seconds."""

    def __init__(self, payload, delay=0.0):
        self.payload = payload
        self.delay = delay
        self.hits = 0
        self.bodies = []
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers.get("content-length", 0))
                stub.bodies.append(self.rfile.read(length))
                stub.hits += 1
                time.sleep(stub.delay)
                body = stub.payload if isinstance(stub.payload, bytes) else json.dumps(stub.payload).encode()
                self.send_response(200)
                self.send_header("content-type", "application/json")
                self.send_header("content-length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def log_message(self, *args):
                pass

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.url = f"http://127.0.0.1:{self.server.server_address[1]}/score"
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.server.shutdown()
        self.server.server_close()


def test_remote_echo():
    p = enrollment()
    with _Stub({"probability": 0.73}) as stub:
        assert remote_score(stub.url, p) == 0.73
        assert stub.bodies[0] == canonicalize(p)


@pytest.mark.parametrize("payload", [{"probability": 1.7}, {"probability": "0.5"}, {"p": 0.5}, b"not json",
                                     {"probability": True}])
def test_remote_bad_responses(payload):
    with _Stub(payload) as stub:
        with pytest.raises(BadResponse):
            remote_score(stub.url, enrollment())


def test_remote_timeout_is_transport():
    with _Stub({"probability": 0.5}, delay=1.0) as stub:
        with pytest.raises(Transport):
            remote_score(stub.url, enrollment(), timeout=0.2)


def test_remote_unreachable_is_transport():
    with pytest.raises(Transport):
        remote_score("http://127.0.0.1:9/score", enrollment(), timeout=0.5)


def test_remote_oracle_through_cache():
    with _Stub({"probability": 0.61}) as stub:
        oracle = oracle_from_uri(f"remote:{stub.url}")
        assert isinstance(oracle, RemoteOracle)
        cache = ScoreCache()
        p = enrollment()
        assert cached_score(cache, oracle, p) == 0.61
        assert cached_score(cache, oracle, p) == 0.61
        assert stub.hits == 1 and cache.hits == 1 and cache.misses == 1
        oracle.close()


class CountingOracle:
    def __init__(self, spec):
        self.inner = ReferenceOracle(spec)
        self.descriptor = self.inner.descriptor
        self.calls = 0

    def score(self, p):
        self.calls += 1
        return self.inner.score(p)


def test_cache_hits_and_misses():
    oracle = CountingOracle(ScoringSpec(0.5))
    cache = ScoreCache()
    p = enrollment()
    cached_score(cache, oracle, p)
    cached_score(cache, oracle, load_protocol(fixture_path("enrollment", "protocol.json")))
    assert oracle.calls == 1 and cache.hits == 1
    doc = p.to_document()
    doc[INCLUSION][0] += " (modified)"
    cached_score(cache, oracle, protocol_from_document(doc))
    assert cache.misses == 2


def test_cache_keys_include_oracle_descriptor():
    cache = ScoreCache()
    p = enrollment()
    a, b = CountingOracle(ScoringSpec(0.5)), CountingOracle(ScoringSpec(0.6))
    assert cached_score(cache, a, p) == 0.5
    assert cached_score(cache, b, p) == 0.6


def test_second_sweep_of_64_candidates_makes_no_backend_calls():
    p = protocol_from_document(base_document(n_inc=4))
    groups = []
    for i in range(3):
        ref = AspectRef(INCLUSION, i)
        opts = tuple(Augmentation(ref, ActionType.MODIFY, f"inclusion {i} v{j}", original=f"inclusion {i}",
                                  validation=Validation.GOOD) for j in range(3))
        groups.append(ChoiceGroup(opts[0].slot, (None, *opts)))
    oracle = CountingOracle(ScoringSpec(0.5, (Rule("v1", 0.01), Rule("v2", -0.01))))
    cache = ScoreCache()
    first = exhaustive(groups, p, oracle, cache)
    assert len(first.explored) == 64 and oracle.calls == 64
    exhaustive(groups, p, oracle, cache)
    assert oracle.calls == 64


def test_service_serves_reference_oracle():
    spec = load_scoring_spec(fixture_path("enrollment", "spec.json"))
    client = TestClient(create_app(spec))
    p = enrollment()
    resp = client.post("/score", content=canonicalize(p), headers={"content-type": "application/json"})
    assert resp.status_code == 200
    assert resp.json() == {"probability": reference_score(spec, p)}
    assert client.get("/health").json()["oracle"] == ReferenceOracle(spec).descriptor
    assert client.post("/score", json={"nct_id": "x"}).status_code == 422


def test_remote_oracle_against_service_app():
    spec = load_scoring_spec(fixture_path("enrollment", "spec.json"))
    client = TestClient(create_app(spec))
    p = enrollment()
    assert remote_score("http://testserver/score", p, client=client) == pytest.approx(0.35)
