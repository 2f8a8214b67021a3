"""Success-probability oracles: reference pattern scorer, remote HTTP client, and a score cache."""

from __future__ import annotations

import hashlib
import json
import math
import re
import threading
from dataclasses import dataclass, field
from typing import Protocol, runtime_checkable

import httpx

from .protocol import ASPECTS, TrialProtocol, canonical_json, canonicalize, hash_protocol


class OracleError(RuntimeError):
    """The candidate could not be scored."""


class Transport(OracleError):
    pass


class BadResponse(OracleError):
    pass


class BadPattern(ValueError):
    pass


@runtime_checkable
class OutcomeOracle(Protocol):
    descriptor: str

    def score(self, p: TrialProtocol) -> float: ...


@dataclass(frozen=True)
class Rule:
    pattern: str
    weight: float
    aspects: tuple[str, ...] = ASPECTS
    regex: bool = False
    when: str = "present"  # or "absent"
    label: str = ""

    def __post_init__(self):
        if not math.isfinite(self.weight):
            raise ValueError(f"rule weight must be finite, got {self.weight}")
        if self.when not in ("present", "absent"):
            raise ValueError(f"rule 'when' must be present|absent, got {self.when!r}")
        unknown = set(self.aspects) - set(ASPECTS)
        if unknown:
            raise ValueError(f"unknown aspects in rule scope: {sorted(unknown)}")
        if self.regex:
            try:
                re.compile(self.pattern)
            except re.error as exc:
                raise BadPattern(f"{self.pattern!r}: {exc}") from exc

    def matches(self, p: TrialProtocol) -> bool:
        texts = (text for _, text in p.aspect_texts(self.aspects))
        if self.regex:
            rx = re.compile(self.pattern)
            hit = any(rx.search(t) for t in texts)
        else:
            hit = any(self.pattern in t for t in texts)
        return hit if self.when == "present" else not hit

    def to_dict(self) -> dict:
        d = {"pattern": self.pattern, "weight": self.weight, "regex": self.regex, "when": self.when}
        d["aspects"] = "ALL" if tuple(self.aspects) == ASPECTS else list(self.aspects)
        if self.label:
            d["label"] = self.label
        return d


@dataclass(frozen=True)
class ScoringSpec:
    base: float
    rules: tuple[Rule, ...] = ()
    clamp: tuple[float, float] = (0.01, 0.99)

    def __post_init__(self):
        lo, hi = self.clamp
        if not (0.0 <= lo < hi <= 1.0):
            raise ValueError(f"clamp must satisfy 0 <= lo < hi <= 1, got {self.clamp}")
        if not math.isfinite(self.base):
            raise ValueError("base must be finite")

    @classmethod
    def from_dict(cls, d: dict) -> "ScoringSpec":
        rules = []
        for r in d.get("rules", []):
            aspects = r.get("aspects", r.get("aspect_scope", "ALL"))
            aspects = ASPECTS if aspects == "ALL" else tuple(aspects)
            rules.append(
                Rule(
                    pattern=r["pattern"],
                    weight=float(r["weight"]),
                    aspects=aspects,
                    regex=bool(r.get("regex", False)),
                    when=r.get("when", "present"),
                    label=r.get("label", ""),
                )
            )
        return cls(base=float(d["base"]), rules=tuple(rules), clamp=tuple(d.get("clamp", (0.01, 0.99))))

    def to_dict(self) -> dict:
        return {"base": self.base, "rules": [r.to_dict() for r in self.rules], "clamp": list(self.clamp)}

    def raw_score(self, p: TrialProtocol) -> float:
        """Pre-clamp score."""
        return self.base + math.fsum(r.weight for r in self.rules if r.matches(p))


def load_scoring_spec(path) -> ScoringSpec:
    with open(path, encoding="utf-8") as fh:
        return ScoringSpec.from_dict(json.load(fh))


def reference_score(spec: ScoringSpec, p: TrialProtocol) -> float:
    lo, hi = spec.clamp
    return min(hi, max(lo, spec.raw_score(p)))


class ReferenceOracle:
    def __init__(self, spec: ScoringSpec):
        self.spec = spec
        digest = hashlib.sha256(canonical_json(spec.to_dict())).hexdigest()[:12]
        self.descriptor = f"reference:{digest}"

    def score(self, p: TrialProtocol) -> float:
        return reference_score(self.spec, p)


def remote_score(endpoint: str, p: TrialProtocol, timeout: float = 10.0, client: httpx.Client | None = None) -> float:
    body = canonicalize(p)
    headers = {"content-type": "application/json"}
    try:
        if client is not None:
            resp = client.post(endpoint, content=body, headers=headers, timeout=timeout)
        else:
            resp = httpx.post(endpoint, content=body, headers=headers, timeout=timeout)
        resp.raise_for_status()
    except httpx.HTTPError as exc:
        raise Transport(f"{endpoint}: {exc.__class__.__name__}: {exc}") from exc
    try:
        payload = resp.json()
    except ValueError as exc:
        raise BadResponse(f"{endpoint}: response is not JSON") from exc
    if not isinstance(payload, dict) or "probability" not in payload:
        raise BadResponse(f"{endpoint}: missing 'probability'")
    x = payload["probability"]
    if isinstance(x, bool) or not isinstance(x, (int, float)) or not math.isfinite(x) or not 0.0 <= x <= 1.0:
        raise BadResponse(f"{endpoint}: probability {x!r} outside [0, 1]")
    return float(x)


class RemoteOracle:
    def __init__(self, endpoint: str, timeout: float = 10.0, version: str = ""):
        self.endpoint = endpoint
        self.timeout = timeout
        self.descriptor = f"remote:{endpoint}" + (f"@{version}" if version else "")
        self._client = httpx.Client()

    def score(self, p: TrialProtocol) -> float:
        return remote_score(self.endpoint, p, self.timeout, client=self._client)

    def close(self):
        self._client.close()


@dataclass
class ScoreCache:
    entries: dict[tuple[str, str], float] = field(default_factory=dict)
    hits: int = 0
    misses: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def lookup(self, key: tuple[str, str]):
        with self._lock:
            if key in self.entries:
                self.hits += 1
                return self.entries[key]
            self.misses += 1
            return None

    def store(self, key: tuple[str, str], value: float) -> float:
        with self._lock:
            # a concurrent duplicate miss keeps the first stored value
            return self.entries.setdefault(key, value)


def cached_score(cache: ScoreCache, oracle: OutcomeOracle, p: TrialProtocol, digest: str | None = None) -> float:
    key = (digest or hash_protocol(p), oracle.descriptor)
    hit = cache.lookup(key)
    if hit is not None:
        return hit
    return cache.store(key, oracle.score(p))


def oracle_from_uri(uri: str, timeout: float = 10.0):
    """``ref:PATH`` for a reference ScoringSpec file, ``remote:URL`` for an HTTP scorer."""
    kind, _, rest = uri.partition(":")
    if kind == "ref" and rest:
        return ReferenceOracle(load_scoring_spec(rest))
    if kind == "remote" and rest:
        return RemoteOracle(rest, timeout=timeout)
    raise ValueError(f"oracle must be ref:SPEC or remote:URL, got {uri!r}")
