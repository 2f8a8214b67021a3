"""Text-completion providers: a deterministic scripted playbook and an HTTP chat client."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Optional, Protocol

import httpx


class ProviderError(RuntimeError):
    """A completion call failed; callers may retry."""


class ScriptMiss(LookupError):
    """The playbook has no entry for a call. Never retried or swallowed."""


@dataclass(frozen=True)
class Completion:
    text: str
    tokens_in: int
    tokens_out: int


class Provider(Protocol):
    def complete(self, prompt: str, budget: int, *, stage: str = "", iteration: int = 0) -> Completion: ...


def prompt_digest(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


def _count_tokens(text: str) -> int:
    return len(text.split())


@dataclass
class Playbook:
    """Canned completions keyed by stage and iteration.

    Lookup order: exact (stage, iteration, prompt digest); then ``contains`` rules whose
    substring occurs in the prompt (iteration-specific before any-iteration, file order
    within each); then the (stage, iteration) fallback; then the (stage, any) fallback.
    An entry is either a completion string or an object with ``text`` and optional
    ``tokens_in`` / ``tokens_out`` overrides.
    """

    exact: dict[tuple[str, int, str], object] = field(default_factory=dict)
    rules: list[dict] = field(default_factory=list)
    fallback: dict[tuple[str, Optional[int]], object] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, doc: dict) -> "Playbook":
        pb = cls()
        for e in doc.get("exact", []):
            pb.exact[(e["stage"], int(e["iteration"]), e["digest"])] = e["completion"]
        for e in doc.get("rules", []):
            pb.rules.append(dict(e))
        for e in doc.get("fallback", []):
            it = e.get("iteration")
            pb.fallback[(e["stage"], None if it in (None, "*") else int(it))] = e["completion"]
        return pb

    def to_dict(self) -> dict:
        return {
            "exact": [
                {"stage": s, "iteration": i, "digest": d, "completion": c} for (s, i, d), c in self.exact.items()
            ],
            "rules": list(self.rules),
            "fallback": [
                {"stage": s, "iteration": "*" if i is None else i, "completion": c}
                for (s, i), c in self.fallback.items()
            ],
        }

    def lookup(self, stage: str, iteration: int, prompt: str):
        entry = self.exact.get((stage, iteration, prompt_digest(prompt)))
        if entry is not None:
            return entry
        for want_iteration in (iteration, None):
            for rule in self.rules:
                it = rule.get("iteration")
                it = None if it in (None, "*") else int(it)
                if rule["stage"] == stage and it == want_iteration and rule["contains"] in prompt:
                    return rule["completion"]
        for key in ((stage, iteration), (stage, None)):
            if key in self.fallback:
                return self.fallback[key]
        raise ScriptMiss(f"no playbook entry for stage={stage!r} iteration={iteration}")


def load_playbook(path) -> Playbook:
    with open(path, encoding="utf-8") as fh:
        return Playbook.from_dict(json.load(fh))


class ScriptedProvider:
    def __init__(self, playbook: Playbook, name: str = "scripted"):
        self.playbook = playbook
        self.name = name

    def complete(self, prompt: str, budget: int, *, stage: str = "", iteration: int = 0) -> Completion:
        entry = self.playbook.lookup(stage, iteration, prompt)
        if isinstance(entry, dict):
            if entry.get("error"):
                raise ProviderError(entry["error"])
            text = entry["text"]
            return Completion(text, int(entry.get("tokens_in", _count_tokens(prompt))), int(entry.get("tokens_out", _count_tokens(text))))
        return Completion(entry, _count_tokens(prompt), _count_tokens(entry))


class HttpChatProvider:
    """Chat-completions style endpoint (OpenAI-compatible wire format)."""

    def __init__(self, model: str, base_url: str, api_key: str = "", timeout: float = 60.0, temperature: float = 0.0, seed: int | None = None):
        self.model = model
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key
        self.timeout = timeout
        self.temperature = temperature
        self.seed = seed
        self.name = f"http:{model}"

    @classmethod
    def from_env(cls, seed: int | None = None) -> "HttpChatProvider":
        return cls(
            model=os.environ.get("REDESIGN_MODEL", "gpt-4o-mini"),
            base_url=os.environ.get("REDESIGN_BASE_URL", "https://api.openai.com/v1"),
            api_key=os.environ.get("REDESIGN_API_KEY", ""),
            seed=seed,
        )

    def complete(self, prompt: str, budget: int, *, stage: str = "", iteration: int = 0) -> Completion:
        body = {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "max_tokens": budget,
            "temperature": self.temperature,
        }
        if self.seed is not None:
            body["seed"] = self.seed
        headers = {"authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        try:
            resp = httpx.post(f"{self.base_url}/chat/completions", json=body, headers=headers, timeout=self.timeout)
            resp.raise_for_status()
            payload = resp.json()
            text = payload["choices"][0]["message"]["content"]
        except (httpx.HTTPError, ValueError, KeyError, IndexError, TypeError) as exc:
            raise ProviderError(f"{self.name}: {exc}") from exc
        usage = payload.get("usage") or {}
        return Completion(
            text,
            int(usage.get("prompt_tokens", _count_tokens(prompt))),
            int(usage.get("completion_tokens", _count_tokens(text))),
        )


class RecordingProvider:
    """Wraps a provider and records every call as an exact playbook entry for later replay."""

    def __init__(self, inner: Provider):
        self.inner = inner
        self.playbook = Playbook()

    def complete(self, prompt: str, budget: int, *, stage: str = "", iteration: int = 0) -> Completion:
        c = self.inner.complete(prompt, budget, stage=stage, iteration=iteration)
        self.playbook.exact[(stage, iteration, prompt_digest(prompt))] = {
            "text": c.text,
            "tokens_in": c.tokens_in,
            "tokens_out": c.tokens_out,
        }
        return c


@dataclass
class CallRecord:
    stage: str
    iteration: int
    tokens_in: int
    tokens_out: int
    ok: bool
    prompt: str = ""
    completion: str = ""

    def to_dict(self, with_text: bool) -> dict:
        d = {"stage": self.stage, "iteration": self.iteration, "tokens_in": self.tokens_in, "tokens_out": self.tokens_out, "ok": self.ok}
        if with_text:
            d["prompt"] = self.prompt
            d["completion"] = self.completion
        return d


@dataclass
class Session:
    """Per-run call context: the provider, retry policy, and the call log used for cost and audit."""

    provider: Provider
    budget: int = 1024
    max_retries: int = 2
    iteration: int = 0
    calls: list[CallRecord] = field(default_factory=list)

    def call(self, stage: str, prompt: str) -> str:
        last: Exception | None = None
        for attempt in range(self.max_retries + 1):
            text = prompt if attempt == 0 else f"{prompt}\n\n[retry {attempt}: answer strictly in the requested output format]"
            try:
                c = self.provider.complete(text, self.budget, stage=stage, iteration=self.iteration)
            except ProviderError as exc:
                self.calls.append(CallRecord(stage, self.iteration, 0, 0, False, text, ""))
                last = exc
                continue
            self.calls.append(CallRecord(stage, self.iteration, c.tokens_in, c.tokens_out, True, text, c.text))
            return c.text
        raise ProviderError(f"{stage}: gave up after {self.max_retries + 1} attempts: {last}")


def provider_from_uri(uri: str, seed: int | None = None):
    """``scripted:PLAYBOOK`` or ``http`` (settings from REDESIGN_* env vars)."""
    kind, _, rest = uri.partition(":")
    if kind == "scripted" and rest:
        return ScriptedProvider(load_playbook(rest), name=f"scripted:{os.path.basename(rest)}")
    if kind == "http":
        return HttpChatProvider.from_env(seed=seed)
    raise ValueError(f"provider must be scripted:PLAYBOOK or http, got {uri!r}")
