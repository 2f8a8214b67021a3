"""Trial protocol data model, aspect addressing, canonical serialization and hashing."""

from __future__ import annotations

import copy
import enum
import hashlib
import json
import re
from dataclasses import dataclass, field, replace
from typing import Any, Mapping


class ProtocolError(ValueError):
    """Base class for protocol document errors."""


class MalformedDocument(ProtocolError):
    pass


class MissingField(ProtocolError):
    def __init__(self, key: str):
        super().__init__(f"missing required field {key!r}")
        self.key = key


class BadEnum(ProtocolError):
    def __init__(self, key: str, value: Any):
        super().__init__(f"unknown value {value!r} for {key!r}")
        self.key = key
        self.value = value


class Phase(enum.Enum):
    PHASE1 = "Phase 1"
    PHASE2 = "Phase 2"
    PHASE3 = "Phase 3"
    PHASE4 = "Phase 4"

    @classmethod
    def parse(cls, raw: Any) -> "Phase":
        if isinstance(raw, str):
            m = re.fullmatch(r"\s*phase[\s_]*([1-4])\s*", raw, re.IGNORECASE)
            if m:
                return cls(f"Phase {m.group(1)}")
        raise BadEnum("phase", raw)


class FailureMode(enum.Enum):
    ENROLLMENT = "enrollment"
    SAFETY = "safety"
    EFFICACY = "efficacy"

    @classmethod
    def parse(cls, raw: Any) -> "FailureMode":
        if isinstance(raw, FailureMode):
            return raw
        if isinstance(raw, str):
            token = raw.strip().lower()
            for mode in cls:
                if token == mode.value:
                    return mode
        raise BadEnum("failure_reason", raw)


INCLUSION = "eligibility/inclusion_criteria"
EXCLUSION = "eligibility/exclusion_criteria"
DOSAGE = "dosage"
OUTCOME = "target_primary_outcome"

LIST_ASPECTS = (INCLUSION, EXCLUSION)
STRING_ASPECTS = (DOSAGE, OUTCOME)
ASPECTS = LIST_ASPECTS + STRING_ASPECTS

# on-disk key -> attribute name
_FIELDS = {
    "nct_id": "nct_id",
    "phase": "phase",
    "condition": "condition",
    "intervention/intervention_name": "intervention_name",
    "failure_reason": "failure_reason",
    "adverse_events": "adverse_events",
    INCLUSION: "inclusion_criteria",
    EXCLUSION: "exclusion_criteria",
    DOSAGE: "dosage",
    OUTCOME: "target_primary_outcome",
}
_ALIASES = {"intervention_name": "intervention/intervention_name"}


def is_list_aspect(name: str) -> bool:
    return name in LIST_ASPECTS


@dataclass(frozen=True)
class AspectRef:
    """Address of a modifiable element: a whole string field, or one list criterion."""

    aspect_name: str
    index: int | None = None

    def __post_init__(self):
        if self.aspect_name not in ASPECTS:
            raise ValueError(f"not a modifiable aspect: {self.aspect_name!r}")
        if self.index is not None:
            if not is_list_aspect(self.aspect_name):
                raise ValueError(f"string aspect {self.aspect_name!r} cannot carry an index")
            if isinstance(self.index, bool) or not isinstance(self.index, int) or self.index < 0:
                raise ValueError(f"bad index {self.index!r}")

    @property
    def is_list(self) -> bool:
        return is_list_aspect(self.aspect_name)

    def __str__(self) -> str:
        if self.index is None:
            return self.aspect_name
        return f"{self.aspect_name}[{self.index}]"


@dataclass(frozen=True)
class TrialProtocol:
    nct_id: str
    phase: Phase
    condition: str
    intervention_name: str
    failure_reason: FailureMode
    adverse_events: str
    inclusion_criteria: tuple[str, ...]
    exclusion_criteria: tuple[str, ...]
    dosage: str
    target_primary_outcome: str
    extras: dict[str, Any] = field(default_factory=dict, compare=True)

    def __post_init__(self):
        for name in LIST_ASPECTS:
            items = self.aspect(name)
            if not isinstance(items, tuple):
                object.__setattr__(self, _FIELDS[name], tuple(items))
            for i, item in enumerate(self.aspect(name)):
                if not isinstance(item, str) or not item.strip():
                    raise MalformedDocument(f"empty criterion at {name}[{i}]")

    def aspect(self, name: str) -> tuple[str, ...] | str:
        if name not in ASPECTS:
            raise KeyError(name)
        return getattr(self, _FIELDS[name])

    def resolve(self, ref: AspectRef) -> str | None:
        """Text currently stored at ``ref``; None for an ADD slot (list ref without index)."""
        value = self.aspect(ref.aspect_name)
        if ref.is_list:
            if ref.index is None:
                return None
            if ref.index >= len(value):
                raise IndexError(f"{ref} out of range (len {len(value)})")
            return value[ref.index]
        return value

    def with_aspect(self, name: str, value) -> "TrialProtocol":
        if is_list_aspect(name):
            value = tuple(value)
        return replace(self, **{_FIELDS[name]: value})

    def aspect_texts(self, names=ASPECTS) -> list[tuple[str, str]]:
        """Flattened (aspect_name, text) pairs, list aspects one entry per criterion."""
        out = []
        for name in names:
            value = self.aspect(name)
            if isinstance(value, tuple):
                out.extend((name, item) for item in value)
            else:
                out.append((name, value))
        return out

    def to_document(self) -> dict[str, Any]:
        doc = copy.deepcopy(self.extras)
        for key, attr in _FIELDS.items():
            value = getattr(self, attr)
            if isinstance(value, enum.Enum):
                value = value.value
            elif isinstance(value, tuple):
                value = list(value)
            doc[key] = value
        return doc


def protocol_from_document(doc: Mapping[str, Any]) -> TrialProtocol:
    if not isinstance(doc, Mapping):
        raise MalformedDocument("protocol document must be an object")
    if "trial_data" in doc and isinstance(doc["trial_data"], Mapping):
        # agent output wrapper: trial fields live under trial_data, the rest is carried along
        inner = dict(doc["trial_data"])
        outer = {k: v for k, v in doc.items() if k != "trial_data"}
        doc = {**outer, **inner}
    doc = dict(doc)
    for alias, key in _ALIASES.items():
        if alias in doc and key not in doc:
            doc[key] = doc.pop(alias)
    values: dict[str, Any] = {}
    for key, attr in _FIELDS.items():
        if key not in doc:
            raise MissingField(key)
        values[attr] = doc[key]
    for key in (INCLUSION, EXCLUSION):
        items = values[_FIELDS[key]]
        if not isinstance(items, list) or not all(isinstance(x, str) for x in items):
            raise MalformedDocument(f"{key} must be an array of strings")
        values[_FIELDS[key]] = tuple(items)
    for key in ("nct_id", "condition", "intervention/intervention_name", "adverse_events", DOSAGE, OUTCOME):
        if not isinstance(values[_FIELDS[key]], str):
            raise MalformedDocument(f"{key} must be a string")
    values["phase"] = Phase.parse(values["phase"])
    values["failure_reason"] = FailureMode.parse(values["failure_reason"])
    extras = {k: copy.deepcopy(v) for k, v in doc.items() if k not in _FIELDS}
    return TrialProtocol(**values, extras=extras)


def parse_protocol(text: str | bytes) -> TrialProtocol:
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedDocument(f"not UTF-8: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedDocument(str(exc)) from exc
    return protocol_from_document(doc)


def canonical_json(obj: Any) -> bytes:
    return (json.dumps(obj, sort_keys=True, ensure_ascii=False, indent=2) + "\n").encode("utf-8")


def canonicalize(p: TrialProtocol) -> bytes:
    return canonical_json(p.to_document())


def hash_protocol(p: TrialProtocol) -> str:
    return hashlib.sha256(canonicalize(p)).hexdigest()


def load_protocol(path) -> TrialProtocol:
    with open(path, "rb") as fh:
        return parse_protocol(fh.read())
