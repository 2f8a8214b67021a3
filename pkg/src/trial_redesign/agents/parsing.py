"""Tolerant parser for XML-style tagged completions.

Models wrap the requested block in prose, forget closing tags, and invent extra tags.
The parser finds the first instance of the expected block, ignores anything it does not
know, and raises only when the block is missing, cut off, or carries an unusable number.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Optional

from ..protocol import ASPECTS
from .types import Category, ClassificationScores, argmax_category


class ParseError(ValueError):
    pass


class NoBlockFound(ParseError):
    pass


class TruncatedBlock(ParseError):
    pass


class MalformedNumber(ParseError):
    pass


_ATTR = re.compile(r'([\w-]+)\s*=\s*"([^"]*)"')


@dataclass(frozen=True)
class Block:
    tag: str
    attrs: dict
    body: str
    end: int


def _open_re(tag: str) -> re.Pattern:
    return re.compile(rf"<({tag})(\s[^<>]*)?>", re.IGNORECASE)


def find_blocks(text: str, tag: str, start: int = 0) -> list[Block]:
    """All non-nested ``<tag ...>...</tag>`` blocks; ``tag`` may be a regex alternation."""
    out = []
    pos = start
    opener = _open_re(tag)
    while True:
        m = opener.search(text, pos)
        if not m:
            return out
        name = m.group(1)
        close = re.compile(rf"</{re.escape(name)}\s*>", re.IGNORECASE).search(text, m.end())
        if not close:
            raise TruncatedBlock(f"<{name}> opened at offset {m.start()} but never closed")
        attrs = dict(_ATTR.findall(m.group(2) or ""))
        out.append(Block(name.lower(), attrs, text[m.end():close.start()], close.end()))
        pos = close.end()


def first_block(text: str, tag: str) -> Block:
    opener = _open_re(tag)
    m = opener.search(text)
    if not m:
        raise NoBlockFound(f"no <{tag}> block")
    return find_blocks(text, tag, m.start())[0]


def field_text(body: str, tag: str) -> Optional[str]:
    try:
        blocks = find_blocks(body, re.escape(tag))
    except TruncatedBlock:
        raise
    if not blocks:
        return None
    return _clean(blocks[0].body)


def _clean(s: str) -> str:
    return re.sub(r"[ \t]*\n[ \t]*", "\n", s).strip()


def _number(raw: Optional[str], name: str, unit: bool = True) -> Optional[float]:
    if raw is None:
        return None
    try:
        x = float(raw.strip().rstrip("%"))
    except ValueError:
        raise MalformedNumber(f"{name}: {raw!r} is not a number") from None
    if unit and not 0.0 <= x <= 1.0:
        raise MalformedNumber(f"{name}: {x} outside [0, 1]")
    return x


def _index(raw: Optional[str]) -> Optional[int]:
    if raw is None or raw.strip().lower() in ("", "none", "null"):
        return None
    try:
        return int(raw)
    except ValueError:
        raise MalformedNumber(f"index {raw!r} is not an integer") from None


# --- classification ---------------------------------------------------------

_SCORE_TAGS = {
    Category.PARTICIPATION_BARRIER: "participation_barrier_score",
    Category.SAFETY_EXCLUSION: "safety_exclusion_score",
    Category.SELECTION_CRITERION: "selection_criterion_score",
    Category.ENRICHMENT_CRITERION: "enrichment_criterion_score",
}


def _classification(block: Block) -> ClassificationScores:
    scores = {}
    for cat, tag in _SCORE_TAGS.items():
        x = _number(field_text(block.body, tag), tag)
        scores[cat] = 0.0 if x is None else x
    return ClassificationScores(
        aspect_name=block.attrs.get("aspect_name", ""),
        index=_index(block.attrs.get("index")),
        scores=scores,
        primary_category=argmax_category(scores),
        reasoning=field_text(block.body, "reasoning") or "",
        stated_primary=field_text(block.body, "primary_category"),
    )


# --- trade-off ----------------------------------------------------------------


@dataclass(frozen=True)
class TradeoffItem:
    aspect_name: str
    index: Optional[int]
    recommendation: str
    confidence: Optional[float]
    strategy: str = ""
    reasoning: str = ""
    impact: Optional[str] = None
    category: Optional[str] = None
    criterion_text: Optional[str] = None
    impacts: dict = field(default_factory=dict)


_IMPACT_TAGS = ("enrollment", "efficacy_signal", "safety", "mechanism_alignment",
                "enrollment_impact", "efficacy_signal_impact", "safety_risk_impact")


def _tradeoff(block: Block) -> TradeoffItem:
    if block.tag == "tradeoff":
        aspect = block.attrs.get("aspect_name", "")
    else:
        aspect = block.tag[: -len("_tradeoff")]
    if aspect not in ASPECTS:
        raise ParseError(f"trade-off block for unknown aspect {aspect!r}")
    rec = (field_text(block.body, "recommendation") or field_text(block.body, "net_recommendation") or "").upper()
    return TradeoffItem(
        aspect_name=aspect,
        index=_index(block.attrs.get("index")),
        recommendation=rec,
        confidence=_number(field_text(block.body, "confidence"), "confidence"),
        strategy=field_text(block.body, "strategy") or "",
        reasoning=field_text(block.body, "reasoning") or "",
        impact=field_text(block.body, "impact") or field_text(block.body, "impact_level"),
        category=field_text(block.body, "category"),
        criterion_text=field_text(block.body, "criterion_text"),
        impacts={t: v for t in _IMPACT_TAGS if (v := field_text(block.body, t)) is not None},
    )


_TRADEOFF_TAG = r"tradeoff|dosage_tradeoff|target_primary_outcome_tradeoff"


# --- augmentations ------------------------------------------------------------


@dataclass(frozen=True)
class DosageVariant:
    value: str
    rationale: str = ""


def _augmentation_items(text: str) -> list[Block]:
    outer = first_block(text, "augmentations")
    return find_blocks(outer.body, "augmentation")


def _augmentations(text: str) -> list[str]:
    out = []
    for item in _augmentation_items(text):
        value = _clean(re.sub(r"<[^<>]+>", "", item.body)) if "<" in item.body else _clean(item.body)
        if value:
            out.append(value)
    return out


def _dosage_augmentations(text: str) -> list[DosageVariant]:
    out = []
    for item in _augmentation_items(text):
        value = field_text(item.body, "dosage_modification")
        if value is None and "<" not in item.body:
            value = _clean(item.body)
        if value:
            out.append(DosageVariant(value, field_text(item.body, "rationale") or ""))
    return out


# --- pass-through context -----------------------------------------------------

_PIVOT_FIELDS = ("trial_type", "endpoint_family", "dose_regimen_direction", "route_change", "proposed_route",
                 "sample_size_direction", "design_structure", "proposed_primary_outcome", "summary")


@dataclass(frozen=True)
class DesignPivots:
    fields: dict

    def get(self, name: str) -> Optional[str]:
        return self.fields.get(name)


def _design_pivots(text: str) -> DesignPivots:
    block = first_block(text, "design_pivots")
    return DesignPivots({k: v for k in _PIVOT_FIELDS if (v := field_text(block.body, k)) is not None})


@dataclass(frozen=True)
class AdverseEventProfile:
    primary_toxicity: dict
    mechanism_consistency: str = ""
    root_cause_hypothesis: str = ""
    critical_gaps: tuple[str, ...] = ()


def _adverse_event_profile(text: str) -> AdverseEventProfile:
    block = first_block(text, "adverse_event_profile")
    tox = {}
    found = find_blocks(block.body, "primary_toxicity")
    if found:
        for k in ("event", "grade", "incidence", "organ_system", "priority", "dose_dependent"):
            v = field_text(found[0].body, k)
            if v is not None:
                tox[k] = v
    gaps: tuple[str, ...] = ()
    gap_blocks = find_blocks(block.body, "critical_gaps")
    if gap_blocks:
        gaps = tuple(_clean(g.body) for g in find_blocks(gap_blocks[0].body, "gap"))
    return AdverseEventProfile(
        primary_toxicity=tox,
        mechanism_consistency=field_text(block.body, "mechanism_consistency") or "",
        root_cause_hypothesis=field_text(block.body, "root_cause_hypothesis") or "",
        critical_gaps=gaps,
    )


@dataclass(frozen=True)
class MechanismAnalysis:
    analysis: str
    missing_enrichment: Optional[str] = None
    confidence: Optional[float] = None


def _mechanism(text: str) -> MechanismAnalysis:
    analysis = field_text(text, "mechanism_analysis")
    missing = field_text(text, "missing_enrichment_criterion")
    if analysis is None and missing is None:
        raise NoBlockFound("no <mechanism_analysis> or <missing_enrichment_criterion> block")
    return MechanismAnalysis(analysis or "", missing or None, _number(field_text(text, "confidence"), "confidence"))


@dataclass(frozen=True)
class Verdict:
    tier: str
    reason: str = ""


def _validation(text: str) -> Verdict:
    block = first_block(text, "validation")
    tier = field_text(block.body, "tier")
    if tier is None:
        raise NoBlockFound("validation block without <tier>")
    return Verdict(tier.upper(), field_text(block.body, "reason") or "")


def _guidance(text: str) -> list[tuple[str, str]]:
    block = first_block(text, "guidance")
    return [(b.attrs.get("key", ""), _clean(b.body)) for b in find_blocks(block.body, "recommendation")]


SCHEMAS = (
    "classification",
    "tradeoff",
    "augmentations",
    "dosage_augmentations",
    "design_pivots",
    "adverse_event_profile",
    "mechanism",
    "validation",
    "guidance",
)


def parse_tagged(text: str, schema: str):
    """Parse the first instance of ``schema`` out of a completion."""
    if schema == "classification":
        return _classification(first_block(text, "classification"))
    if schema == "tradeoff":
        return _tradeoff(first_block(text, _TRADEOFF_TAG))
    if schema == "augmentations":
        return _augmentations(text)
    if schema == "dosage_augmentations":
        return _dosage_augmentations(text)
    if schema == "design_pivots":
        return _design_pivots(text)
    if schema == "adverse_event_profile":
        return _adverse_event_profile(text)
    if schema == "mechanism":
        return _mechanism(text)
    if schema == "validation":
        return _validation(text)
    if schema == "guidance":
        return _guidance(text)
    raise ValueError(f"unknown schema {schema!r}")


def parse_all(text: str, schema: str) -> list:
    """Every instance of a repeatable block schema (classification, tradeoff).

    An empty wrapper such as ``<classifications></classifications>`` yields an empty list;
    text with neither wrapper nor blocks raises NoBlockFound.
    """
    if schema == "classification":
        tag, conv, wrapper = "classification", _classification, "classifications"
    elif schema == "tradeoff":
        tag, conv, wrapper = _TRADEOFF_TAG, _tradeoff, "tradeoffs"
    else:
        raise ValueError(f"{schema!r} is not a repeatable schema")
    blocks = find_blocks(text, tag)
    if not blocks and not _open_re(wrapper).search(text):
        raise NoBlockFound(f"no <{schema}> blocks")
    return [conv(b) for b in blocks]


__all__ = [
    "AdverseEventProfile",
    "DesignPivots",
    "DosageVariant",
    "MalformedNumber",
    "MechanismAnalysis",
    "NoBlockFound",
    "ParseError",
    "SCHEMAS",
    "TradeoffItem",
    "TruncatedBlock",
    "Verdict",
    "parse_all",
    "parse_tagged",
]
