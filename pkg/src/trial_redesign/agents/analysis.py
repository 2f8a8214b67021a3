"""Analysis stage: failure-mode-specific prompt pipeline that yields ranked modification targets."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

from ..memory import LocalMemory, StrategicGuidance, adjust_confidence
from ..modification import ActionType, slot_label
from ..protocol import DOSAGE, LIST_ASPECTS, OUTCOME, AspectRef, FailureMode, TrialProtocol, is_list_aspect
from .parsing import ParseError, TradeoffItem, parse_all, parse_tagged
from .provider import Session
from .templates import render
from .types import Category, ClassificationScores, Impact, ModificationTarget

log = logging.getLogger(__name__)

DEFAULT_CONFIDENCE = 0.5


class EmptyAnalysis(Exception):
    """No modification opportunities were found. A legal terminal outcome, not a crash."""

    def __init__(self, notes=()):
        super().__init__("analysis produced zero targets")
        self.notes = list(notes)


@dataclass
class AnalysisResult:
    targets: list[ModificationTarget]
    notes: list[str] = field(default_factory=list)
    context: dict = field(default_factory=dict)


def render_criteria(p: TrialProtocol) -> str:
    lines = []
    for aspect in LIST_ASPECTS:
        for i, text in enumerate(p.aspect(aspect)):
            lines.append(f'<criterion aspect_name="{aspect}" index="{i}">\n{text}\n</criterion>')
    return "\n".join(lines) or "(no criteria)"


def _classification_summary(classes: dict) -> str:
    if not classes:
        return "(none)"
    return "\n".join(
        f"{aspect}[{idx}]: {c.primary_category.value} ({c.score(c.primary_category):.2f})"
        for (aspect, idx), c in sorted(classes.items(), key=lambda kv: (kv[0][0], kv[0][1] if kv[0][1] is not None else -1))
    )


def _history(local: Optional[LocalMemory]) -> str:
    if local is None or not local.seen_slots:
        return ""
    rows = []
    for slot, s in sorted(local.seen_slots.items()):
        status = "failed" if s.failed else ("improved" if s.successful else "unmeasured")
        rows.append(f"- {slot_label(slot)}: {status}, {len(s.tried)} variant(s) tried")
    return "\n<previously_tried>\n" + "\n".join(rows) + "\n</previously_tried>\n"


_CLASSIFY_NOTE = {
    FailureMode.ENROLLMENT: "",
    FailureMode.SAFETY: "Also flag exclusions that are inadequate for the observed toxicity (score them as SAFETY_EXCLUSION).\n",
    FailureMode.EFFICACY: "Weight ENRICHMENT_CRITERION higher: the trial failed to show efficacy.\n",
}

_TRADEOFF_NOTE = {
    FailureMode.ENROLLMENT: "Prioritization: confidence-based.\n",
    FailureMode.SAFETY: "Prioritization: safety first, toxicity reduction takes priority.\n",
    FailureMode.EFFICACY: "Prioritization: simplicity first (PRIMARY/SECONDARY/TERTIARY tiers).\n",
}


def _reconcile(p: TrialProtocol, aspect: str, index: Optional[int], text: Optional[str]) -> Optional[int]:
    """Locate the criterion a trade-off item refers to; indices go stale once criteria are deleted."""
    items = p.aspect(aspect)
    if text:
        want = text.strip()
        if index is not None and index < len(items) and items[index].strip() == want:
            return index
        for i, item in enumerate(items):
            if item.strip() == want:
                return i
        folded = want.casefold()
        for i, item in enumerate(items):
            if item.strip().casefold() == folded:
                return i
        return None
    if index is not None and index < len(items):
        return index
    return None


def add_slot_tag(category: Optional[Category], strategy: str) -> str:
    key = f"{category.value if category else ''}|{strategy.strip()}"
    return hashlib.sha256(key.encode("utf-8")).hexdigest()[:8]


def _target_from_item(item: TradeoffItem, p: TrialProtocol, classes: dict, notes: list) -> Optional[ModificationTarget]:
    rec = item.recommendation.strip().upper()
    if rec in ("", "KEEP"):
        return None
    try:
        action = ActionType.parse(rec)
    except ValueError:
        notes.append(f"trade-off for {item.aspect_name}: unknown recommendation {rec!r}, skipped")
        return None
    aspect = item.aspect_name
    index = None
    if is_list_aspect(aspect):
        if action is not ActionType.ADD:
            index = _reconcile(p, aspect, item.index, item.criterion_text)
            if index is None:
                notes.append(f"trade-off target {aspect}[{item.index}] not found in current protocol, dropped")
                return None
    elif action is not ActionType.MODIFY:
        notes.append(f"{action.value} is not valid for string aspect {aspect}, dropped")
        return None
    ref = AspectRef(aspect, index)
    original = p.resolve(ref)

    category = None
    if item.category:
        try:
            category = Category.parse(item.category)
        except ValueError:
            notes.append(f"unknown category {item.category!r} for {ref}")
    if category is None and is_list_aspect(aspect):
        cls = classes.get((aspect, index))
        if cls is not None:
            category = cls.primary_category
        else:
            category = Category.ENRICHMENT_CRITERION if action is ActionType.ADD else Category.SELECTION_CRITERION
    impact = Impact.MAJOR
    if item.impact:
        try:
            impact = Impact.parse(item.impact)
        except ValueError:
            pass
    conf = DEFAULT_CONFIDENCE if item.confidence is None else item.confidence
    strategy = item.strategy or item.reasoning
    return ModificationTarget(
        target=ref,
        action=action,
        strategy=strategy,
        confidence=conf,
        impact=impact,
        category=category,
        original=original,
        slot_tag=add_slot_tag(category, strategy) if action is ActionType.ADD else "",
        raw_confidence=conf,
    )


def _mode_rank(t: ModificationTarget, y: FailureMode) -> int:
    if y is FailureMode.SAFETY:
        if t.target.aspect_name == DOSAGE:
            return 0
        return 1 if t.category is Category.SAFETY_EXCLUSION else 2
    if y is FailureMode.EFFICACY:
        return {ActionType.DELETE: 0, ActionType.MODIFY: 1, ActionType.ADD: 2}[t.action]
    return 0


def prioritize(targets: list[ModificationTarget], y: FailureMode, local: Optional[LocalMemory] = None,
               signatures: dict | None = None, calibration: Callable[[float], float] | None = None,
               d: float = 0.2, b: float = 0.1) -> list[ModificationTarget]:
    """Dedupe by slot, calibrate, apply memory adjustments, sort by confidence (mode tie-break, then slot)."""
    best: dict[tuple, ModificationTarget] = {}
    for t in targets:
        cur = best.get(t.slot)
        if cur is None or t.confidence > cur.confidence:
            best[t.slot] = t
    kept = [best[s] for s in best]
    if calibration is not None:
        kept = [t.with_confidence(calibration(t.confidence)) for t in kept]
    kept = adjust_confidence(kept, local, signatures, d=d, b=b)
    return sorted(kept, key=lambda t: (-t.confidence, _mode_rank(t, y), t.slot))


def _stage(session: Session, stage: str, prompt: str, schema: str, notes: list, many: bool = False):
    text = session.call(stage, prompt)
    try:
        return parse_all(text, schema) if many else parse_tagged(text, schema)
    except ParseError as exc:
        notes.append(f"{stage}: unusable output ({exc.__class__.__name__}: {exc}); stage skipped")
        return None


def _base_fields(p: TrialProtocol, y: FailureMode) -> dict:
    return {
        "phase": p.phase.value,
        "condition": p.condition,
        "intervention": p.intervention_name,
        "failure_mode": y.value,
        "outcome": p.target_primary_outcome,
    }


def run_analysis(p: TrialProtocol, y: FailureMode, session: Session, local: LocalMemory | None = None,
                 strategic: StrategicGuidance | None = None, *, signatures: dict | None = None,
                 calibration: Callable[[float], float] | None = None, d: float = 0.2, b: float = 0.1) -> AnalysisResult:
    """Run the prompt pipeline against the incumbent protocol ``p``.

    Strategic guidance is only injected on iteration 1 (``session.iteration``).
    Raises EmptyAnalysis when nothing is proposed.
    """
    notes: list[str] = []
    context: dict = {}
    base = _base_fields(p, y)
    criteria = render_criteria(p)

    profile = ""
    if y is FailureMode.SAFETY:
        prof = _stage(session, "ae_profile", render(
            "ae_profile", adverse_events=p.adverse_events, intervention=p.intervention_name, dosage=p.dosage,
            condition=p.condition), "adverse_event_profile", notes)
        if prof is not None:
            context["adverse_event_profile"] = prof
            tox = prof.primary_toxicity
            profile = (f"\nAdverse event profile: {tox.get('event', '?')} grade {tox.get('grade', '?')} "
                       f"({tox.get('priority', '?')}); root cause: {prof.root_cause_hypothesis}\n")

    classes: dict[tuple, ClassificationScores] = {}
    found = _stage(session, "classification", render(
        "classification", criteria=criteria, mode_note=_CLASSIFY_NOTE[y], **base), "classification", notes, many=True)
    for c in found or []:
        if c.aspect_name in LIST_ASPECTS:
            classes[(c.aspect_name, c.index)] = c
    context["classification"] = classes
    class_text = _classification_summary(classes)

    targets: list[ModificationTarget] = []
    mech = _stage(session, "mechanism", render(
        "mechanism", criteria=criteria, classification=class_text, dosage=p.dosage, profile=profile, **base),
        "mechanism", notes)
    if mech is not None:
        context["mechanism"] = mech
        if mech.missing_enrichment:
            conf = DEFAULT_CONFIDENCE if mech.confidence is None else mech.confidence
            targets.append(ModificationTarget(
                target=AspectRef(LIST_ASPECTS[0]),
                action=ActionType.ADD,
                strategy=mech.missing_enrichment,
                confidence=conf,
                category=Category.ENRICHMENT_CRITERION,
                slot_tag=add_slot_tag(Category.ENRICHMENT_CRITERION, mech.missing_enrichment),
                raw_confidence=conf,
            ))

    guidance = ""
    if strategic and session.iteration == 1:
        guidance = f"\n<strategic_guidance>\n{strategic.render()}\n</strategic_guidance>\n"
    items = _stage(session, "tradeoff", render(
        "tradeoff", criteria=criteria, classification=class_text, dosage=p.dosage,
        mechanism=mech.analysis if mech is not None else "(not available)", profile=profile,
        history=_history(local), guidance=guidance, mode_note=_TRADEOFF_NOTE[y], **base), "tradeoff", notes, many=True)
    for item in items or []:
        t = _target_from_item(item, p, classes, notes)
        if t is not None:
            targets.append(t)

    if y is FailureMode.SAFETY:
        pivots = _stage(session, "design_pivots", render(
            "design_pivots", adverse_events=p.adverse_events, dosage=p.dosage, profile=profile,
            **{k: base[k] for k in ("phase", "condition", "intervention", "outcome")}), "design_pivots", notes)
        if pivots is not None:
            context["design_pivots"] = pivots
            proposed = pivots.get("proposed_primary_outcome")
            if proposed and proposed.strip() != p.target_primary_outcome.strip():
                targets.append(ModificationTarget(
                    target=AspectRef(OUTCOME),
                    action=ActionType.MODIFY,
                    strategy=f"Pivot the primary outcome: {proposed}",
                    confidence=DEFAULT_CONFIDENCE,
                    original=p.target_primary_outcome,
                    raw_confidence=DEFAULT_CONFIDENCE,
                ))

    ranked = prioritize(targets, y, local, signatures, calibration, d=d, b=b)
    for n in notes:
        log.info("iteration %s: %s", session.iteration, n)
    if not ranked:
        raise EmptyAnalysis(notes)
    return AnalysisResult(ranked, notes, context)
