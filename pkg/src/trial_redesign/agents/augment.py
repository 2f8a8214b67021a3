"""Augmentation stage: turn modification targets into concrete candidate values."""

from __future__ import annotations

import logging
from typing import Callable, Iterable, Optional, Union

from ..memory import TacticalExemplars, TIERS
from ..modification import ActionType, Augmentation
from ..protocol import DOSAGE, OUTCOME, FailureMode, TrialProtocol
from .parsing import ParseError, parse_tagged
from .provider import ProviderError, Session
from .templates import render
from .types import ModificationTarget

log = logging.getLogger(__name__)

DELETE_VALUE = "<delete>"


class AllTargetsEmpty(Exception):
    """Every target was skipped or produced no usable variant."""


_FOCUS = {
    FailureMode.ENROLLMENT: "Enrich participation",
    FailureMode.SAFETY: "Tighten safety exclusions",
    FailureMode.EFFICACY: "Add biomarker enrichment",
}

_OUTCOME_FOCUS = {
    FailureMode.ENROLLMENT: "Keep the endpoint measurable in a broader population",
    FailureMode.SAFETY: "Add safety qualifications",
    FailureMode.EFFICACY: "Switch to a feasible endpoint",
}


def few_shot_section(tactical: Optional[TacticalExemplars], slot: tuple) -> str:
    if tactical is None:
        return ""
    tiers = tactical.tiers_for(slot)
    if not any(tiers.values()):
        return ""
    lines = ["", "<few_shot_examples>", "Previous iteration examples for THIS EXACT criterion:", ""]
    for tier in TIERS:
        values = sorted(tiers[tier])
        if values:
            lines.append(f"{tier.value}:")
            lines.extend(f'  - "{v}"' for v in values)
            lines.append("")
    lines.append("Generate variations that learn from EXCELLENT/GOOD patterns,")
    lines.append("avoid BAD patterns, and NEVER replicate BANNED augmentations.")
    lines.append("</few_shot_examples>")
    lines.append("")
    return "\n".join(lines)


def dosage_template(y: FailureMode) -> str:
    # enrollment has no dosage strategy of its own; a lighter regimen is the closer fit
    return "augment_dosage_escalate" if y is FailureMode.EFFICACY else "augment_dosage_reduce"


def build_prompt(t: ModificationTarget, p: TrialProtocol, y: FailureMode, n: int, few_shot: str) -> tuple[str, str]:
    """(prompt, parse schema) for one target."""
    aspect = t.target.aspect_name
    if aspect == DOSAGE:
        name = dosage_template(y)
        fields = dict(original=p.dosage, strategy=t.strategy, n=n, few_shot=few_shot)
        if name == "augment_dosage_reduce":
            fields["adverse_events"] = p.adverse_events
        return render(name, **fields), "dosage_augmentations"
    if aspect == OUTCOME:
        return render("augment_outcome", original=p.target_primary_outcome, strategy=t.strategy, failure_mode=y.value,
                      focus=_OUTCOME_FOCUS[y], n=n, few_shot=few_shot), "augmentations"
    if t.action is ActionType.ADD:
        existing = "\n".join(f"- {c}" for c in p.aspect(aspect)) or "(none)"
        return render("augment_add", aspect=aspect, category=t.category.value if t.category else "", strategy=t.strategy,
                      failure_mode=y.value, focus=_FOCUS[y], existing=existing, n=n, few_shot=few_shot), "augmentations"
    return render("augment_criterion", aspect=aspect, original=p.resolve(t.target), action=t.action.value,
                  strategy=t.strategy, failure_mode=y.value, focus=_FOCUS[y], n=n, few_shot=few_shot), "augmentations"


def _make(t: ModificationTarget, p: TrialProtocol, value: Optional[str]) -> Augmentation:
    return Augmentation(
        target=t.target,
        action=t.action,
        value=value,
        strategy=t.strategy,
        confidence=t.confidence,
        original=p.resolve(t.target) if t.action is not ActionType.ADD else None,
        category=t.category.value if t.category else None,
        slot_tag=t.slot_tag,
    )


def run_augment(targets: Iterable[ModificationTarget], p: TrialProtocol, y: FailureMode, session: Session,
                tactical: TacticalExemplars | None = None, n: Union[int, Callable[[ModificationTarget], int]] = 3,
                notes: list | None = None) -> list[Augmentation]:
    """Generate up to ``n`` distinct variants per target, in target order.

    DELETE targets need no model call. Variants equal to a Banned exemplar, to the current
    value, or (for ADD) to an existing criterion are dropped.
    """
    notes = notes if notes is not None else []
    targets = list(targets)
    out: list[Augmentation] = []
    for t in targets:
        banned = tactical.banned(t.slot) if tactical is not None else set()
        if t.action is ActionType.DELETE:
            if DELETE_VALUE in banned:
                notes.append(f"augment {t.target}: deletion is banned")
                continue
            out.append(_make(t, p, None))
            continue
        want = n(t) if callable(n) else n
        if want < 1:
            raise ValueError("n must be >= 1")
        prompt, schema = build_prompt(t, p, y, want, few_shot_section(tactical, t.slot))
        try:
            text = session.call("augment", prompt)
        except ProviderError as exc:
            notes.append(f"augment {t.target}: provider failure ({exc}); target skipped")
            continue
        try:
            parsed = parse_tagged(text, schema)
        except ParseError as exc:
            notes.append(f"augment {t.target}: unusable output ({exc.__class__.__name__}); target skipped")
            continue
        values = [v.value if hasattr(v, "value") else v for v in parsed]
        current = p.resolve(t.target)
        existing = set(p.aspect(t.target.aspect_name)) if t.action is ActionType.ADD else set()
        seen: set[str] = set()
        kept = 0
        for value in values:
            value = value.strip()
            if not value or value in seen:
                continue
            seen.add(value)
            if value in banned:
                notes.append(f"augment {t.target}: dropped banned variant {value!r}")
                continue
            if value == current or value in existing:
                continue
            out.append(_make(t, p, value))
            kept += 1
            if kept >= want:
                break
    if targets and not out:
        raise AllTargetsEmpty("no usable variants for any target")
    for msg in notes:
        log.info("iteration %s: %s", session.iteration, msg)
    return out
