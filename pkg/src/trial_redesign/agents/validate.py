"""Validation stage: a judge assigns each pending augmentation a quality tier."""

from __future__ import annotations

import logging
from typing import Callable, Iterable, Optional

from ..modification import Augmentation, Validation
from ..protocol import FailureMode, TrialProtocol
from .parsing import ParseError, parse_tagged
from .provider import ProviderError, Session
from .templates import render

log = logging.getLogger(__name__)

# (augmentation, protocol) -> evidence text or None
EvidenceHook = Callable[[Augmentation, TrialProtocol], Optional[str]]


def build_prompt(aug: Augmentation, p: TrialProtocol, y: FailureMode, evidence: str = "") -> str:
    return render(
        "validate",
        condition=p.condition,
        intervention=p.intervention_name,
        failure_mode=y.value,
        aspect=str(aug.target),
        action=aug.action.value,
        original=aug.original if aug.original is not None else "(new criterion)",
        value=aug.value if aug.value is not None else "(criterion removed)",
        strategy=aug.strategy,
        evidence=f"\nEvidence:\n{evidence}\n" if evidence else "",
    )


def run_validate(augs: Iterable[Augmentation], p: TrialProtocol, y: FailureMode, session: Session,
                 evidence: EvidenceHook | None = None, notes: list | None = None) -> list[Augmentation]:
    """Label every pending augmentation. Failures leave it Pending, which never passes."""
    notes = notes if notes is not None else []
    out = []
    for aug in augs:
        if aug.validation is not Validation.PENDING:
            out.append(aug)
            continue
        ev = evidence(aug, p) if evidence is not None else None
        try:
            text = session.call("validate", build_prompt(aug, p, y, ev or ""))
            tier = Validation.parse(parse_tagged(text, "validation").tier)
        except ProviderError as exc:
            notes.append(f"validate {aug.id}: provider failure ({exc}); left pending")
            out.append(aug)
            continue
        except (ParseError, ValueError) as exc:
            notes.append(f"validate {aug.id}: unusable verdict ({exc}); left pending")
            out.append(aug)
            continue
        if tier is Validation.PENDING:
            notes.append(f"validate {aug.id}: judge returned PENDING; left pending")
        out.append(aug.with_validation(tier))
    for msg in notes:
        log.info("iteration %s: %s", session.iteration, msg)
    return out


def passing(augs: Iterable[Augmentation]) -> list[Augmentation]:
    return [a for a in augs if a.validation.passes]
