"""Reader for the JSON document the agent pipeline emits (trial data, reasoning trace, aspect list)."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any

from ..modification import ActionType, Augmentation
from ..protocol import AspectRef, TrialProtocol, is_list_aspect, protocol_from_document
from .types import Category, ClassificationScores, Impact, ModificationTarget, argmax_category

_SCORE_KEYS = {
    Category.PARTICIPATION_BARRIER: "participation_barrier_score",
    Category.SAFETY_EXCLUSION: "safety_exclusion_score",
    Category.SELECTION_CRITERION: "selection_criterion_score",
    Category.ENRICHMENT_CRITERION: "enrichment_criterion_score",
}


@dataclass
class AgentOutput:
    protocol: TrialProtocol
    classifications: list[ClassificationScores]
    targets: list[ModificationTarget]
    augmentations: list[Augmentation]
    trial_context: dict = field(default_factory=dict)
    reasoning: dict = field(default_factory=dict)


def _classification(d: dict) -> ClassificationScores:
    scores = {cat: float(d[key]) for cat, key in _SCORE_KEYS.items() if key in d}
    stated = d.get("primary_category")
    # entries without scores carry only the stated category
    primary = argmax_category(scores) if scores else Category.parse(stated)
    return ClassificationScores(d["aspect_name"], d.get("aspect_index"), scores, primary, d.get("reasoning", ""), stated)


def read_agent_output(doc: dict | str) -> AgentOutput:
    if isinstance(doc, str):
        doc = json.loads(doc)
    protocol = protocol_from_document(doc["trial_data"])
    reasoning = dict(doc.get("react_reasoning", {}))
    classes = [_classification(c) for c in reasoning.get("step1_classification", [])]
    by_slot = {(c.aspect_name, c.index): c for c in classes}

    targets, augs = [], []
    for entry in doc.get("aspect_li", []):
        aspect = entry["aspect_name"]
        analysis = entry.get("analysis", {})
        action = ActionType.parse(analysis["action_type"])
        index = entry.get("aspect_index")
        ref = AspectRef(aspect, index if is_list_aspect(aspect) and action is not ActionType.ADD else None)
        category = None
        if is_list_aspect(aspect):
            cls = by_slot.get((aspect, index))
            category = cls.primary_category if cls else (
                Category.ENRICHMENT_CRITERION if action is ActionType.ADD else Category.SELECTION_CRITERION)
        conf = float(analysis.get("confidence", 0.5))
        original = protocol.resolve(ref) if action is not ActionType.ADD else None
        tgt = ModificationTarget(
            target=ref,
            action=action,
            strategy=analysis.get("strategy", ""),
            confidence=conf,
            impact=Impact.parse(analysis.get("impact_level", "MAJOR")),
            category=category,
            original=original,
            raw_confidence=conf,
        )
        targets.append(tgt)
        values: list[Any] = entry.get("augment", {}).get("augment_val_li", [])
        if action is ActionType.DELETE:
            values = [None]
        for v in values:
            augs.append(Augmentation(ref, action, v, tgt.strategy, conf, original=original,
                                     category=category.value if category else None))
    return AgentOutput(protocol, classes, targets, augs, dict(doc.get("trial_context", {})), reasoning)
