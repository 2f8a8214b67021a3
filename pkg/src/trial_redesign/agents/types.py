from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import Optional

from ..modification import ActionType, slot_key
from ..protocol import AspectRef


class Category(enum.Enum):
    # declaration order is the argmax tie-break order
    PARTICIPATION_BARRIER = "PARTICIPATION_BARRIER"
    SAFETY_EXCLUSION = "SAFETY_EXCLUSION"
    SELECTION_CRITERION = "SELECTION_CRITERION"
    ENRICHMENT_CRITERION = "ENRICHMENT_CRITERION"

    @classmethod
    def parse(cls, raw: str) -> "Category":
        token = raw.strip().upper().replace(" ", "_")
        if not token.endswith(("_BARRIER", "_EXCLUSION", "_CRITERION")):
            token = {"PARTICIPATION": "PARTICIPATION_BARRIER", "SAFETY": "SAFETY_EXCLUSION",
                     "SELECTION": "SELECTION_CRITERION", "ENRICHMENT": "ENRICHMENT_CRITERION"}.get(token, token)
        return cls(token)


class Impact(enum.Enum):
    MAJOR = "MAJOR"
    MINOR = "MINOR"
    NOT_RELATED = "NOT_RELATED"

    @classmethod
    def parse(cls, raw: str) -> "Impact":
        return cls(raw.strip().upper().replace(" ", "_"))


@dataclass(frozen=True)
class ClassificationScores:
    aspect_name: str
    index: Optional[int]
    scores: dict  # Category -> float
    primary_category: Category
    reasoning: str = ""
    stated_primary: Optional[str] = None

    def score(self, category: Category) -> float:
        return self.scores.get(category, 0.0)


def argmax_category(scores: dict) -> Category:
    best = None
    for cat in Category:
        if best is None or scores.get(cat, 0.0) > scores.get(best, 0.0):
            best = cat
    return best


@dataclass(frozen=True)
class ModificationTarget:
    target: AspectRef
    action: ActionType
    strategy: str
    confidence: float
    impact: Impact = Impact.MAJOR
    category: Optional[Category] = None
    original: Optional[str] = None
    slot_tag: str = ""
    raw_confidence: Optional[float] = None

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")
        if self.target.is_list and self.category is None:
            raise ValueError("eligibility targets need a category")

    @property
    def slot(self) -> tuple:
        return slot_key(self.target, self.action, self.slot_tag)

    @property
    def pattern_key(self) -> str:
        """Key for cross-trial statistics: the taxonomy category, or the aspect name for string aspects."""
        return self.category.value if self.category is not None else self.target.aspect_name

    def with_confidence(self, c: float) -> "ModificationTarget":
        return replace(self, confidence=min(1.0, max(0.0, c)))

    def to_dict(self) -> dict:
        return {
            "aspect_name": self.target.aspect_name,
            "index": self.target.index,
            "action": self.action.value,
            "strategy": self.strategy,
            "confidence": self.confidence,
            "raw_confidence": self.raw_confidence,
            "impact": self.impact.value,
            "category": self.category.value if self.category else None,
            "slot_tag": self.slot_tag,
        }
