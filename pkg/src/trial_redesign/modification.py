"""Augmentations, modification sets, and applying a modification set to a protocol."""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional

from .protocol import LIST_ASPECTS, AspectRef, TrialProtocol, hash_protocol


class ActionType(enum.Enum):
    DELETE = "DELETE"
    MODIFY = "MODIFY"
    ADD = "ADD"

    @classmethod
    def parse(cls, raw: str) -> "ActionType":
        try:
            return cls(raw.strip().upper())
        except (ValueError, AttributeError):
            raise ValueError(f"unknown action {raw!r}") from None


class Validation(enum.Enum):
    PENDING = "PENDING"
    EXCELLENT = "EXCELLENT"
    GOOD = "GOOD"
    MODERATE = "MODERATE"
    BAD = "BAD"
    BANNED = "BANNED"

    @property
    def passes(self) -> bool:
        return self in PASSING_TIERS

    @classmethod
    def parse(cls, raw: str) -> "Validation":
        try:
            return cls(raw.strip().upper())
        except (ValueError, AttributeError):
            raise ValueError(f"unknown validation tier {raw!r}") from None


PASSING_TIERS = frozenset({Validation.EXCELLENT, Validation.GOOD, Validation.MODERATE})


def augmentation_id(target: AspectRef, action: ActionType, value: Optional[str]) -> str:
    key = "\x1f".join(
        [target.aspect_name, "" if target.index is None else str(target.index), action.value, value or ""]
    )
    return hashlib.sha256(key.encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class Augmentation:
    """One candidate modification of one slot.

    ``original`` is the text the target held when the augmentation was generated; it lets
    stale augmentations be detected once indices shift. ``slot_tag`` separates distinct ADD
    targets on the same list so they can coexist in one candidate.
    """

    target: AspectRef
    action: ActionType
    value: Optional[str] = None
    strategy: str = ""
    confidence: float = 0.5
    validation: Validation = Validation.PENDING
    original: Optional[str] = None
    category: Optional[str] = None
    slot_tag: str = ""
    id: str = field(default="", compare=False)

    def __post_init__(self):
        if self.action is ActionType.DELETE:
            if self.target.index is None:
                raise ValueError("DELETE needs an indexed list target")
            if self.value is not None:
                raise ValueError("DELETE carries no value")
        elif self.value is None:
            raise ValueError(f"{self.action.value} needs a value")
        if self.action is ActionType.ADD and self.target.index is not None:
            raise ValueError("ADD targets carry no index")
        if self.action is ActionType.ADD and not self.target.is_list:
            raise ValueError("ADD only applies to list aspects")
        if self.action is ActionType.MODIFY and self.target.is_list and self.target.index is None:
            raise ValueError("MODIFY of a list aspect needs an index")
        if self.target.is_list and self.value is not None and not self.value.strip():
            raise ValueError("criterion values must be non-empty")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")
        object.__setattr__(self, "id", augmentation_id(self.target, self.action, self.value))

    @property
    def slot(self) -> tuple:
        return slot_key(self.target, self.action, self.slot_tag)

    def with_validation(self, tier: Validation) -> "Augmentation":
        return replace(self, validation=tier)

    def retarget(self, index: Optional[int]) -> "Augmentation":
        return replace(self, target=AspectRef(self.target.aspect_name, index))

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "aspect_name": self.target.aspect_name,
            "index": self.target.index,
            "action": self.action.value,
            "value": self.value,
            "confidence": self.confidence,
            "validation": self.validation.value,
            "strategy": self.strategy,
            "original": self.original,
            "category": self.category,
            "slot_tag": self.slot_tag,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Augmentation":
        aug = cls(
            target=AspectRef(d["aspect_name"], d.get("index")),
            action=ActionType.parse(d["action"]),
            value=d.get("value"),
            strategy=d.get("strategy", ""),
            confidence=float(d.get("confidence", 0.5)),
            validation=Validation.parse(d.get("validation", "PENDING")),
            original=d.get("original"),
            category=d.get("category"),
            slot_tag=d.get("slot_tag", ""),
        )
        if "id" in d and d["id"] != aug.id:
            raise ValueError(f"id {d['id']!r} does not match content (expected {aug.id})")
        return aug


def slot_key(target: AspectRef, action: ActionType, slot_tag: str = "") -> tuple:
    """Sortable slot identity: (aspect, kind, position) with kind 0=indexed, 1=add, 2=string."""
    if action is ActionType.ADD:
        return (target.aspect_name, 1, slot_tag)
    if target.index is not None:
        return (target.aspect_name, 0, target.index)
    return (target.aspect_name, 2, "")


def slot_label(slot: tuple) -> str:
    aspect, kind, pos = slot
    if kind == 0:
        return f"{aspect}[{pos}]"
    if kind == 1:
        return f"{aspect}[+{pos}]"
    return aspect


@dataclass(frozen=True)
class ModificationSet:
    members: tuple[Augmentation, ...] = ()

    def __post_init__(self):
        ordered = tuple(sorted(self.members, key=lambda a: a.id))
        object.__setattr__(self, "members", ordered)

    @classmethod
    def of(cls, augs: Iterable[Augmentation]) -> "ModificationSet":
        return cls(tuple(augs))

    @property
    def ids(self) -> frozenset[str]:
        return frozenset(a.id for a in self.members)

    def __len__(self) -> int:
        return len(self.members)

    def __iter__(self):
        return iter(self.members)

    def __contains__(self, aug_id: str) -> bool:
        return aug_id in self.ids

    def union(self, other: "ModificationSet") -> "ModificationSet":
        return ModificationSet(self.members + other.members)

    def to_list(self) -> list[dict]:
        return [a.to_dict() for a in self.members]


@dataclass(frozen=True)
class Conflict:
    kind: str  # ConflictingSlot | IndexOutOfRange | BannedMember | StaleTarget
    slot: str
    augmentation_ids: tuple[str, ...]


class ModificationError(ValueError):
    def __init__(self, conflict: Conflict):
        super().__init__(f"{conflict.kind} at {conflict.slot}: {', '.join(conflict.augmentation_ids)}")
        self.conflict = conflict


class ConflictingSlot(ModificationError):
    pass


class IndexOutOfRange(ModificationError):
    pass


class BannedMember(ModificationError):
    pass


class StaleTarget(ModificationError):
    pass


_ERRORS = {
    "ConflictingSlot": ConflictingSlot,
    "IndexOutOfRange": IndexOutOfRange,
    "BannedMember": BannedMember,
    "StaleTarget": StaleTarget,
}


def check_conflicts(mods: ModificationSet, base: TrialProtocol) -> list[Conflict]:
    conflicts = []
    by_slot: dict[tuple, list[Augmentation]] = {}
    for aug in mods:
        by_slot.setdefault(aug.slot, []).append(aug)
    for slot, augs in sorted(by_slot.items()):
        if len(augs) > 1:
            conflicts.append(Conflict("ConflictingSlot", slot_label(slot), tuple(a.id for a in augs)))
    for aug in mods:
        label = slot_label(aug.slot)
        if aug.validation is Validation.BANNED:
            conflicts.append(Conflict("BannedMember", label, (aug.id,)))
        if aug.target.index is not None:
            n = len(base.aspect(aug.target.aspect_name))
            if aug.target.index >= n:
                conflicts.append(Conflict("IndexOutOfRange", label, (aug.id,)))
                continue
        if aug.original is not None and aug.action is not ActionType.ADD:
            if base.resolve(aug.target) != aug.original:
                conflicts.append(Conflict("StaleTarget", label, (aug.id,)))
    return conflicts


def apply(base: TrialProtocol, mods: ModificationSet) -> TrialProtocol:
    """Derive ``base ⊕ mods``. Indices in ``mods`` always refer to positions in ``base``."""
    conflicts = check_conflicts(mods, base)
    if conflicts:
        first = conflicts[0]
        raise _ERRORS[first.kind](first)
    out = base
    for aspect in LIST_ASPECTS:
        items = list(base.aspect(aspect))
        deleted = set()
        adds = []
        touched = False
        for aug in mods:
            if aug.target.aspect_name != aspect:
                continue
            touched = True
            if aug.action is ActionType.DELETE:
                deleted.add(aug.target.index)
            elif aug.action is ActionType.MODIFY:
                items[aug.target.index] = aug.value
            else:
                adds.append(aug.value)  # members are already in id order
        if touched:
            kept = [item for i, item in enumerate(items) if i not in deleted]
            out = out.with_aspect(aspect, kept + adds)
    for aug in mods:
        if not aug.target.is_list:
            out = out.with_aspect(aug.target.aspect_name, aug.value)
    return out


def index_maps(base: TrialProtocol, mods: ModificationSet) -> dict[str, list[Optional[int]]]:
    """For each list aspect, old index -> new index after ``apply`` (None when deleted)."""
    maps = {}
    for aspect in LIST_ASPECTS:
        deleted = {a.target.index for a in mods if a.target.aspect_name == aspect and a.action is ActionType.DELETE}
        mapping, shift = [], 0
        for i in range(len(base.aspect(aspect))):
            if i in deleted:
                mapping.append(None)
                shift += 1
            else:
                mapping.append(i - shift)
        maps[aspect] = mapping
    return maps


def rebase(aug: Augmentation, maps: dict[str, list[Optional[int]]]) -> Optional[Augmentation]:
    """Re-index ``aug`` against the protocol produced by the mods that built ``maps``.

    Returns None when the targeted criterion no longer exists.
    """
    if aug.target.index is None:
        return aug
    mapping = maps[aug.target.aspect_name]
    if aug.target.index >= len(mapping) or mapping[aug.target.index] is None:
        return None
    new_index = mapping[aug.target.index]
    return aug if new_index == aug.target.index else aug.retarget(new_index)


@dataclass(frozen=True)
class CandidateProtocol:
    base_hash: str
    mods: ModificationSet
    derived: TrialProtocol
    score: Optional[float] = None
    derived_hash: str = field(default="", compare=False)

    def __post_init__(self):
        if not self.derived_hash:
            object.__setattr__(self, "derived_hash", hash_protocol(self.derived))

    @classmethod
    def build(cls, base: TrialProtocol, mods: ModificationSet, base_hash: str | None = None) -> "CandidateProtocol":
        return cls(base_hash or hash_protocol(base), mods, apply(base, mods))

    def scored(self, score: Optional[float]) -> "CandidateProtocol":
        return replace(self, score=score)
