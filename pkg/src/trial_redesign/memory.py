"""Within-run and cross-run memory: rewards, exemplars, redesign pool, and global statistics."""

from __future__ import annotations

import copy
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Iterable, Optional

from .explore import RewardRecord
from .modification import ActionType, Augmentation, Validation, rebase, slot_label
from .protocol import FailureMode, canonical_json

SCHEMA_VERSION = 1

TIERS = (Validation.EXCELLENT, Validation.GOOD, Validation.MODERATE, Validation.BAD, Validation.BANNED)


class MemoryFormatError(ValueError):
    pass


def nearest_rank(values: Iterable[float], pct: float) -> float:
    """Nearest-rank percentile: the ceil(pct/100 * N)-th smallest value."""
    xs = sorted(values)
    if not xs:
        raise ValueError("percentile of an empty sample")
    k = max(1, math.ceil(pct / 100.0 * len(xs)))
    return xs[k - 1]


def round_half_up(x: float) -> int:
    return int(Decimal(repr(x)).quantize(Decimal(1), rounding=ROUND_HALF_UP))


def pattern_key(aug: Augmentation) -> str:
    return aug.category if aug.category else aug.target.aspect_name


def action_key(action: ActionType) -> str:
    return f"action:{action.value}"


# --- local memory ---------------------------------------------------------------


@dataclass
class SlotSummary:
    tried: list[str] = field(default_factory=list)
    best_r: Optional[float] = None
    worst_r: Optional[float] = None
    n_attributed: int = 0

    @property
    def failed(self) -> bool:
        return self.n_attributed > 0 and self.best_r <= 0

    @property
    def successful(self) -> bool:
        return self.best_r is not None and self.best_r > 0

    def observe(self, value: str, r: Optional[float]) -> None:
        if value not in self.tried:
            self.tried.append(value)
        if r is None:
            return
        self.n_attributed += 1
        self.best_r = r if self.best_r is None else max(self.best_r, r)
        self.worst_r = r if self.worst_r is None else min(self.worst_r, r)

    def to_dict(self) -> dict:
        return {"tried": list(self.tried), "best_r": self.best_r, "worst_r": self.worst_r,
                "n_attributed": self.n_attributed, "failed": self.failed}


@dataclass
class RedesignPool:
    entries: dict[str, tuple[Augmentation, float]] = field(default_factory=dict)

    def add(self, aug: Augmentation, r: float) -> None:
        if not r > 0:
            raise ValueError("pool entries need r > 0")
        self.entries[aug.id] = (aug, r)

    def augmentations(self) -> list[Augmentation]:
        return [self.entries[k][0] for k in sorted(self.entries)]

    def __len__(self) -> int:
        return len(self.entries)

    def copy(self) -> "RedesignPool":
        return RedesignPool(dict(self.entries))

    def rebased(self, maps) -> "RedesignPool":
        out = RedesignPool()
        for aug, r in self.entries.values():
            moved = rebase(aug, maps)
            if moved is not None:
                out.entries[moved.id] = (moved, r)
        return out

    def to_list(self) -> list[dict]:
        return [{**self.entries[k][0].to_dict(), "r": self.entries[k][1]} for k in sorted(self.entries)]


def _rebase_slot(slot: tuple, maps) -> Optional[tuple]:
    aspect, kind, pos = slot
    if kind != 0:
        return slot
    mapping = maps.get(aspect, [])
    if pos >= len(mapping) or mapping[pos] is None:
        return None
    return (aspect, kind, mapping[pos])


@dataclass
class TacticalExemplars:
    """Per-slot tiered example values. A value sits in exactly one tier of its slot."""

    slots: dict[tuple, dict[str, Validation]] = field(default_factory=dict)

    def record(self, slot: tuple, value: str, tier: Validation) -> None:
        if tier is Validation.PENDING:
            return
        tiers = self.slots.setdefault(slot, {})
        if tiers.get(value) is Validation.BANNED:
            return
        tiers[value] = tier

    def merge(self, other: "TacticalExemplars") -> None:
        for slot, tiers in other.slots.items():
            for value, tier in tiers.items():
                self.record(slot, value, tier)

    def tiers_for(self, slot: tuple) -> dict[Validation, list[str]]:
        out = {t: [] for t in TIERS}
        for value, tier in self.slots.get(slot, {}).items():
            out[tier].append(value)
        return out

    def banned(self, slot: tuple) -> set[str]:
        return {v for v, t in self.slots.get(slot, {}).items() if t is Validation.BANNED}

    def is_empty(self) -> bool:
        return not any(self.slots.values())

    def rebased(self, maps) -> "TacticalExemplars":
        out = TacticalExemplars()
        for slot, tiers in self.slots.items():
            moved = _rebase_slot(slot, maps)
            if moved is not None:
                for value, tier in tiers.items():
                    out.record(moved, value, tier)
        return out

    def copy(self) -> "TacticalExemplars":
        return TacticalExemplars({s: dict(t) for s, t in self.slots.items()})

    def to_dict(self) -> dict:
        return {
            slot_label(slot): {t.value: sorted(v for v, tt in tiers.items() if tt is t) for t in TIERS}
            for slot, tiers in sorted(self.slots.items())
        }


@dataclass(frozen=True)
class GuidanceEntry:
    key: str  # category, or aspect name for string aspects
    text: str
    support: dict

    def to_dict(self) -> dict:
        return {"key": self.key, "text": self.text, "support": dict(self.support)}

    @classmethod
    def from_dict(cls, d: dict) -> "GuidanceEntry":
        return cls(d["key"], d["text"], dict(d.get("support", {})))


@dataclass
class StrategicGuidance:
    entries: list[GuidanceEntry] = field(default_factory=list)

    def __bool__(self) -> bool:
        return bool(self.entries)

    def render(self) -> str:
        return "\n".join(f"- [{e.key}] {e.text}" for e in self.entries)

    def upsert(self, entry: GuidanceEntry) -> None:
        self.entries = sorted([e for e in self.entries if e.key != entry.key] + [entry], key=lambda e: e.key)

    def to_list(self) -> list[dict]:
        return [e.to_dict() for e in self.entries]


@dataclass
class IterationEntry:
    iteration: int
    rewards: list[RewardRecord]
    strategic: StrategicGuidance
    tactical: TacticalExemplars
    pool_snapshot: list[str]  # augmentation ids

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "rewards": [r.to_dict() for r in self.rewards],
            "strategic": self.strategic.to_list(),
            "tactical": self.tactical.to_dict(),
            "pool_snapshot": list(self.pool_snapshot),
        }


@dataclass
class LocalMemory:
    entries: list[IterationEntry] = field(default_factory=list)
    seen_slots: dict[tuple, SlotSummary] = field(default_factory=dict)
    tactical: TacticalExemplars = field(default_factory=TacticalExemplars)
    pool: RedesignPool = field(default_factory=RedesignPool)

    def record(self, t: int, rewards: list[RewardRecord], distilled: "Distilled") -> None:
        if self.entries and t <= self.entries[-1].iteration:
            raise ValueError(f"iteration {t} is not after {self.entries[-1].iteration}")
        for rec in rewards:
            aug = rec.augmentation
            self.seen_slots.setdefault(aug.slot, SlotSummary()).observe(aug.value or "<delete>", rec.r)
        self.tactical.merge(distilled.tactical)
        for aug, r in distilled.pool_delta:
            self.pool.add(aug, r)
        self.entries.append(IterationEntry(t, list(rewards), distilled.strategic, distilled.tactical,
                                           sorted(self.pool.entries)))

    def rebase(self, maps) -> None:
        """Re-index everything after the incumbent changed (deleted criteria vanish)."""
        seen = {}
        for slot, summary in self.seen_slots.items():
            moved = _rebase_slot(slot, maps)
            if moved is not None:
                seen[moved] = summary
        self.seen_slots = seen
        self.tactical = self.tactical.rebased(maps)
        self.pool = self.pool.rebased(maps)

    def attributed(self) -> list[RewardRecord]:
        return [r for e in self.entries for r in e.rewards if r.attributable]

    def to_dict(self) -> dict:
        return {
            "entries": [e.to_dict() for e in self.entries],
            "seen_slots": {slot_label(s): v.to_dict() for s, v in sorted(self.seen_slots.items())},
            "pool": self.pool.to_list(),
        }


# --- distillation -----------------------------------------------------------------


@dataclass
class Distilled:
    pool_delta: list[tuple[Augmentation, float]]
    strategic: StrategicGuidance
    tactical: TacticalExemplars


def reward_tier(r: Optional[float], p75: Optional[float]) -> Validation:
    if r is None or r == 0:
        return Validation.MODERATE
    if r < 0:
        return Validation.BAD
    return Validation.EXCELLENT if p75 is not None and r >= p75 else Validation.GOOD


def distill(rewards: list[RewardRecord], validations: Iterable[Augmentation] = ()) -> Distilled:
    positive = [rec.r for rec in rewards if rec.r is not None and rec.r > 0]
    p75 = nearest_rank(positive, 75) if positive else None
    pool_delta = [(rec.augmentation, rec.r) for rec in rewards
                  if rec.r is not None and rec.r > 0 and rec.r >= p75]

    tactical = TacticalExemplars()
    for aug in validations:
        if aug.validation in (Validation.BANNED, Validation.BAD):
            tactical.record(aug.slot, aug.value or "<delete>", aug.validation)
    for rec in rewards:
        aug = rec.augmentation
        tactical.record(aug.slot, aug.value or "<delete>", reward_tier(rec.r, p75))

    strategic = StrategicGuidance()
    by_key: dict[str, list[RewardRecord]] = {}
    for rec in rewards:
        if rec.r is not None:
            by_key.setdefault(pattern_key(rec.augmentation), []).append(rec)
    for key in sorted(by_key):
        recs = by_key[key]
        strategic.upsert(_template_entry(key, recs))
    return Distilled(pool_delta, strategic, tactical)


def _best_action(recs: list[RewardRecord]) -> str:
    sums: dict[str, list[float]] = {}
    for rec in recs:
        sums.setdefault(rec.augmentation.action.value, []).append(rec.r)
    return max(sorted(sums), key=lambda a: math.fsum(sums[a]) / len(sums[a]))


def _template_entry(key: str, recs: list[RewardRecord]) -> GuidanceEntry:
    rs = [rec.r for rec in recs]
    mean = math.fsum(rs) / len(rs)
    action = _best_action(recs)
    n_pos = sum(r > 0 for r in rs)
    verb = "favour" if mean > 0 else "avoid"
    text = f"{verb} {action} on {key} ({n_pos}/{len(rs)} positive, mean reward {mean:+.4f})"
    return GuidanceEntry(key, text, {"count": len(rs), "mean_r": mean, "best_action": action})


# --- confidence and generation count --------------------------------------------------


@dataclass
class Signature:
    n: int = 0
    mean: float = 0.0
    m2: float = 0.0
    successes: int = 0

    def update(self, r: float) -> None:
        # Welford
        self.n += 1
        delta = r - self.mean
        self.mean += delta / self.n
        self.m2 += delta * (r - self.mean)
        if r > 0:
            self.successes += 1

    @property
    def var(self) -> float:
        """Population variance."""
        return self.m2 / self.n if self.n else 0.0

    @property
    def success_rate(self) -> float:
        return self.successes / self.n if self.n else 0.0

    def smoothed_rate(self) -> float:
        return (self.successes + 1) / (self.n + 2)

    def to_dict(self) -> dict:
        return {"n": self.n, "mean_r": self.mean, "m2": self.m2, "var_r": self.var,
                "successes": self.successes, "success_rate": self.success_rate}

    @classmethod
    def from_dict(cls, d: dict) -> "Signature":
        return cls(int(d["n"]), float(d["mean_r"]), float(d["m2"]), int(d["successes"]))


def adjust_confidence(targets, local: LocalMemory | None, signatures: dict | None = None,
                      d: float = 0.2, b: float = 0.1) -> list:
    """Re-weight analysis targets from what this run has already tried.

    Failed slot -> 0; successful slot -> x(1-d); unexplored -> +b (only once anything has
    been explored). When global action statistics exist they multiply in as a smoothed rate.
    """
    has_history = local is not None and bool(local.seen_slots)
    out = []
    for tgt in targets:
        c = tgt.confidence
        summary = local.seen_slots.get(tgt.slot) if local is not None else None
        if summary is not None and summary.failed:
            c = 0.0
        elif summary is not None and summary.successful:
            c = c * (1 - d)
        elif has_history:
            c = min(1.0, c + b)
        if signatures:
            sig = signatures.get(action_key(tgt.action))
            if sig is not None and sig.n > 0:
                c *= sig.smoothed_rate()
        out.append(tgt.with_confidence(c))
    return out


def adaptive_n(signature: Signature | None, base: int = 3, v0: float = 0.01, n_cap: int = 8) -> int:
    if base < 1:
        raise ValueError("base must be >= 1")
    if signature is None or signature.n == 0:
        return base
    raw = base * (2 - signature.success_rate) * (1 + min(signature.var / v0, 1.0))
    return max(1, min(n_cap, round_half_up(raw)))


# --- global memory -------------------------------------------------------------


@dataclass
class ModeMemory:
    strategic: StrategicGuidance = field(default_factory=StrategicGuidance)
    signatures: dict[str, Signature] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "strategic": self.strategic.to_list(),
            "signatures": {k: self.signatures[k].to_dict() for k in sorted(self.signatures)},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModeMemory":
        return cls(
            StrategicGuidance([GuidanceEntry.from_dict(e) for e in d.get("strategic", [])]),
            {k: Signature.from_dict(v) for k, v in d.get("signatures", {}).items()},
        )


@dataclass
class GlobalMemory:
    modes: dict[FailureMode, ModeMemory] = field(default_factory=dict)

    def mode(self, y: FailureMode) -> ModeMemory:
        return self.modes.get(y) or ModeMemory()

    def is_empty(self) -> bool:
        return not any(m.strategic or m.signatures for m in self.modes.values())

    def copy(self) -> "GlobalMemory":
        return copy.deepcopy(self)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "modes": {y.value: self.modes[y].to_dict() for y in sorted(self.modes, key=lambda m: m.value)},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GlobalMemory":
        version = d.get("schema_version")
        if version != SCHEMA_VERSION:
            raise MemoryFormatError(f"unsupported memory schema_version {version!r}")
        return cls({FailureMode.parse(k): ModeMemory.from_dict(v) for k, v in d.get("modes", {}).items()})


def transfer(local: LocalMemory, best, global_mem: GlobalMemory, y: FailureMode, summarize=None) -> GlobalMemory:
    """Fold a finished run into a copy of ``global_mem``.

    ``best`` is recorded for audit only. ``summarize`` is an optional callable
    ``(mode, [(key, recs)]) -> {key: text}`` used instead of the template wording.
    """
    out = global_mem.copy()
    recs = local.attributed()
    if not recs:
        return out
    mm = out.modes.setdefault(y, ModeMemory())
    for rec in recs:
        mm.signatures.setdefault(pattern_key(rec.augmentation), Signature()).update(rec.r)
        mm.signatures.setdefault(action_key(rec.augmentation.action), Signature()).update(rec.r)

    positive = [rec.r for rec in recs if rec.r > 0]
    if positive:
        p75 = nearest_rank(positive, 75)
        top: dict[str, list[RewardRecord]] = {}
        for rec in recs:
            if rec.r > 0 and rec.r >= p75:
                top.setdefault(pattern_key(rec.augmentation), []).append(rec)
        texts = summarize(y, sorted(top.items())) if summarize is not None else {}
        for key in sorted(top):
            entry = _template_entry(key, top[key])
            if key in texts:
                entry = GuidanceEntry(key, texts[key], entry.support)
            mm.strategic.upsert(entry)
    return out


def load_memory(global_mem: GlobalMemory | None, y: FailureMode, t: int, local: LocalMemory | None = None):
    """(K^s, K^t) for iteration t: strategic guidance only at t == 1, tactical from this run."""
    strategic = global_mem.mode(y).strategic if (global_mem is not None and t == 1) else StrategicGuidance()
    tactical = local.tactical if (local is not None and t > 1) else TacticalExemplars()
    return strategic, tactical


def save_global(path, mem: GlobalMemory) -> None:
    """Atomic write: temp file in the same directory, then rename over the target."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".memory-", suffix=".tmp", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(canonical_json(mem.to_dict()))
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_global(path) -> GlobalMemory:
    if path is None or not os.path.exists(path):
        return GlobalMemory()
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise MemoryFormatError(f"{path}: {exc}") from exc
    return GlobalMemory.from_dict(doc)


def render_global(mem: GlobalMemory) -> str:
    lines = [f"global memory (schema_version {SCHEMA_VERSION})"]
    if mem.is_empty():
        lines.append("empty")
        return "\n".join(lines)
    for y in sorted(mem.modes, key=lambda m: m.value):
        mm = mem.modes[y]
        lines.append(f"[{y.value}]")
        lines.append("  strategic guidance:")
        lines.extend(f"    - [{e.key}] {e.text}" for e in mm.strategic.entries)
        if not mm.strategic.entries:
            lines.append("    (none)")
        lines.append("  signatures:")
        lines.append(f"    {'key':<32} {'n':>4} {'mean_r':>10} {'var_r':>10} {'success':>8}")
        for k in sorted(mm.signatures):
            s = mm.signatures[k]
            lines.append(f"    {k:<32} {s.n:>4} {s.mean:>10.4f} {s.var:>10.6f} {s.success_rate:>8.2f}")
    return "\n".join(lines)


__all__ = [
    "GlobalMemory", "GuidanceEntry", "LocalMemory", "ModeMemory", "RedesignPool", "Signature", "SlotSummary",
    "StrategicGuidance", "TacticalExemplars", "adaptive_n", "adjust_confidence", "distill", "load_global",
    "load_memory", "nearest_rank", "render_global", "save_global", "transfer",
]
