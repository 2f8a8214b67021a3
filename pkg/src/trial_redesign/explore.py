"""Search over combinations of validated augmentations, and marginal reward attribution."""

from __future__ import annotations

import itertools
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

from .modification import ActionType, Augmentation, CandidateProtocol, ModificationError, ModificationSet, Validation
from .oracle import OracleError, OutcomeOracle, ScoreCache, cached_score
from .protocol import TrialProtocol, hash_protocol

log = logging.getLogger(__name__)

SPACE_SENTINEL = 10**18
EXHAUSTIVE = "Exhaustive"
BEAM = "Beam"


@dataclass(frozen=True)
class ChoiceGroup:
    """Mutually exclusive options for one slot. ``options[0]`` is always the no-op (None)."""

    slot: tuple
    options: tuple[Optional[Augmentation], ...]

    def __post_init__(self):
        if not self.options or self.options[0] is not None:
            raise ValueError("first option must be the no-op")
        for opt in self.options[1:]:
            if opt is None or opt.slot != self.slot:
                raise ValueError(f"option does not belong to slot {self.slot}")

    @property
    def max_confidence(self) -> float:
        return max((o.confidence for o in self.options[1:]), default=0.0)


@dataclass(frozen=True)
class RewardRecord:
    augmentation: Augmentation
    r: Optional[float]
    n_with: int
    n_without: int

    @property
    def augmentation_id(self) -> str:
        return self.augmentation.id

    @property
    def v(self) -> Validation:
        return self.augmentation.validation

    @property
    def attributable(self) -> bool:
        return self.r is not None

    def to_dict(self) -> dict:
        return {
            "augmentation_id": self.augmentation_id,
            "r": self.r,
            "n_with": self.n_with,
            "n_without": self.n_without,
            "v": self.v.value,
        }


@dataclass
class ExplorationResult:
    explored: list[CandidateProtocol]
    best: CandidateProtocol
    baseline: CandidateProtocol
    rewards: list[RewardRecord]
    space_size: int
    strategy_used: str
    unscorable: int = 0
    evaluations: int = 0

    @property
    def r_max(self) -> float:
        """Best score relative to the unmodified protocol the search started from."""
        return self.best.score - self.baseline.score

    def trace_records(self) -> list[dict]:
        return [
            {
                "mod_ids": sorted(c.mods.ids),
                "score": c.score,
                "derived_hash": c.derived_hash,
                "strategy_used": self.strategy_used,
            }
            for c in self.explored
        ]


def _applicable(aug: Augmentation, base: TrialProtocol) -> Optional[str]:
    """None when ``aug`` still applies to ``base``, else a reason."""
    if aug.validation is Validation.BANNED:
        return "banned"
    if aug.action is ActionType.ADD:
        if aug.value in base.aspect(aug.target.aspect_name):
            return "value already present"
        return None
    if aug.target.index is not None and aug.target.index >= len(base.aspect(aug.target.aspect_name)):
        return "index no longer exists"
    if aug.original is not None and base.resolve(aug.target) != aug.original:
        return "target text changed"
    if aug.action is ActionType.MODIFY and base.resolve(aug.target) == aug.value:
        return "already applied"
    return None


def build_groups(augs: Iterable[Augmentation], pool: Iterable[Augmentation] = (), base: TrialProtocol | None = None,
                 notes: list | None = None) -> list[ChoiceGroup]:
    """Group validated augmentations by slot, merge applicable pool members, add no-ops.

    Options within a slot are deduplicated on (action, value), fresh variants first.
    Pool members are checked against ``base`` and dropped with a note when stale.
    """
    by_slot: dict[tuple, list[Augmentation]] = {}
    seen_keys: dict[tuple, set] = {}
    seen_ids: set[str] = set()

    def add(aug: Augmentation) -> bool:
        key = (aug.action, aug.value)
        keys = seen_keys.setdefault(aug.slot, set())
        if key in keys or aug.id in seen_ids:
            return False
        keys.add(key)
        seen_ids.add(aug.id)
        by_slot.setdefault(aug.slot, []).append(aug)
        return True

    for aug in augs:
        if not aug.validation.passes:
            raise ValueError(f"augmentation {aug.id} has not passed validation ({aug.validation.value})")
        add(aug)
    for aug in pool:
        if base is not None:
            reason = _applicable(aug, base)
            if reason is not None:
                msg = f"pool member {aug.id} at {aug.target} dropped: {reason}"
                log.info(msg)
                if notes is not None:
                    notes.append(msg)
                continue
        add(aug)
    return [ChoiceGroup(slot, (None, *by_slot[slot])) for slot in sorted(by_slot)]


def estimate_space(groups: Sequence[ChoiceGroup]) -> int:
    total = 1
    for g in groups:
        total *= len(g.options)
        if total >= SPACE_SENTINEL:
            return SPACE_SENTINEL
    return total


def _rank_key(c: CandidateProtocol):
    return (-c.score, c.derived_hash, tuple(sorted(c.mods.ids)))


class _Scorer:
    def __init__(self, base: TrialProtocol, oracle: OutcomeOracle, cache: ScoreCache, workers: int = 1):
        self.base = base
        self.base_hash = hash_protocol(base)
        self.oracle = oracle
        self.cache = cache
        self.workers = max(1, workers)
        self.unscorable = 0
        self.evaluations = 0

    def _one(self, mods: ModificationSet) -> Optional[CandidateProtocol]:
        try:
            cand = CandidateProtocol.build(self.base, mods, self.base_hash)
            return cand.scored(cached_score(self.cache, self.oracle, cand.derived, cand.derived_hash))
        except (OracleError, ModificationError) as exc:
            log.warning("unscorable candidate %s: %s", sorted(mods.ids), exc)
            return None

    def score_all(self, mod_sets: list[ModificationSet]) -> list[CandidateProtocol]:
        if self.workers > 1 and len(mod_sets) > 1:
            with ThreadPoolExecutor(self.workers) as pool:
                results = list(pool.map(self._one, mod_sets))
        else:
            results = [self._one(m) for m in mod_sets]
        self.evaluations += len(mod_sets)
        self.unscorable += sum(r is None for r in results)
        return [r for r in results if r is not None]


def _finish(scorer: _Scorer, explored: list[CandidateProtocol], space: int, strategy: str) -> ExplorationResult:
    baseline = next((c for c in explored if len(c.mods) == 0), None)
    if baseline is None:
        raise OracleError("the unmodified protocol could not be scored")
    best = min(explored, key=_rank_key)
    return ExplorationResult(
        explored=explored,
        best=best,
        baseline=baseline,
        rewards=attribute(explored),
        space_size=space,
        strategy_used=strategy,
        unscorable=scorer.unscorable,
        evaluations=scorer.evaluations,
    )


def exhaustive(groups: Sequence[ChoiceGroup], base: TrialProtocol, oracle: OutcomeOracle, cache: ScoreCache,
               workers: int = 1) -> ExplorationResult:
    """Score every combination (one option per group)."""
    scorer = _Scorer(base, oracle, cache, workers)
    combos = [
        ModificationSet(tuple(o for o in choice if o is not None))
        for choice in itertools.product(*(g.options for g in groups))
    ]
    explored = scorer.score_all(combos)
    return _finish(scorer, explored, estimate_space(groups), EXHAUSTIVE)


def order_for_beam(groups: Sequence[ChoiceGroup]) -> list[ChoiceGroup]:
    return sorted(groups, key=lambda g: (-g.max_confidence, g.slot))


def beam(groups: Sequence[ChoiceGroup], base: TrialProtocol, oracle: OutcomeOracle, cache: ScoreCache, width: int = 8,
         workers: int = 1) -> ExplorationResult:
    """Width-limited search: extend every beam member by every option of the next group, keep the top ``width``."""
    if width < 1:
        raise ValueError("beam width must be >= 1")
    scorer = _Scorer(base, oracle, cache, workers)
    frontier = scorer.score_all([ModificationSet()])
    explored: dict[frozenset, CandidateProtocol] = {c.mods.ids: c for c in frontier}
    ordered = order_for_beam(groups)
    for depth, group in enumerate(ordered, start=1):
        pending: dict[frozenset, ModificationSet] = {}
        for member in frontier:
            for opt in group.options:
                mods = member.mods if opt is None else ModificationSet(member.mods.members + (opt,))
                pending.setdefault(mods.ids, mods)
        scored = scorer.score_all(list(pending.values()))
        scored.sort(key=_rank_key)
        frontier = scored[:width]
        keep = scored if depth == len(ordered) else frontier
        for c in keep:
            explored.setdefault(c.mods.ids, c)
        if not frontier:
            break
    return _finish(scorer, list(explored.values()), estimate_space(groups), BEAM)


def search(groups: Sequence[ChoiceGroup], base: TrialProtocol, oracle: OutcomeOracle, cache: ScoreCache,
           threshold: int = 1000, width: int = 8, workers: int = 1) -> ExplorationResult:
    """Exhaustive below ``threshold`` candidates, beam otherwise."""
    if estimate_space(groups) < threshold:
        return exhaustive(groups, base, oracle, cache, workers)
    return beam(groups, base, oracle, cache, width, workers)


def attribute(explored: Sequence[CandidateProtocol]) -> list[RewardRecord]:
    """Marginal reward of each augmentation: mean score with it minus mean score without it."""
    scored = [c for c in explored if c.score is not None]
    augs: dict[str, Augmentation] = {}
    for c in scored:
        for a in c.mods:
            augs.setdefault(a.id, a)
    out = []
    for aug_id in sorted(augs):
        with_, without = [], []
        for c in scored:
            (with_ if aug_id in c.mods.ids else without).append(c.score)
        if with_ and without:
            r = math.fsum(with_) / len(with_) - math.fsum(without) / len(without)
        else:
            r = None
        out.append(RewardRecord(augs[aug_id], r, len(with_), len(without)))
    return out


def write_trace(path, result: ExplorationResult, iteration: int | None = None) -> None:
    """Append one JSON line per scored candidate."""
    with open(path, "a", encoding="utf-8") as fh:
        for rec in result.trace_records():
            if iteration is not None:
                rec = {"iteration": iteration, **rec}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
