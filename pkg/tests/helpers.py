"""Independent oracles and fixture generators shared by the tests.

The brute-force functions here deliberately avoid the package's own apply, attribution and
ranking code: they edit plain dicts and compute means with ordinary sums.
"""

import hashlib
import itertools
import json
import os
import random

from trial_redesign.explore import ChoiceGroup
from trial_redesign.modification import ActionType, Augmentation, Validation
from trial_redesign.oracle import Rule, ScoringSpec
from trial_redesign.protocol import EXCLUSION, INCLUSION, AspectRef, protocol_from_document

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")
# criterion number -> (name, passed, seconds, detail); filled by test_acceptance
ACCEPTANCE = {}
TAGS = ["alpha", "bravo", "charlie", "delta", "echo", "foxtrot"]


def fixture_path(*parts):
    return os.path.join(FIXTURES, *parts)


def base_document(n_inc=5, n_exc=3, tag=""):
    return {
        "nct_id": "NCT00000001",
        "phase": "Phase 2",
        "condition": f"Condition {tag}".strip(),
        "intervention/intervention_name": "Drug",
        "failure_reason": "enrollment",
        "adverse_events": "Not specified",
        "eligibility/inclusion_criteria": [f"inclusion {i} {tag}".strip() for i in range(n_inc)],
        "eligibility/exclusion_criteria": [f"exclusion {i} {tag}".strip() for i in range(n_exc)],
        "dosage": "10mg daily",
        "target_primary_outcome": "Response at week 12",
    }


def random_space(rng: random.Random, max_space=256):
    """A random factorial space over a small protocol plus a random ScoringSpec.

    Variant texts carry random tags and rules fire on tags, so rewards interact.
    Returns (base, groups, spec).
    """
    base = protocol_from_document(base_document(rng.randint(3, 6), rng.randint(2, 4)))
    groups = []
    size = 1
    slots = [(INCLUSION, i) for i in range(len(base.inclusion_criteria))]
    slots += [(EXCLUSION, i) for i in range(len(base.exclusion_criteria))]
    rng.shuffle(slots)
    n_groups = rng.randint(1, 5)
    for g in range(n_groups):
        kind = rng.choice(["modify", "modify", "delete", "add", "dosage"])
        if kind == "dosage" and any(grp.slot[0] == "dosage" for grp in groups):
            kind = "modify"
        if kind in ("modify", "delete"):
            if not slots:
                break
            aspect, idx = slots.pop()
            ref = AspectRef(aspect, idx)
            original = base.resolve(ref)
            if kind == "delete":
                opts = [Augmentation(ref, ActionType.DELETE, None, confidence=rng.random(), original=original,
                                     validation=Validation.GOOD)]
            else:
                opts = [Augmentation(ref, ActionType.MODIFY, f"{original} v{j} {rng.choice(TAGS)} {rng.choice(TAGS)}",
                                     confidence=rng.random(), original=original, validation=Validation.GOOD)
                        for j in range(rng.randint(1, 3))]
        elif kind == "add":
            ref = AspectRef(INCLUSION)
            opts = [Augmentation(ref, ActionType.ADD, f"added g{g} v{j} {rng.choice(TAGS)}", confidence=rng.random(),
                                 slot_tag=f"g{g}", validation=Validation.GOOD)
                    for j in range(rng.randint(1, 3))]
        else:
            ref = AspectRef("dosage")
            opts = [Augmentation(ref, ActionType.MODIFY, f"{j + 5}mg daily {rng.choice(TAGS)}", confidence=rng.random(),
                                 original=base.dosage, validation=Validation.GOOD)
                    for j in range(rng.randint(1, 3))]
        if size * (len(opts) + 1) > max_space:
            break
        size *= len(opts) + 1
        groups.append(ChoiceGroup(opts[0].slot, (None, *opts)))
    rules = []
    for tag in rng.sample(TAGS, rng.randint(2, len(TAGS))):
        rules.append(Rule(tag, round(rng.uniform(-0.15, 0.15), 3), when=rng.choice(["present", "present", "absent"])))
    rules.append(Rule("inclusion 0", round(rng.uniform(-0.1, 0.1), 3)))
    spec = ScoringSpec(round(rng.uniform(0.3, 0.7), 3), tuple(rules))
    return base, groups, spec


# --- independent oracles -------------------------------------------------------


def independent_derive(base_doc: dict, choice) -> dict:
    """Apply one option per group by editing a plain document."""
    doc = json.loads(json.dumps(base_doc))
    deletes = {INCLUSION: set(), EXCLUSION: set()}
    adds = {INCLUSION: [], EXCLUSION: []}
    for aug in choice:
        aspect = aug.target.aspect_name
        if aug.action is ActionType.DELETE:
            deletes[aspect].add(aug.target.index)
        elif aug.action is ActionType.ADD:
            adds[aspect].append((aug.id, aug.value))
        elif aug.target.index is None:
            doc[aspect] = aug.value
        else:
            doc[aspect][aug.target.index] = aug.value
    for aspect in (INCLUSION, EXCLUSION):
        kept = [t for i, t in enumerate(doc[aspect]) if i not in deletes[aspect]]
        doc[aspect] = kept + [v for _, v in sorted(adds[aspect])]
    return doc


def independent_score(spec_dict: dict, doc: dict) -> float:
    texts = list(doc[INCLUSION]) + list(doc[EXCLUSION]) + [doc["dosage"], doc["target_primary_outcome"]]
    total = spec_dict["base"]
    for rule in spec_dict["rules"]:
        hit = any(rule["pattern"] in t for t in texts)
        if hit == (rule["when"] == "present"):
            total += rule["weight"]
    lo, hi = spec_dict["clamp"]
    return min(hi, max(lo, total))


def independent_hash(doc: dict) -> str:
    text = json.dumps(doc, sort_keys=True, ensure_ascii=False, indent=2) + "\n"
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def enumerate_space(base, groups, spec):
    """Every candidate as (frozenset of ids, score, hash), by plain enumeration."""
    base_doc = base.to_document()
    spec_dict = spec.to_dict()
    out = []
    for choice in itertools.product(*(g.options for g in groups)):
        picked = [o for o in choice if o is not None]
        doc = independent_derive(base_doc, picked)
        out.append((frozenset(a.id for a in picked), independent_score(spec_dict, doc), independent_hash(doc)))
    return out


def brute_force_rewards(candidates):
    """r(m) = mean(with m) - mean(without m) with plain sums; None when either side is empty."""
    ids = sorted(set().union(*(c[0] for c in candidates))) if candidates else []
    out = {}
    for m in ids:
        with_ = [s for ids_, s, _ in candidates if m in ids_]
        without = [s for ids_, s, _ in candidates if m not in ids_]
        out[m] = (sum(with_) / len(with_) - sum(without) / len(without)) if with_ and without else None
    return out


def brute_force_best(candidates):
    return min(candidates, key=lambda c: (-c[1], c[2], tuple(sorted(c[0]))))


def nearest_rank_oracle(values, pct):
    xs = sorted(values)
    rank = -(-pct * len(xs) // 100)  # ceil without floats
    return xs[max(1, int(rank)) - 1]


def synthetic_jobs(trials):
    """In-memory batch jobs for generated synthetic trials (fresh provider per call)."""
    from trial_redesign.agents.provider import Playbook, ScriptedProvider
    from trial_redesign.engine import TrialJob
    from trial_redesign.oracle import ReferenceOracle
    from trial_redesign.protocol import FailureMode

    return [
        TrialJob(g.spec.name, protocol_from_document(g.protocol), FailureMode(g.spec.failure_mode),
                 ReferenceOracle(ScoringSpec.from_dict(g.scoring)), ScriptedProvider(Playbook.from_dict(g.playbook)))
        for g in trials
    ]
