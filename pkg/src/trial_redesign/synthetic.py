"""Seeded synthetic corpora: protocols with planted flaws, matching scoring specs and scripted playbooks.

Each trial carries a set of planted flaws. A flaw is penalised by a negative "present" rule
(or, for additions, a missing bonus), and the playbook proposes each fix exactly once. Decoy
targets look attractive (high confidence) but every variant they produce carries a penalty
phrase, so only memory of their failure keeps them from crowding out real fixes.
"""

from __future__ import annotations

import json
import math
import os
import random
from dataclasses import asdict, dataclass, field
from typing import Optional

from .protocol import DOSAGE, EXCLUSION, INCLUSION, OUTCOME, FailureMode, canonical_json

PLANTED = "planted"
ABLATION = "ablation"

_CONDITIONS = [
    ("Postoperative ocular inflammation", "Anti-inflammatory ophthalmic suspension"),
    ("Moderate plaque psoriasis", "Topical kinase inhibitor cream"),
    ("Type 2 diabetes mellitus", "Oral glucokinase activator"),
    ("Chronic low back pain", "Extended-release analgesic tablet"),
    ("Relapsing multiple sclerosis", "Oral sphingosine receptor modulator"),
    ("Mild persistent asthma", "Inhaled corticosteroid combination"),
    ("Postherpetic neuralgia", "Topical sodium channel blocker"),
    ("Major depressive disorder", "Oral glutamate modulator"),
]

_NEUTRAL_INCLUSION = [
    "Age {a} to {b} years at screening",
    "Diagnosis confirmed by a specialist within {n} weeks of screening",
    "Able to provide written informed consent",
    "Body mass index between {a} and {b} kg/m2",
    "Negative pregnancy test at screening for participants of childbearing potential",
    "Stable background therapy for at least {n} weeks",
    "Able to complete study diaries in the local language",
]
_NEUTRAL_EXCLUSION = [
    "Known hypersensitivity to the study drug or its excipients",
    "Participation in another interventional study within {n} days",
    "Active malignancy within {a} years of screening",
    "eGFR below {b} mL/min/1.73m2 at screening",
    "Pregnant or breastfeeding",
    "History of alcohol or drug abuse within {n} months",
]

_BARRIERS = [
    "Must agree to wait {n} months before surgery on the fellow eye",
    "Must remain within {b} km of the study site for the entire study period",
    "Must attend in-person visits every {a} days for {n} weeks",
    "Must discontinue all current analgesics {n} weeks before the baseline visit",
    "Must be willing to undergo {a} additional research biopsies",
    "Must have a caregiver present at every study visit for {n} weeks",
    "Must stay overnight at the research unit after each of {a} dosing visits",
]
_NARROW = [
    ("Age {a} to {c} years inclusive", "Age {a} to {b} years inclusive"),
    ("Washout of {b} weeks from any prior systemic therapy", "Washout of {a} weeks from any prior systemic therapy"),
    ("No prior exposure to any biologic therapy at any time", "No biologic therapy within {n} weeks of screening"),
    ("HbA1c between {a}.0% and {a}.5% at screening", "HbA1c between {a}.0% and {c}.0% at screening"),
    ("Disease duration of less than {a} months", "Disease duration of less than {b} months"),
]
_ENRICH = [
    "Baseline anterior chamber cell grade of at least {a}+ measured within {n} days of enrollment",
    "Baseline serum marker level at or above {b} ng/mL within {n} days of randomization",
    "Documented target mutation by a validated assay within {n} months",
    "Baseline symptom severity score of at least {a} on a validated scale",
    "Baseline inflammatory marker (CRP) of at least {a} mg/L at screening",
]
_DOSAGE_FLAWS = [
    ("{b}mg oral daily with a {c}mg loading dose for {n} days", "{a}mg oral daily for {n} days"),
    ("{b}mg intravenous weekly for {n} weeks", "{a}mg intravenous every {m} weeks for {n} weeks"),
    ("{b}mg oral twice daily for {n} days", "{a}mg oral twice daily with titration over {m} weeks"),
]
_OUTCOME_FLAWS = [
    ("Overall survival at {b} years", "Objective response rate at {n} weeks"),
    ("Complete remission sustained for {b} months", "Change from baseline in symptom score at week {n}"),
    ("Time to hospitalization over {b} years", "Proportion of responders at week {n}"),
]
_PENALTIES = [
    "confirmed by sponsor pre-authorization",
    "with central adjudication review before enrollment",
    "plus a mandatory repeat screening visit",
    "with overnight observation after consent",
    "verified by two independent investigators",
]


def _fill(rng: random.Random, template: str) -> str:
    a = rng.randint(2, 9)
    b = a + rng.randint(10, 60)
    c = a + rng.randint(2, 8)
    n = rng.randint(3, 12)
    m = rng.randint(2, 4)
    return template.format(a=a, b=b, c=c, n=n, m=m)


def _fill_pair(rng: random.Random, pair: tuple[str, str]) -> tuple[str, str]:
    vals = dict(a=rng.randint(2, 9), n=rng.randint(3, 12), m=rng.randint(2, 4))
    vals["b"] = vals["a"] + rng.randint(20, 60)
    vals["c"] = vals["a"] + rng.randint(2, 8)
    return pair[0].format(**vals), pair[1].format(**vals)


@dataclass
class PlantedFlaw:
    kind: str  # delete | modify | add | dosage | outcome
    aspect: str
    index: Optional[int]
    flaw_text: Optional[str]
    fix_text: Optional[str]
    weight: float
    iteration: int
    confidence: float
    category: Optional[str]
    strategy: str


@dataclass
class Decoy:
    aspect: str
    index: int
    text: str
    penalty: str
    weight: float
    confidence: float
    variants: list[str]
    banned_variant: Optional[str] = None


@dataclass
class SyntheticTrialSpec:
    name: str
    seed: int
    failure_mode: str
    n_criteria: int
    flaws: list[PlantedFlaw] = field(default_factory=list)
    decoys: list[Decoy] = field(default_factory=list)
    empty: bool = False

    @property
    def expected_delta_p(self) -> float:
        return math.fsum(f.weight for f in self.flaws)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["expected_delta_p"] = self.expected_delta_p
        return d


@dataclass
class GeneratedTrial:
    spec: SyntheticTrialSpec
    protocol: dict
    scoring: dict
    playbook: dict


BASE_SCORE = 0.55


def _unique(rng: random.Random, templates: list[str], used: set, k: int) -> list[str]:
    out = []
    pool = list(templates)
    rng.shuffle(pool)
    for tpl in pool:
        if len(out) == k:
            break
        text = _fill(rng, tpl)
        if text not in used:
            used.add(text)
            out.append(text)
    if len(out) < k:
        raise ValueError("template pool too small")
    return out


def _weight(rng: random.Random) -> float:
    # two decimals keep hand arithmetic readable
    return rng.randint(1, 6) / 100.0


def _make_trial(rng: random.Random, name: str, seed: int, mode: FailureMode, n_fixes: int, n_decoys: int,
                schedule: list[int], empty: bool = False) -> GeneratedTrial:
    used: set[str] = set()
    condition, intervention = rng.choice(_CONDITIONS)
    inclusion = _unique(rng, _NEUTRAL_INCLUSION, used, rng.randint(3, 4))
    exclusion = _unique(rng, _NEUTRAL_EXCLUSION, used, rng.randint(2, 3))
    dosage = f"{rng.randint(2, 9) * 10}mg oral daily for {rng.randint(2, 8) * 7} days"
    outcome = f"Change from baseline in disease activity score at week {rng.randint(4, 24)}"
    spec = SyntheticTrialSpec(name, seed, mode.value, 0, empty=empty)
    rules: list[dict] = []

    if not empty:
        kinds = {
            FailureMode.ENROLLMENT: ["delete", "modify", "add"],
            FailureMode.SAFETY: ["dosage", "delete", "modify", "add"],
            FailureMode.EFFICACY: ["outcome", "add", "modify", "dosage"],
        }[mode]
        weights = sorted((_weight(rng) for _ in range(n_fixes)), reverse=True)
        chosen_kinds = []
        for i in range(n_fixes):
            kind = kinds[i % len(kinds)] if i < len(kinds) else rng.choice(["delete", "modify", "add"])
            chosen_kinds.append(kind)
        rng.shuffle(chosen_kinds)
        for w, it, kind in zip(weights, schedule, chosen_kinds):
            conf = round(rng.uniform(0.60, 0.85), 2)
            if kind == "delete":
                text = _unique(rng, _BARRIERS, used, 1)[0]
                inclusion.insert(rng.randint(0, len(inclusion)), text)
                flaw = PlantedFlaw(kind, INCLUSION, None, text, None, w, it, conf, "PARTICIPATION_BARRIER",
                                   "Remove the participation barrier")
            elif kind == "modify":
                for _ in range(20):
                    old, new = _fill_pair(rng, rng.choice(_NARROW))
                    if old not in used and new not in used:
                        break
                used.update((old, new))
                inclusion.insert(rng.randint(0, len(inclusion)), old)
                flaw = PlantedFlaw(kind, INCLUSION, None, old, new, w, it, conf, "SELECTION_CRITERION",
                                   "Broaden the overly narrow selection criterion")
            elif kind == "add":
                new = _unique(rng, _ENRICH, used, 1)[0]
                flaw = PlantedFlaw(kind, INCLUSION, None, None, new, w, it, conf, "ENRICHMENT_CRITERION",
                                   f"Add an objective enrichment criterion ({name} #{len(spec.flaws) + 1})")
            elif kind == "dosage":
                old, new = _fill_pair(rng, rng.choice(_DOSAGE_FLAWS))
                dosage = old
                flaw = PlantedFlaw(kind, DOSAGE, None, old, new, w, it, conf, None,
                                   "Reduce exposure" if mode is FailureMode.SAFETY else "Adjust the regimen to restore signal")
            else:
                old, new = _fill_pair(rng, rng.choice(_OUTCOME_FLAWS))
                outcome = old
                flaw = PlantedFlaw(kind, OUTCOME, None, old, new, w, it, conf, None,
                                   "Switch to a feasible primary endpoint")
            spec.flaws.append(flaw)

        penalties = list(_PENALTIES)
        rng.shuffle(penalties)
        neutral_slots = [(INCLUSION, t) for t in inclusion if not any(f.flaw_text == t for f in spec.flaws)]
        neutral_slots += [(EXCLUSION, t) for t in exclusion]
        rng.shuffle(neutral_slots)
        for k in range(n_decoys):
            aspect, text = neutral_slots[k]
            penalty = penalties[k]
            variants = [f"{text} {penalty}", f"{text}, {penalty} at every visit"]
            spec.decoys.append(Decoy(aspect, -1, text, penalty, rng.randint(2, 4) / 100.0,
                                     round(0.97 - 0.02 * k, 2), variants,
                                     banned_variant=f"{text}, waived entirely {penalty}"))

    # indices are resolved once the lists are final
    for f in spec.flaws:
        if f.kind in ("delete", "modify"):
            f.index = inclusion.index(f.flaw_text)
    for dcy in spec.decoys:
        dcy.index = (inclusion if dcy.aspect == INCLUSION else exclusion).index(dcy.text)
    spec.n_criteria = len(inclusion) + len(exclusion)

    for f in spec.flaws:
        if f.kind == "add":
            rules.append({"pattern": f.fix_text, "weight": f.weight, "aspects": [f.aspect], "label": f"fix:{f.kind}"})
        else:
            rules.append({"pattern": f.flaw_text, "weight": -f.weight, "aspects": [f.aspect], "label": f"flaw:{f.kind}"})
    for dcy in spec.decoys:
        rules.append({"pattern": dcy.penalty, "weight": -dcy.weight, "aspects": [dcy.aspect], "label": "decoy"})
    scoring = {"base": BASE_SCORE, "rules": rules, "clamp": [0.01, 0.99]}
    lo = BASE_SCORE - math.fsum(r["weight"] for r in rules if r["weight"] < 0 and r["label"] != "decoy") \
        - math.fsum(d.weight for d in spec.decoys)
    hi = BASE_SCORE + math.fsum(r["weight"] for r in rules if r["weight"] > 0)
    assert 0.01 < lo and hi < 0.99, "synthetic scores must stay inside the clamp"

    protocol = {
        "nct_id": f"SYN{seed:03d}{name[-3:]}",
        "phase": f"Phase {rng.randint(2, 3)}",
        "condition": condition,
        "intervention/intervention_name": intervention,
        "failure_reason": mode.value,
        "adverse_events": "Grade 3 hepatotoxicity in 25% of participants" if mode is FailureMode.SAFETY else "Not specified",
        "eligibility/inclusion_criteria": inclusion,
        "eligibility/exclusion_criteria": exclusion,
        "dosage": dosage,
        "target_primary_outcome": outcome,
    }
    return GeneratedTrial(spec, protocol, scoring, _playbook(spec, protocol, mode, rng))


def _tradeoff_block(aspect: str, index: Optional[int], rec: str, conf: float, strategy: str, category: Optional[str],
                    criterion_text: Optional[str], reasoning: str) -> str:
    idx = f' index="{index}"' if index is not None else ""
    parts = [f'<tradeoff aspect_name="{aspect}"{idx}>', f"<recommendation>{rec}</recommendation>",
             "<impact>MAJOR</impact>"]
    if category:
        parts.append(f"<category>{category}</category>")
    parts.append(f"<confidence>{conf:.2f}</confidence>")
    parts.append(f"<strategy>{strategy}</strategy>")
    if criterion_text:
        parts.append(f"<criterion_text>{criterion_text}</criterion_text>")
    parts.append(f"<reasoning>{reasoning}</reasoning>")
    parts.append("</tradeoff>")
    return "\n".join(parts)


def _items(blocks: list[str]) -> str:
    return "Trade-off analysis follows.\n<tradeoffs>\n" + "\n".join(blocks) + "\n</tradeoffs>"


def _augs(values: list[str]) -> str:
    return "<augmentations>\n" + "\n".join(f"<augmentation>{v}</augmentation>" for v in values) + "\n</augmentations>"


def _dosage_augs(values: list[str]) -> str:
    body = "\n".join(
        f"<augmentation>\n<dosage_modification>{v}</dosage_modification>\n<rationale>Lower peak exposure.</rationale>\n</augmentation>"
        for v in values)
    return f"<augmentations>\n{body}\n</augmentations>"


def _playbook(spec: SyntheticTrialSpec, protocol: dict, mode: FailureMode, rng: random.Random) -> dict:
    fallback: list[dict] = []
    rules: list[dict] = []

    if spec.empty:
        for stage in ("classification", "mechanism", "tradeoff", "ae_profile", "design_pivots"):
            fallback.append({"stage": stage, "iteration": "*", "completion": {
                "classification": "<classifications></classifications>",
                "tradeoff": "<tradeoffs></tradeoffs>",
            }.get(stage, "No further analysis.")})
        fallback.append({"stage": "validate", "iteration": "*",
                         "completion": "<validation><tier>GOOD</tier><reason>ok</reason></validation>"})
        return {"exact": [], "rules": rules, "fallback": fallback}

    cls_blocks = []
    for f in spec.flaws:
        if f.index is None:
            continue
        scores = {c: round(rng.uniform(0.05, 0.3), 2) for c in
                  ("PARTICIPATION_BARRIER", "SAFETY_EXCLUSION", "SELECTION_CRITERION", "ENRICHMENT_CRITERION")}
        scores[f.category] = round(rng.uniform(0.7, 0.95), 2)
        cls_blocks.append(
            f'<classification aspect_name="{f.aspect}" index="{f.index}">\n'
            + "".join(f"<{c.lower()}_score>{v:.2f}</{c.lower()}_score>\n" for c, v in scores.items())
            + f"<primary_category>{f.category}</primary_category>\n<reasoning>Planted criterion.</reasoning>\n</classification>")
    fallback.append({"stage": "classification", "iteration": "*",
                     "completion": "<classifications>\n" + "\n".join(cls_blocks) + "\n</classifications>"})
    fallback.append({"stage": "mechanism", "iteration": "*", "completion":
                     "<mechanism_analysis>Criteria define the target population; some requirements add burden "
                     "without benefit.</mechanism_analysis>\n<confidence>0.60</confidence>"})
    if mode is FailureMode.SAFETY:
        fallback.append({"stage": "ae_profile", "iteration": "*", "completion":
                         "<adverse_event_profile>\n<primary_toxicity>\n<event>Hepatotoxicity</event>\n<grade>3</grade>\n"
                         "<incidence>25%</incidence>\n<organ_system>Liver</organ_system>\n<priority>CRITICAL</priority>\n"
                         "<dose_dependent>likely</dose_dependent>\n</primary_toxicity>\n<mechanism_consistency>UNEXPECTED"
                         "</mechanism_consistency>\n<root_cause_hypothesis>Excessive dose.</root_cause_hypothesis>\n"
                         "</adverse_event_profile>"})
        fallback.append({"stage": "design_pivots", "iteration": "*", "completion":
                         "<design_pivots>\n<trial_type>DOSE_FINDING</trial_type>\n<dose_regimen_direction>SIMPLER"
                         "</dose_regimen_direction>\n<summary>Keep the design; reduce exposure.</summary>\n</design_pivots>"})

    decoy_blocks = [
        _tradeoff_block(d.aspect, d.index, "MODIFY", d.confidence, f"Tighten verification of eligibility ({d.penalty})",
                        "SELECTION_CRITERION", d.text, "Stricter verification looks attractive.")
        for d in spec.decoys
    ]
    iterations = sorted({f.iteration for f in spec.flaws})
    for it in iterations:
        blocks = []
        for f in spec.flaws:
            if f.iteration != it:
                continue
            rec = {"delete": "DELETE", "add": "ADD"}.get(f.kind, "MODIFY")
            blocks.append(_tradeoff_block(f.aspect, f.index, rec, f.confidence, f.strategy, f.category,
                                          f.flaw_text if f.kind in ("delete", "modify") else None,
                                          "Planted fix."))
        fallback.append({"stage": "tradeoff", "iteration": it, "completion": _items(decoy_blocks + blocks)})
    fallback.append({"stage": "tradeoff", "iteration": "*", "completion": _items(decoy_blocks)})

    for f in spec.flaws:
        if f.kind == "modify":
            rules.append({"stage": "augment", "iteration": "*", "contains": f'Original criterion: "{f.flaw_text}"',
                          "completion": _augs([f.fix_text])})
        elif f.kind == "add":
            rules.append({"stage": "augment", "iteration": "*", "contains": f'Strategy: "{f.strategy}"',
                          "completion": _augs([f.fix_text])})
        elif f.kind == "dosage":
            rules.append({"stage": "augment", "iteration": "*", "contains": f"Original dosage: {f.flaw_text}",
                          "completion": _dosage_augs([f.fix_text])})
        elif f.kind == "outcome":
            rules.append({"stage": "augment", "iteration": "*", "contains": f'Original outcome: "{f.flaw_text}"',
                          "completion": _augs([f.fix_text])})
    for d in spec.decoys:
        values = [d.variants[0], d.banned_variant, d.variants[1]] if d.banned_variant else d.variants
        rules.append({"stage": "augment", "iteration": "*", "contains": f'Original criterion: "{d.text}"',
                      "completion": _augs(values)})
        if d.banned_variant:
            rules.append({"stage": "validate", "iteration": "*", "contains": f'Proposed: "{d.banned_variant}"',
                          "completion": "<validation><tier>BANNED</tier><reason>Removes a safeguard.</reason></validation>"})
    fallback.append({"stage": "validate", "iteration": "*",
                     "completion": "<validation><tier>GOOD</tier><reason>Consistent with the strategy.</reason></validation>"})
    return {"exact": [], "rules": rules, "fallback": fallback}


def _modes(rng: random.Random, n: int) -> list[FailureMode]:
    order = [FailureMode.ENROLLMENT, FailureMode.SAFETY, FailureMode.EFFICACY]
    return [order[i % 3] for i in range(n)]


def generate_planted(n: int = 20, seed: int = 7, n_empty: int = 2) -> list[GeneratedTrial]:
    """Front-loaded fixes: the heavier half is proposed at iteration 1, the rest at iteration 2."""
    rng = random.Random(seed)
    empty_at = set(rng.sample(range(n), min(n_empty, n)))
    trials = []
    for i, mode in enumerate(_modes(rng, n)):
        name = f"planted-{i:03d}"
        if i in empty_at:
            trials.append(_make_trial(rng, name, seed, FailureMode.EFFICACY, 0, 0, [], empty=True))
            continue
        k = rng.randint(2, 5)
        first = math.ceil(k / 2)
        schedule = [1] * first + [2] * (k - first)
        trials.append(_make_trial(rng, name, seed, mode, k, rng.randint(0, 1), schedule))
    return trials


def generate_ablation(n: int = 10, seed: int = 11, n_neutral: int = 2) -> list[GeneratedTrial]:
    """Enrollment trials where three high-confidence decoys compete with real fixes for target slots."""
    rng = random.Random(seed)
    trials = []
    for i in range(n):
        name = f"ablation-{i:03d}"
        if i >= n - n_neutral:
            trials.append(_make_trial(rng, name, seed, FailureMode.ENROLLMENT, 3, 0, [1, 2, 3]))
        else:
            trials.append(_make_trial(rng, name, seed, FailureMode.ENROLLMENT, 5, 3, [1, 2, 2, 3, 3]))
    return trials


def _write(path: str, obj) -> None:
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(canonical_json(obj))


def write_corpus(trials: list[GeneratedTrial], out_dir: str, kind: str, seed: int) -> str:
    """Write trials/, specs/, playbooks/, manifest.json and expected.json. Returns the manifest path."""
    entries, expected = [], {}
    for g in trials:
        name = g.spec.name
        _write(os.path.join(out_dir, "trials", f"{name}.json"), g.protocol)
        _write(os.path.join(out_dir, "specs", f"{name}.json"), g.scoring)
        _write(os.path.join(out_dir, "playbooks", f"{name}.json"), g.playbook)
        entries.append({
            "name": name,
            "trial": f"trials/{name}.json",
            "failure_mode": g.spec.failure_mode,
            "oracle": f"ref:specs/{name}.json",
            "provider": f"scripted:playbooks/{name}.json",
        })
        expected[name] = g.spec.to_dict()
    deltas = [g.spec.expected_delta_p for g in trials]
    manifest = {"kind": kind, "seed": seed, "trials": entries}
    _write(os.path.join(out_dir, "manifest.json"), manifest)
    _write(os.path.join(out_dir, "expected.json"), {
        "kind": kind,
        "seed": seed,
        "mean_expected_delta_p": math.fsum(deltas) / len(deltas) if deltas else 0.0,
        "trials": expected,
    })
    return os.path.join(out_dir, "manifest.json")


def generate(kind: str, n: int, seed: int, out_dir: str) -> str:
    if kind == PLANTED:
        trials = generate_planted(n, seed)
    elif kind == ABLATION:
        trials = generate_ablation(n, seed)
    else:
        raise ValueError(f"unknown corpus kind {kind!r}")
    return write_corpus(trials, out_dir, kind, seed)


def load_manifest(path: str) -> list[dict]:
    """Manifest entries with paths resolved against the manifest's directory."""
    root = os.path.dirname(os.path.abspath(path))
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    out = []
    for e in doc["trials"]:
        e = dict(e)
        e["trial"] = os.path.join(root, e["trial"])
        for key in ("oracle", "provider"):
            if key in e:
                scheme, _, rest = e[key].partition(":")
                if scheme in ("ref", "scripted") and rest and not os.path.isabs(rest):
                    e[key] = f"{scheme}:{os.path.join(root, rest)}"
        out.append(e)
    return out
