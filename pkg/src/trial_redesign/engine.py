"""The optimization loop: analyze, augment, validate, explore, distill; then transfer to global memory."""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Optional, Sequence

from .agents.analysis import EmptyAnalysis, run_analysis
from .agents.augment import AllTargetsEmpty, run_augment
from .agents.parsing import ParseError, parse_tagged
from .agents.provider import CallRecord, Provider, ProviderError, ScriptMiss, Session, provider_from_uri
from .agents.templates import render
from .agents.validate import EvidenceHook, passing, run_validate
from .explore import BEAM, EXHAUSTIVE, build_groups, search, write_trace
from .memory import (
    GlobalMemory,
    LocalMemory,
    StrategicGuidance,
    TacticalExemplars,
    adaptive_n,
    distill,
    load_memory,
    nearest_rank,
    transfer,
)
from .modification import index_maps
from .oracle import OracleError, OutcomeOracle, ScoreCache, cached_score, oracle_from_uri
from .protocol import FailureMode, TrialProtocol, canonical_json, hash_protocol, load_protocol
from .synthetic import load_manifest

log = logging.getLogger(__name__)

BUDGET_EXHAUSTED = "BudgetExhausted"
SPACE_EXHAUSTED = "SpaceExhausted"
EMPTY_ANALYSIS = "EmptyAnalysis"
TRACE_FILES = ("exploration.jsonl", "iterations.jsonl", "calls.jsonl")


class OracleUnavailable(RuntimeError):
    """The original protocol could not be scored, so there is no baseline."""


@dataclass
class RunConfig:
    n_max: int = 5
    beam_width: int = 8
    space_threshold: int = 1000
    min_improvement: float = 0.03
    max_targets: int = 4
    n_base: int = 3
    n_cap: int = 8
    v0: float = 0.01
    d: float = 0.2
    b: float = 0.1
    thresholds: dict = field(default_factory=lambda: {"enrollment": 0.6, "safety": 0.9, "efficacy": 0.85})
    token_budget: int = 1024
    max_retries: int = 2
    rate_in: float = 0.15e-6
    rate_out: float = 0.60e-6
    rate_oracle: float = 0.0
    use_memory: bool = True
    use_pool: bool = True
    llm_guidance: bool = False
    score_workers: int = 1
    seed: int = 0
    log_prompts: bool = False

    def __post_init__(self):
        if self.n_max < 1:
            raise ValueError("n_max must be >= 1")
        if self.min_improvement < 0:
            raise ValueError("min_improvement must be >= 0")
        if self.beam_width < 1 or self.max_targets < 1 or self.n_base < 1 or self.n_cap < 1:
            raise ValueError("beam_width, max_targets, n_base and n_cap must be >= 1")
        missing = {m.value for m in FailureMode} - set(self.thresholds)
        if missing:
            raise ValueError(f"thresholds missing for {sorted(missing)}")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "thresholds" in d:
            d["thresholds"] = {**cls().thresholds, **d["thresholds"]}
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def threshold(self, y: FailureMode) -> float:
        return float(self.thresholds[y.value])


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    with open(path, encoding="utf-8") as fh:
        return RunConfig.from_dict(json.load(fh))


@dataclass(frozen=True)
class CostSummary:
    tokens_in: int
    tokens_out: int
    oracle_calls: int
    provider_calls: int
    estimated_currency: float

    def to_dict(self) -> dict:
        return {**asdict(self), "currency_label": "estimate"}

    def __add__(self, other: "CostSummary") -> "CostSummary":
        return CostSummary(self.tokens_in + other.tokens_in, self.tokens_out + other.tokens_out,
                           self.oracle_calls + other.oracle_calls, self.provider_calls + other.provider_calls,
                           self.estimated_currency + other.estimated_currency)


ZERO_COST = CostSummary(0, 0, 0, 0, 0.0)


def account_cost(calls: Sequence, oracle_calls: int = 0, rate_in: float = 0.0, rate_out: float = 0.0,
                 rate_oracle: float = 0.0) -> CostSummary:
    """Token totals times per-token rates, plus oracle calls. ``calls`` holds CallRecords or dicts."""
    t_in = t_out = 0
    for c in calls:
        get = c.get if isinstance(c, dict) else (lambda k, c=c: getattr(c, k))
        t_in += int(get("tokens_in"))
        t_out += int(get("tokens_out"))
    return CostSummary(t_in, t_out, oracle_calls, len(calls), t_in * rate_in + t_out * rate_out + oracle_calls * rate_oracle)


@dataclass
class IterationRecord:
    iteration: int
    targets: list[dict]
    n_augmentations: int
    n_passing: int
    n_pool_options: int
    space_size: int
    strategy_used: Optional[str]
    best_score: Optional[float]
    r_max: Optional[float]
    r_best: float
    incumbent_changed: bool
    rewards: list[dict]
    pool: list[str]
    notes: list[str]
    pool_added: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class OptimizationResult:
    nct_id: str
    failure_mode: FailureMode
    original: TrialProtocol
    p0: float
    best: TrialProtocol
    p_star: float
    applied: list[dict]
    trajectory: list[float]
    iterations: list[IterationRecord]
    termination: str
    threshold_achieved: bool
    cost: CostSummary
    config: dict
    oracle: str
    calls: list[CallRecord] = field(default_factory=list, repr=False)
    local: LocalMemory = field(default_factory=LocalMemory, repr=False)
    global_after: Optional[GlobalMemory] = field(default=None, repr=False)

    @property
    def delta_p(self) -> float:
        return self.p_star - self.p0

    @property
    def gains(self) -> list[float]:
        """Per-iteration increase of r_best."""
        prev, out = 0.0, []
        for r in self.trajectory:
            out.append(r - prev)
            prev = r
        return out

    def to_dict(self) -> dict:
        return {
            "nct_id": self.nct_id,
            "failure_mode": self.failure_mode.value,
            "oracle": self.oracle,
            "p0": self.p0,
            "p_star": self.p_star,
            "delta_p": self.delta_p,
            "termination": self.termination,
            "threshold_achieved": self.threshold_achieved,
            "iterations_run": len(self.iterations),
            "r_best_trajectory": list(self.trajectory),
            "applied_modifications": self.applied,
            "original_protocol": self.original.to_document(),
            "best_protocol": self.best.to_document(),
            "best_protocol_hash": hash_protocol(self.best),
            "iterations": [it.to_dict() for it in self.iterations],
            "cost": self.cost.to_dict(),
            "calls": [c.to_dict(with_text=False) for c in self.calls],
            "config": self.config,
        }

    def to_json(self) -> bytes:
        return canonical_json(self.to_dict())


def _guidance_summarizer(session: Session):
    def summarize(y: FailureMode, groups) -> dict:
        patterns = "\n".join(
            f"- {key}: {len(recs)} modification(s), mean reward {math.fsum(r.r for r in recs) / len(recs):+.4f}"
            for key, recs in groups
        )
        try:
            text = session.call("guidance", render("guidance", failure_mode=y.value, patterns=patterns))
            return {k: v for k, v in parse_tagged(text, "guidance") if k and v}
        except (ProviderError, ParseError) as exc:
            log.warning("guidance summarization failed, using template: %s", exc)
            return {}
    return summarize


def _write_jsonl(path, rows) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def optimize(T0: TrialProtocol, y: FailureMode, global_mem: GlobalMemory | None, cfg: RunConfig, provider: Provider,
             oracle: OutcomeOracle, *, trace_dir=None, evidence: EvidenceHook | None = None) -> OptimizationResult:
    """Redesign ``T0`` for failure mode ``y``. ``global_mem`` is not mutated; see ``result.global_after``."""
    global_mem = global_mem if global_mem is not None else GlobalMemory()
    cache = ScoreCache()
    session = Session(provider, budget=cfg.token_budget, max_retries=cfg.max_retries)
    try:
        p0 = cached_score(cache, oracle, T0)
    except OracleError as exc:
        raise OracleUnavailable(f"cannot score the original protocol: {exc}") from exc
    if trace_dir is not None:
        os.makedirs(trace_dir, exist_ok=True)
        # traces are appended per iteration, so a rerun starts from clean files
        for name in TRACE_FILES:
            path = os.path.join(trace_dir, name)
            if os.path.exists(path):
                os.remove(path)

    incumbent = T0
    incumbent_score = p0
    applied: list[dict] = []
    r_best = 0.0
    trajectory: list[float] = []
    records: list[IterationRecord] = []
    local = LocalMemory()
    explored_against: set[tuple[str, str]] = set()
    termination = BUDGET_EXHAUSTED
    signatures = global_mem.mode(y).signatures if cfg.use_memory else None

    for t in range(1, cfg.n_max + 1):
        session.iteration = t
        notes: list[str] = []
        if cfg.use_memory:
            strategic, tactical = load_memory(global_mem, y, t, local)
        else:
            strategic, tactical = StrategicGuidance(), TacticalExemplars()
        mem_for_analysis = local if cfg.use_memory else None

        targets = []
        try:
            analysis = run_analysis(incumbent, y, session, mem_for_analysis, strategic, signatures=signatures,
                                    d=cfg.d, b=cfg.b)
            targets = analysis.targets
            notes.extend(analysis.notes)
        except EmptyAnalysis as exc:
            notes.extend(exc.notes)
            if t == 1:
                termination = EMPTY_ANALYSIS
                records.append(IterationRecord(t, [], 0, 0, 0, 1, None, None, None, r_best, False, [], [],
                                               notes + ["analysis found no modification opportunities"]))
                trajectory.append(r_best)
                break
            notes.append("analysis found no new targets")
        except ProviderError as exc:
            notes.append(f"analysis failed: {exc}")

        selected = [x for x in targets if x.confidence > 0][: cfg.max_targets]

        def n_for(target):
            if not cfg.use_memory:
                return cfg.n_base
            return adaptive_n(signatures.get(target.pattern_key) if signatures else None, cfg.n_base, cfg.v0, cfg.n_cap)

        augs = []
        if selected:
            try:
                augs = run_augment(selected, incumbent, y, session, tactical if cfg.use_memory else None, n_for, notes)
            except AllTargetsEmpty as exc:
                notes.append(str(exc))
        validated = run_validate(augs, incumbent, y, session, evidence, notes)
        fresh = passing(validated)

        inc_hash = hash_protocol(incumbent)
        pool_augs = local.pool.augmentations() if cfg.use_pool else []
        groups = build_groups(fresh, pool_augs, incumbent, notes)
        pool_ids = {a.id for a in pool_augs}
        group_ids = {o.id for g in groups for o in g.options[1:]}
        new_pool = [i for i in group_ids & pool_ids if (inc_hash, i) not in explored_against]
        if not fresh and not new_pool:
            termination = SPACE_EXHAUSTED
            records.append(IterationRecord(t, [x.to_dict() for x in targets], len(augs), 0, 0, 1, None, None, None,
                                           r_best, False, [], sorted(local.pool.entries),
                                           notes + ["no passing augmentations and nothing new in the pool"]))
            trajectory.append(r_best)
            break
        explored_against.update((inc_hash, i) for i in group_ids)

        result = search(groups, incumbent, oracle, cache, cfg.space_threshold, cfg.beam_width, cfg.score_workers)
        if trace_dir is not None:
            write_trace(os.path.join(trace_dir, "exploration.jsonl"), result, iteration=t)
        r_max = result.best.score - p0
        changed = r_max > r_best
        maps = None
        if changed:
            maps = index_maps(incumbent, result.best.mods)
            applied.extend({"iteration": t, **a.to_dict()} for a in result.best.mods)
            incumbent, incumbent_score = result.best.derived, result.best.score
            r_best = r_max
        trajectory.append(r_best)

        distilled = distill(result.rewards, validated)
        local.record(t, result.rewards, distilled)
        if maps is not None:
            local.rebase(maps)
        records.append(IterationRecord(
            iteration=t,
            targets=[x.to_dict() for x in targets],
            n_augmentations=len(augs),
            n_passing=len(fresh),
            n_pool_options=len(group_ids & pool_ids),
            space_size=result.space_size,
            strategy_used=result.strategy_used,
            best_score=result.best.score,
            r_max=r_max,
            r_best=r_best,
            incumbent_changed=changed,
            rewards=[r.to_dict() for r in result.rewards],
            pool=sorted(local.pool.entries),
            notes=notes,
            pool_added=sorted(a.id for a, _ in distilled.pool_delta),
        ))

    global_after = global_mem
    if cfg.use_memory:
        summarize = _guidance_summarizer(session) if cfg.llm_guidance else None
        global_after = transfer(local, incumbent, global_mem, y, summarize)

    if trace_dir is not None:
        _write_jsonl(os.path.join(trace_dir, "iterations.jsonl"), [r.to_dict() for r in records])
        _write_jsonl(os.path.join(trace_dir, "calls.jsonl"), [c.to_dict(with_text=cfg.log_prompts) for c in session.calls])
    cost = account_cost(session.calls, cache.misses, cfg.rate_in, cfg.rate_out, cfg.rate_oracle)
    return OptimizationResult(
        nct_id=T0.nct_id,
        failure_mode=y,
        original=T0,
        p0=p0,
        best=incumbent,
        p_star=incumbent_score,
        applied=applied,
        trajectory=trajectory,
        iterations=records,
        termination=termination,
        threshold_achieved=incumbent_score >= cfg.threshold(y),
        cost=cost,
        config=cfg.to_dict(),
        oracle=oracle.descriptor,
        calls=list(session.calls),
        local=local,
        global_after=global_after,
    )


# --- batch ---------------------------------------------------------------------


@dataclass
class TrialJob:
    name: str
    protocol: TrialProtocol
    failure_mode: FailureMode
    oracle: OutcomeOracle
    provider: Provider


def _run_one(job: TrialJob, mem: GlobalMemory, cfg: RunConfig, trace_dir):
    sub = os.path.join(trace_dir, job.name) if trace_dir is not None else None
    try:
        return optimize(job.protocol, job.failure_mode, mem, cfg, job.provider, job.oracle, trace_dir=sub), None
    except ScriptMiss:
        raise
    except Exception as exc:  # recorded per trial; the batch continues
        log.error("trial %s failed: %s", job.name, exc)
        return None, f"{exc.__class__.__name__}: {exc}"


def jobs_from_manifest(path) -> list[TrialJob]:
    jobs = []
    for e in load_manifest(path):
        jobs.append(TrialJob(e["name"], load_protocol(e["trial"]), FailureMode(e["failure_mode"]),
                             oracle_from_uri(e["oracle"]), provider_from_uri(e["provider"])))
    return jobs


@dataclass
class BatchOutcome:
    report: dict
    results: list[Optional[OptimizationResult]]
    global_after: GlobalMemory


def batch(jobs: Sequence[TrialJob], global_mem: GlobalMemory | None, cfg: RunConfig, parallelism: int = 1,
          trace_dir=None) -> BatchOutcome:
    """Run every job. Sequential runs see memory accumulate; parallel runs all start from the
    initial snapshot and their transfers are folded in afterwards in input order."""
    mem = global_mem if global_mem is not None else GlobalMemory()
    results: list[Optional[OptimizationResult]] = []
    errors: list[Optional[str]] = []
    if parallelism <= 1:
        for job in jobs:
            res, err = _run_one(job, mem, cfg, trace_dir)
            if res is not None and res.global_after is not None:
                mem = res.global_after
            results.append(res)
            errors.append(err)
    else:
        snapshot = mem.copy()
        with ThreadPoolExecutor(parallelism) as ex:
            outs = list(ex.map(lambda j: _run_one(j, snapshot.copy(), cfg, trace_dir), jobs))
        for res, err in outs:
            results.append(res)
            errors.append(err)
            if res is not None and cfg.use_memory:
                mem = transfer(res.local, res.best, mem, res.failure_mode)
    report = build_report([j.name for j in jobs], results, errors, cfg)
    return BatchOutcome(report, results, mem)


def _mean(xs) -> float:
    xs = list(xs)
    return math.fsum(xs) / len(xs) if xs else 0.0


def build_report(names: Sequence[str], results: Sequence[Optional[OptimizationResult]],
                 errors: Sequence[Optional[str]], cfg: RunConfig) -> dict:
    ok = [r for r in results if r is not None]
    deltas = [r.delta_p for r in ok]
    n_iter = cfg.n_max
    curve_gain, curve_best = [], []
    for t in range(n_iter):
        gains, bests = [], []
        for r in ok:
            traj = r.trajectory + [r.trajectory[-1] if r.trajectory else 0.0] * (n_iter - len(r.trajectory))
            prev = traj[t - 1] if t > 0 else 0.0
            gains.append(traj[t] - prev)
            bests.append(traj[t])
        curve_gain.append(_mean(gains))
        curve_best.append(_mean(bests))
    cost = ZERO_COST
    for r in ok:
        cost = cost + r.cost
    terminations: dict[str, int] = {}
    for r in ok:
        terminations[r.termination] = terminations.get(r.termination, 0) + 1
    trials = []
    for name, r, err in zip(names, results, errors):
        if r is None:
            trials.append({"name": name, "error": err})
        else:
            trials.append({
                "name": name, "nct_id": r.nct_id, "failure_mode": r.failure_mode.value, "p0": r.p0, "p_star": r.p_star,
                "delta_p": r.delta_p, "termination": r.termination, "iterations_run": len(r.iterations),
                "threshold_achieved": r.threshold_achieved, "r_best_trajectory": list(r.trajectory),
                "cost": r.cost.to_dict(),
            })
    bands = {f"p{q}": (nearest_rank(deltas, q) if deltas else 0.0) for q in (10, 25, 50, 75, 90)}
    return {
        "n_trials": len(names),
        "n_completed": len(ok),
        "n_failed": len(names) - len(ok),
        "positive_rate": _mean(d > 0 for d in deltas),
        "mean_delta_p": _mean(deltas),
        "delta_p_bands": bands,
        "threshold_rate": _mean(r.threshold_achieved for r in ok),
        "meaningful_rate": _mean(d > cfg.min_improvement for d in deltas),
        "min_improvement": cfg.min_improvement,
        "per_iteration_mean_gain": curve_gain,
        "per_iteration_mean_r_best": curve_best,
        "terminations": dict(sorted(terminations.items())),
        "cost": cost.to_dict(),
        "config": cfg.to_dict(),
        "trials": trials,
    }


def render_report(report: dict) -> str:
    lines = [
        f"trials: {report['n_trials']} (completed {report['n_completed']}, failed {report['n_failed']})",
        f"positive rate: {report['positive_rate']:.3f}",
        f"mean delta p: {report['mean_delta_p']:+.6f}",
        "delta p bands: " + ", ".join(f"{k}={v:+.4f}" for k, v in report["delta_p_bands"].items()),
        f"threshold rate: {report['threshold_rate']:.3f}",
        f"meaningful rate (delta p > {report['min_improvement']}): {report['meaningful_rate']:.3f}",
        "terminations: " + (", ".join(f"{k}={v}" for k, v in report["terminations"].items()) or "none"),
        "",
        f"{'iteration':>9} {'mean gain':>12} {'mean r_best':>12}",
    ]
    for i, (g, b) in enumerate(zip(report["per_iteration_mean_gain"], report["per_iteration_mean_r_best"]), start=1):
        lines.append(f"{i:>9} {g:>12.6f} {b:>12.6f}")
    c = report["cost"]
    lines += ["", f"cost (estimate): {c['estimated_currency']:.6f}  tokens in/out: {c['tokens_in']}/{c['tokens_out']}"
                  f"  oracle calls: {c['oracle_calls']}", "",
              f"{'trial':<24} {'mode':<10} {'p0':>7} {'p*':>7} {'dp':>8} {'termination':<15}"]
    for tr in report["trials"]:
        if "error" in tr:
            lines.append(f"{tr['name']:<24} ERROR {tr['error']}")
        else:
            lines.append(f"{tr['name']:<24} {tr['failure_mode']:<10} {tr['p0']:>7.4f} {tr['p_star']:>7.4f} "
                         f"{tr['delta_p']:>+8.4f} {tr['termination']:<15}")
    return "\n".join(lines)


def curve_csv(report: dict) -> str:
    rows = ["iteration,mean_gain,mean_r_best"]
    for i, (g, b) in enumerate(zip(report["per_iteration_mean_gain"], report["per_iteration_mean_r_best"]), start=1):
        rows.append(f"{i},{g!r},{b!r}")
    return "\n".join(rows) + "\n"


__all__ = [
    "BEAM", "BUDGET_EXHAUSTED", "EMPTY_ANALYSIS", "EXHAUSTIVE", "SPACE_EXHAUSTED", "BatchOutcome", "CostSummary",
    "OptimizationResult", "OracleUnavailable", "RunConfig", "TrialJob", "account_cost", "batch", "build_report",
    "curve_csv", "jobs_from_manifest", "load_config", "optimize", "render_report",
]
