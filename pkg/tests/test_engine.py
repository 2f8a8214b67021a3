import json
import math
import os

import pytest

from helpers import nearest_rank_oracle, synthetic_jobs
from trial_redesign.agents.provider import CallRecord, Playbook, ScriptedProvider
from trial_redesign.engine import (
    BUDGET_EXHAUSTED,
    EMPTY_ANALYSIS,
    OracleUnavailable,
    RunConfig,
    account_cost,
    batch,
    build_report,
    curve_csv,
    optimize,
    render_report,
)
from trial_redesign.memory import GlobalMemory
from trial_redesign.oracle import RemoteOracle
from trial_redesign.synthetic import generate_ablation, generate_planted


def planted(n=20):
    return generate_planted(n)


def run(g, cfg=None, mem=None, trace_dir=None):
    job = synthetic_jobs([g])[0]
    return optimize(job.protocol, job.failure_mode, mem, cfg or RunConfig(), job.provider, job.oracle,
                    trace_dir=trace_dir)


def test_planted_single_trial_recovers_expected_gain():
    g = next(t for t in planted() if not t.spec.empty)
    res = run(g)
    assert res.delta_p == pytest.approx(g.spec.expected_delta_p, abs=1e-12)
    assert res.trajectory == sorted(res.trajectory)
    assert all(x >= 0 for x in res.trajectory)
    assert len(res.iterations) <= 5


def test_empty_analysis_returns_original():
    g = next(t for t in planted() if t.spec.empty)
    res = run(g)
    assert res.termination == EMPTY_ANALYSIS and res.delta_p == 0.0
    assert res.best.to_document() == res.original.to_document()
    assert len(res.iterations) == 1 and res.iterations[0].targets == []


def test_budget_exhaustion_runs_exactly_n_max():
    trials = generate_ablation()[:3]
    for g in trials:
        res = run(g, RunConfig(use_memory=False))
        assert res.termination == BUDGET_EXHAUSTED and len(res.iterations) == 5
    res = run(trials[0], RunConfig(use_memory=False, n_max=2))
    assert len(res.iterations) == 2


def test_incumbent_monotone_and_nonnegative():
    for g in planted():
        res = run(g)
        assert res.delta_p >= 0
        for it in res.iterations:
            if it.incumbent_changed:
                assert it.r_max is not None and it.r_best == it.r_max
        assert all(b >= a for a, b in zip(res.trajectory, res.trajectory[1:]))


def test_guidance_only_at_first_iteration():
    mem = GlobalMemory()
    seen_guidance = False
    for g in planted(6):
        res = run(g, RunConfig(log_prompts=True), mem)
        mem = res.global_after
        for c in res.calls:
            if "<strategic_guidance>" in c.prompt:
                assert c.iteration == 1
                seen_guidance = True
    assert seen_guidance


def test_trace_files_and_pool_gate(tmp_path):
    g = generate_ablation()[0]
    res = run(g, trace_dir=tmp_path)
    for name in ("exploration.jsonl", "iterations.jsonl", "calls.jsonl"):
        assert os.path.getsize(tmp_path / name) > 0
    rows = [json.loads(line) for line in open(tmp_path / "iterations.jsonl")]
    assert len(rows) == len(res.iterations)
    checked = 0
    for row in rows:
        rs = {r["augmentation_id"]: r["r"] for r in row["rewards"]}
        positive = [r for r in rs.values() if r is not None and r > 0]
        if not positive:
            assert row["pool_added"] == []
            continue
        p75 = nearest_rank_oracle(positive, 75)
        assert sorted(row["pool_added"]) == sorted(k for k, r in rs.items() if r is not None and r > 0 and r >= p75)
        checked += 1
    assert checked >= 1
    # rerun starts clean rather than appending
    run(g, trace_dir=tmp_path)
    assert len(open(tmp_path / "iterations.jsonl").readlines()) == len(rows)


def test_account_cost_arithmetic():
    a, b = 2e-6, 5e-6
    calls = [CallRecord("s", 1, 600, 200, True), CallRecord("s", 1, 400, 300, True)]
    c = account_cost(calls, rate_in=a, rate_out=b)
    assert (c.tokens_in, c.tokens_out, c.provider_calls) == (1000, 500)[:2] + (2,)
    assert c.estimated_currency == pytest.approx(1000 * a + 500 * b)
    zero = account_cost([], oracle_calls=0, rate_in=a, rate_out=b)
    assert zero.estimated_currency == 0.0 and zero.tokens_in == 0


def test_batch_report_consistency_and_cost_sum():
    trials = planted(8)
    out = batch(synthetic_jobs(trials), None, RunConfig())
    rep = out.report
    assert rep["n_trials"] == 8 and rep["n_completed"] == 8 and rep["n_failed"] == 0
    deltas = [t["delta_p"] for t in rep["trials"]]
    assert rep["mean_delta_p"] == pytest.approx(math.fsum(deltas) / 8, abs=1e-15)
    assert rep["positive_rate"] == sum(d > 0 for d in deltas) / 8
    total = math.fsum(t["cost"]["estimated_currency"] for t in rep["trials"])
    assert rep["cost"]["estimated_currency"] == pytest.approx(total, abs=1e-15)
    assert rep["cost"]["tokens_in"] == sum(t["cost"]["tokens_in"] for t in rep["trials"])
    assert math.fsum(rep["per_iteration_mean_gain"]) == pytest.approx(rep["mean_delta_p"], abs=1e-12)
    assert "mean delta p" in render_report(rep)
    assert curve_csv(rep).splitlines()[0].startswith("iteration")


def test_empty_batch():
    rep = batch([], None, RunConfig()).report
    assert rep["n_trials"] == 0 and rep["mean_delta_p"] == 0.0
    assert rep["cost"]["estimated_currency"] == 0.0 and rep["trials"] == []
    assert build_report([], [], [], RunConfig())["n_completed"] == 0


def test_batch_determinism_and_parallel_agreement():
    trials = planted(6)
    one = batch(synthetic_jobs(trials), None, RunConfig())
    two = batch(synthetic_jobs(trials), None, RunConfig())
    assert [r.to_json() for r in one.results] == [r.to_json() for r in two.results]
    assert json.dumps(one.report, sort_keys=True) == json.dumps(two.report, sort_keys=True)
    par = batch(synthetic_jobs(trials), None, RunConfig(use_memory=False), parallelism=3)
    seq = batch(synthetic_jobs(trials), None, RunConfig(use_memory=False))
    assert [r.to_json() for r in par.results] == [r.to_json() for r in seq.results]


def test_failed_trial_recorded_and_batch_continues():
    jobs = synthetic_jobs(planted(2))
    jobs[0].oracle = RemoteOracle("http://127.0.0.1:9/score", timeout=0.2)
    rep = batch(jobs, None, RunConfig()).report
    assert rep["n_failed"] == 1 and "error" in rep["trials"][0] and rep["n_completed"] == 1


def test_unreachable_oracle_raises_on_single_run():
    job = synthetic_jobs(planted(1))[0]
    with pytest.raises(OracleUnavailable):
        optimize(job.protocol, job.failure_mode, None, RunConfig(), job.provider,
                 RemoteOracle("http://127.0.0.1:9/score", timeout=0.2))


def test_global_memory_not_mutated():
    mem = GlobalMemory()
    g = next(t for t in planted() if not t.spec.empty)
    res = run(g, mem=mem)
    assert mem.is_empty() and not res.global_after.is_empty()
    blank = run(g, RunConfig(use_memory=False), mem)
    assert blank.global_after.is_empty()


def test_config_roundtrip(tmp_path):
    from trial_redesign.engine import load_config

    path = tmp_path / "c.json"
    path.write_text(json.dumps({"n_max": 3, "beam_width": 2}))
    cfg = load_config(path)
    assert cfg.n_max == 3 and cfg.beam_width == 2 and cfg.to_dict()["n_max"] == 3
    path.write_text(json.dumps({"bogus": 1}))
    with pytest.raises((ValueError, TypeError)):
        load_config(path)


def test_scripted_provider_reuse_is_stateless():
    g = next(t for t in planted() if not t.spec.empty)
    pb = Playbook.from_dict(g.playbook)
    job = synthetic_jobs([g])[0]
    a = optimize(job.protocol, job.failure_mode, None, RunConfig(), ScriptedProvider(pb), job.oracle)
    b = optimize(job.protocol, job.failure_mode, None, RunConfig(), ScriptedProvider(pb), job.oracle)
    assert a.to_json() == b.to_json()
