"""Command-line entry points. Everything runs in-process; ``serve-oracle`` is the only server."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from typing import Optional, Sequence

from .agents.provider import ScriptMiss, provider_from_uri
from .engine import (
    OracleUnavailable,
    RunConfig,
    batch,
    curve_csv,
    jobs_from_manifest,
    load_config,
    optimize,
    render_report,
)
from .memory import MemoryFormatError, load_global, render_global, save_global
from .oracle import load_scoring_spec, oracle_from_uri
from .protocol import FailureMode, ProtocolError, canonical_json, load_protocol
from .synthetic import ABLATION, PLANTED, generate

log = logging.getLogger("trial_redesign")


class FatalError(Exception):
    """Configuration, input or oracle problem that ends the command with exit status 1."""


def _write_bytes(path: str, data: bytes) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(data)


def _config(args) -> RunConfig:
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
    except FileNotFoundError as exc:
        raise FatalError(f"config not found: {exc.filename}") from exc
    except (ValueError, TypeError) as exc:
        raise FatalError(f"invalid config: {exc}") from exc
    overrides = {}
    if getattr(args, "no_memory", False):
        overrides["use_memory"] = False
    if getattr(args, "no_pool", False):
        overrides["use_pool"] = False
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "log_prompts", False):
        overrides["log_prompts"] = True
    return replace(cfg, **overrides) if overrides else cfg


def _memory(path: Optional[str]):
    if not path:
        return None
    try:
        return load_global(path)
    except MemoryFormatError as exc:
        raise FatalError(f"invalid memory file {path}: {exc}") from exc


def cmd_optimize(args) -> int:
    cfg = _config(args)
    try:
        trial = load_protocol(args.trial)
    except FileNotFoundError as exc:
        raise FatalError(f"trial not found: {args.trial}") from exc
    except ProtocolError as exc:
        raise FatalError(f"invalid trial {args.trial}: {exc}") from exc
    try:
        oracle = oracle_from_uri(args.oracle)
        provider = provider_from_uri(args.provider, seed=cfg.seed)
    except (OSError, ValueError, KeyError) as exc:
        raise FatalError(str(exc)) from exc
    mem = _memory(args.memory)
    result = optimize(trial, FailureMode(args.failure_mode), mem, cfg, provider, oracle, trace_dir=args.trace_dir)
    _write_bytes(args.out, result.to_json())
    if args.memory and cfg.use_memory:
        save_global(args.memory, result.global_after)
    print(f"{trial.nct_id}: p0={result.p0:.4f} p*={result.p_star:.4f} dp={result.delta_p:+.4f} "
          f"({result.termination}, {len(result.iterations)} iterations)")
    return 0


def cmd_batch(args) -> int:
    cfg = _config(args)
    try:
        jobs = jobs_from_manifest(args.manifest)
    except FileNotFoundError as exc:
        raise FatalError(f"manifest input not found: {exc.filename}") from exc
    except (ProtocolError, ValueError, KeyError) as exc:
        raise FatalError(f"invalid manifest {args.manifest}: {exc}") from exc
    mem = _memory(args.memory)
    outcome = batch(jobs, mem, cfg, parallelism=args.parallelism, trace_dir=args.trace_dir)
    _write_bytes(args.out, canonical_json(outcome.report))
    if args.results_dir:
        for job, res in zip(jobs, outcome.results):
            if res is not None:
                _write_bytes(os.path.join(args.results_dir, f"{job.name}.json"), res.to_json())
    if args.memory and cfg.use_memory:
        save_global(args.memory, outcome.global_after)
    print(render_report(outcome.report))
    return 0


def cmd_report(args) -> int:
    try:
        with open(args.report, encoding="utf-8") as fh:
            report = json.load(fh)
    except FileNotFoundError as exc:
        raise FatalError(f"report not found: {args.report}") from exc
    except ValueError as exc:
        raise FatalError(f"report is not JSON: {exc}") from exc
    text = render_report(report)
    if args.text_out:
        _write_bytes(args.text_out, text.encode("utf-8") + b"\n")
    if args.curve:
        _write_bytes(args.curve, curve_csv(report).encode("utf-8"))
    print(text)
    return 0


def cmd_memory(args) -> int:
    mem = _memory(args.memory)
    print(render_global(mem))
    return 0


def cmd_gen_synthetic(args) -> int:
    if args.n < 1:
        raise FatalError("--n must be at least 1")
    manifest = generate(args.kind, args.n, args.seed, args.out)
    print(manifest)
    return 0


def cmd_serve_oracle(args) -> int:
    from .service import serve

    try:
        spec = load_scoring_spec(args.spec)
    except FileNotFoundError as exc:
        raise FatalError(f"scoring spec not found: {args.spec}") from exc
    except (ValueError, KeyError) as exc:
        raise FatalError(f"invalid scoring spec: {exc}") from exc
    serve(spec, args.host, args.port)
    return 0


def _run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--memory", help="global memory file (read, then updated after the run)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--trace-dir", help="directory for exploration, iteration and call traces")
    p.add_argument("--no-memory", action="store_true", help="ablation: no local or global memory")
    p.add_argument("--no-pool", action="store_true", help="ablation: no redesign pool reuse")
    p.add_argument("--log-prompts", action="store_true", help="keep prompt and completion text in call traces")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trial-redesign", description="Iterative clinical trial protocol redesign.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("optimize", help="redesign one trial")
    p.add_argument("--trial", required=True)
    p.add_argument("--failure-mode", required=True, choices=[m.value for m in FailureMode])
    p.add_argument("--out", required=True)
    p.add_argument("--oracle", required=True, help="ref:SPEC or remote:URL")
    p.add_argument("--provider", default="http", help="scripted:PLAYBOOK or http")
    _run_flags(p)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("batch", help="redesign every trial in a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="corpus report (JSON)")
    p.add_argument("--results-dir", help="write one result document per trial here")
    p.add_argument("--parallelism", type=int, default=1)
    _run_flags(p)
    p.set_defaults(func=cmd_batch)

    p = sub.add_parser("report", help="render a corpus report")
    p.add_argument("report")
    p.add_argument("--curve", help="write the per-iteration curve as CSV")
    p.add_argument("--text-out", help="also write the text tables here")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("memory", help="global memory tools")
    msub = p.add_subparsers(dest="memory_command", required=True)
    q = msub.add_parser("inspect", help="pretty-print a global memory file")
    q.add_argument("--memory", required=True)
    q.set_defaults(func=cmd_memory)

    p = sub.add_parser("gen-synthetic", help="write a seeded synthetic corpus")
    p.add_argument("--kind", choices=[PLANTED, ABLATION], default=PLANTED)
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("serve-oracle", help="serve a reference oracle over HTTP")
    p.add_argument("--spec", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve_oracle)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except OracleUnavailable as exc:
        print(f"error: OracleUnavailable: {exc}", file=sys.stderr)
        return 1
    except ScriptMiss as exc:
        print(f"error: ScriptMiss: {exc}", file=sys.stderr)
        return 1
    except FatalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
