"""Prompt-driven stages (analysis, augmentation, validation) over a text-completion provider."""

from .analysis import AnalysisResult, EmptyAnalysis, prioritize, run_analysis
from .augment import AllTargetsEmpty, run_augment
from .parsing import MalformedNumber, NoBlockFound, ParseError, TruncatedBlock, parse_all, parse_tagged
from .provider import (
    Completion,
    Playbook,
    ProviderError,
    RecordingProvider,
    ScriptedProvider,
    ScriptMiss,
    Session,
    load_playbook,
    provider_from_uri,
)
from .types import Category, ClassificationScores, Impact, ModificationTarget
from .validate import passing, run_validate

__all__ = [
    "AllTargetsEmpty", "AnalysisResult", "Category", "ClassificationScores", "Completion", "EmptyAnalysis", "Impact",
    "MalformedNumber", "ModificationTarget", "NoBlockFound", "ParseError", "Playbook", "ProviderError",
    "RecordingProvider", "ScriptMiss", "ScriptedProvider", "Session", "TruncatedBlock", "load_playbook", "parse_all",
    "parse_tagged", "passing", "prioritize", "provider_from_uri", "run_analysis", "run_augment", "run_validate",
]
