"""Prompt templates shipped as package data (``prompts/*.txt``, ``string.Template`` syntax)."""

from __future__ import annotations

from functools import lru_cache
from importlib import resources
from string import Template

TEMPLATE_VERSION = "1"

TEMPLATES = (
    "ae_profile",
    "augment_add",
    "augment_criterion",
    "augment_dosage_escalate",
    "augment_dosage_reduce",
    "augment_outcome",
    "classification",
    "design_pivots",
    "guidance",
    "mechanism",
    "tradeoff",
    "validate",
)


@lru_cache(maxsize=None)
def load_template(name: str) -> Template:
    if name not in TEMPLATES:
        raise KeyError(f"no prompt template {name!r}")
    text = resources.files(__package__).joinpath("prompts", f"{name}.txt").read_text(encoding="utf-8")
    return Template(text)


@lru_cache(maxsize=None)
def placeholders(name: str) -> frozenset[str]:
    # Template.get_identifiers only exists from 3.11
    tpl = load_template(name)
    found = set()
    for m in tpl.pattern.finditer(tpl.template):
        ident = m.group("named") or m.group("braced")
        if ident:
            found.add(ident)
    return frozenset(found)


def render(name: str, **fields) -> str:
    """Fill a template. Every placeholder must be supplied; extra fields are an error too."""
    tpl = load_template(name)
    wanted = placeholders(name)
    extra = set(fields) - wanted
    if extra:
        raise KeyError(f"{name}: unexpected fields {sorted(extra)}")
    return tpl.substitute({k: str(v) for k, v in fields.items()})
