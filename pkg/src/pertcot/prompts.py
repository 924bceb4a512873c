"""Rendering of the frozen prompt templates.

Templates live as plain-text assets with ``{{variable}}`` placeholders and
are substituted verbatim; a golden-fixture test pins their bytes. Rendering
is pure: identical inputs produce identical bytes.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from importlib import resources

from .corpus import PerturbationRecord
from .errors import PromptError

_PLACEHOLDER = re.compile(r"\{\{([a-z_]+)\}\}")


class TemplateKind(Enum):
    STANDARD_SYSTEM = "standard_system"
    STANDARD_USER = "standard_user"
    DIRECTION_USER = "direction_user"
    GENERATOR_SYSTEM = "generator_system"
    GENERATOR_USER = "generator_user"
    CRITIC_SYSTEM = "critic_system"
    CRITIC_USER = "critic_user"


# The generator user query is the standard user query; both kinds map to
# the same stored text.
_ASSET_BY_KIND = {
    TemplateKind.STANDARD_SYSTEM: "standard_system.txt",
    TemplateKind.STANDARD_USER: "standard_user.txt",
    TemplateKind.DIRECTION_USER: "direction_user.txt",
    TemplateKind.GENERATOR_SYSTEM: "generator_system.txt",
    TemplateKind.GENERATOR_USER: "standard_user.txt",
    TemplateKind.CRITIC_SYSTEM: "critic_system.txt",
    TemplateKind.CRITIC_USER: "critic_user.txt",
}


@dataclass(frozen=True)
class PromptBundle:
    """A rendered (system, user) pair plus the substitutions that produced it."""

    system_text: str
    user_text: str
    kind_pair: tuple[TemplateKind, TemplateKind]
    bindings: dict[str, str]


@lru_cache(maxsize=None)
def template_text(kind: TemplateKind) -> str:
    """Raw template text for a kind, with the file's single trailing newline removed."""
    asset = resources.files("pertcot.templates").joinpath(_ASSET_BY_KIND[kind])
    text = asset.read_text(encoding="utf-8")
    return text.removesuffix("\n")


def _substitute(kind: TemplateKind, bindings: dict[str, str]) -> str:
    # Single-pass substitution: values are never re-scanned, so payload that
    # happens to look like a placeholder cannot leave a dangling marker.
    def fill(match: re.Match[str]) -> str:
        name = match.group(1)
        if name not in bindings:
            raise PromptError(f"{kind.value}: unbound template variable {name!r}")
        value = bindings[name]
        if not value:
            raise PromptError(f"{kind.value}: empty value for template variable {name!r}")
        return value

    return _PLACEHOLDER.sub(fill, template_text(kind))


def _record_bindings(record: PerturbationRecord) -> dict[str, str]:
    for name, value in (
        ("perturbation gene", record.perturbation_gene),
        ("target gene", record.target_gene),
        ("cell line", record.cell_line),
    ):
        if not value:
            raise PromptError(f"record field {name} is empty")
    return {
        "gene_name": record.perturbation_gene,
        "target_gene": record.target_gene,
        "cell_type": record.cell_line,
    }


def render_standard(record: PerturbationRecord) -> PromptBundle:
    """Three-class prediction prompt: the model sees no outcome."""
    bindings = _record_bindings(record)
    return PromptBundle(
        system_text=template_text(TemplateKind.STANDARD_SYSTEM),
        user_text=_substitute(TemplateKind.STANDARD_USER, bindings),
        kind_pair=(TemplateKind.STANDARD_SYSTEM, TemplateKind.STANDARD_USER),
        bindings=bindings,
    )


def render_direction(record: PerturbationRecord) -> PromptBundle:
    """Direction-of-change variant: same system prompt, two-option user query."""
    bindings = _record_bindings(record)
    return PromptBundle(
        system_text=template_text(TemplateKind.STANDARD_SYSTEM),
        user_text=_substitute(TemplateKind.DIRECTION_USER, bindings),
        kind_pair=(TemplateKind.STANDARD_SYSTEM, TemplateKind.DIRECTION_USER),
        bindings=bindings,
    )


def render_generator(record: PerturbationRecord) -> PromptBundle:
    """Explanation-from-outcome prompt: the ground-truth label fills the solution slot."""
    bindings = _record_bindings(record)
    bindings["solution"] = record.label.serialized
    return PromptBundle(
        system_text=_substitute(TemplateKind.GENERATOR_SYSTEM, bindings),
        user_text=_substitute(TemplateKind.GENERATOR_USER, bindings),
        kind_pair=(TemplateKind.GENERATOR_SYSTEM, TemplateKind.GENERATOR_USER),
        bindings=bindings,
    )


def render_critic(original_user_query: str, generated_thinking: str) -> PromptBundle:
    """Grading prompt over a generated think block and the query that produced it."""
    if not original_user_query:
        raise PromptError("original user query is empty")
    if not generated_thinking:
        raise PromptError("generated thinking is empty")
    bindings = {"user_query": original_user_query, "generated_thinking": generated_thinking}
    return PromptBundle(
        system_text=template_text(TemplateKind.CRITIC_SYSTEM),
        user_text=_substitute(TemplateKind.CRITIC_USER, bindings),
        kind_pair=(TemplateKind.CRITIC_SYSTEM, TemplateKind.CRITIC_USER),
        bindings=bindings,
    )
