"""Psychology-informed prompt assembly for trait-specific text embedding.

A prompt is the task description for one trait, the interview transcript,
and the subject's rendered demographic block, joined in that fixed order by
single newlines. The shipped variant bank holds several hand-written task
descriptions per trait (the published method used per-trait prompt sweeps;
the winning wordings are not public, so these are our own reconstructions).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .model import TRAIT_NAMES, TRAITS

__all__ = [
    "PromptError", "PromptTemplate", "SubjectMeta",
    "build_prompt", "prompt_variants", "load_variant_bank", "save_variant_bank",
    "NO_TRANSCRIPT_PLACEHOLDER", "DEFAULT_META_FIELDS",
]

NO_TRANSCRIPT_PLACEHOLDER = "[no transcript]"

DEFAULT_META_FIELDS = (
    ("gender", "Gender"),
    ("age", "Age"),
    ("education", "Education"),
    ("work_experience", "Work experience"),
)


class PromptError(ValueError):
    pass


@dataclass(frozen=True)
class PromptTemplate:
    trait: str
    task_description: str
    meta_rendering: tuple[tuple[str, str], ...] = DEFAULT_META_FIELDS

    def __post_init__(self):
        if self.trait not in TRAITS:
            raise PromptError(f"unknown trait {self.trait!r}")
        if not self.task_description.strip():
            raise PromptError("task description must be non-empty")
        if TRAIT_NAMES[self.trait] not in self.task_description:
            raise PromptError(
                f"task description for {self.trait} must mention "
                f"{TRAIT_NAMES[self.trait]!r}")


@dataclass(frozen=True)
class SubjectMeta:
    gender: str | None = None
    age: int | str | None = None
    education: str | None = None
    work_experience: str | None = None

    def __post_init__(self):
        if self.age is not None and str(self.age).strip():
            try:
                value = int(str(self.age))
            except ValueError as exc:
                raise PromptError(f"age must parse as an integer, got {self.age!r}") from exc
            if value <= 0:
                raise PromptError(f"age must be positive, got {value}")

    def rendered(self, field_name: str) -> str:
        value = getattr(self, field_name, None)
        if value is None or not str(value).strip():
            return "unknown"
        return str(value)


def build_prompt(template: PromptTemplate, asr_text: str, meta: SubjectMeta) -> str:
    """Deterministic concatenation: description, transcript, meta block,
    newline-separated. No truncation; embedding backends own length limits."""
    transcript = asr_text.strip() if asr_text and asr_text.strip() else NO_TRANSCRIPT_PLACEHOLDER
    meta_block = "; ".join(
        f"{label}: {meta.rendered(name)}" for name, label in template.meta_rendering
    )
    return "\n".join((template.task_description, transcript, meta_block))


# ---------------------------------------------------------------------------
# Variant bank
# ---------------------------------------------------------------------------


def _bank_from_obj(obj: dict) -> dict[str, list[PromptTemplate]]:
    bank: dict[str, list[PromptTemplate]] = {}
    for trait in TRAITS:
        entries = obj.get(trait)
        if not entries:
            raise PromptError(f"variant bank is missing trait {trait}")
        bank[trait] = [PromptTemplate(trait, e["task_description"]) for e in entries]
    return bank


def load_variant_bank(path: Path | str | None = None) -> dict[str, list[PromptTemplate]]:
    """Load prompt variants from a definition file; default is the bank
    shipped with the package."""
    if path is None:
        text = resources.files("traitfusion").joinpath("prompt_bank.json").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    return _bank_from_obj(json.loads(text))


def save_variant_bank(bank: dict[str, list[PromptTemplate]], path: Path | str) -> None:
    obj = {
        trait: [{"task_description": t.task_description} for t in templates]
        for trait, templates in bank.items()
    }
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", "utf-8")


def prompt_variants(trait: str, n: int = 1,
                    bank: dict[str, list[PromptTemplate]] | None = None) -> list[PromptTemplate]:
    """First n templates for the trait (the default template first); n larger
    than the bank returns the whole bank."""
    if trait not in TRAITS:
        raise PromptError(f"unknown trait {trait!r}")
    if n < 1:
        raise PromptError(f"n must be >= 1, got {n}")
    if bank is None:
        bank = load_variant_bank()
    return bank[trait][:n]


def default_template(trait: str) -> PromptTemplate:
    return prompt_variants(trait, 1)[0]
