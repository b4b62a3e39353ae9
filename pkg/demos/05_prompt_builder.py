#!/usr/bin/env python3
"""Assemble psychology-informed prompts for trait-specific text embedding.

Each prompt is three newline-separated sections in fixed order: the trait's
task description, the interview transcript, and the subject's demographic
block. Per-trait prompt variants live in an editable definition file so a
downstream embedding backend can sweep them.
"""

from traitfusion.model import TRAIT_NAMES
from traitfusion.prompts import (
    SubjectMeta, build_prompt, load_variant_bank, prompt_variants,
)

transcript = (
    "I keep a checklist for every project and review it each morning. "
    "When a deadline slips I stay late until the plan is back on track, "
    "and I always double-check the numbers before anything goes out."
)
meta = SubjectMeta(gender="male", age=42, education="master",
                   work_experience="15 years")

template = prompt_variants("C", 1)[0]
print("=" * 70)
print(build_prompt(template, transcript, meta))
print("=" * 70)

# missing meta fields render as "unknown"; an empty transcript gets a
# placeholder so every prompt always has all three sections
sparse = build_prompt(template, "", SubjectMeta(gender="female"))
print("\nsparse-input prompt:")
print(sparse)

# the shipped bank: several descriptions per trait for embedding sweeps
bank = load_variant_bank()
print("\nvariant bank:")
for trait, templates in bank.items():
    print(f"  {trait} ({TRAIT_NAMES[trait]}): {len(templates)} variants")
    print(f"    default: {templates[0].task_description[:72]}...")
