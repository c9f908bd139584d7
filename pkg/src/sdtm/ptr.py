"""Prompt token reweighting: steer attention toward structure early, detail late.

Each prompt token falls into one of five categories; a per-step multiplier
interpolates geometrically between category-specific endpoints and scales
that token's attention columns, after which rows are renormalized.  Category
assignments come from a provider: an annotation file by default, or a remote
categorization service with a neutral fallback.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import requests

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 10.0


class PromptCategory(Enum):
    STRONG_STRUCTURE = "strong_structure"
    WEAK_STRUCTURE = "weak_structure"
    NEUTRAL = "neutral"
    WEAK_DETAIL = "weak_detail"
    STRONG_DETAIL = "strong_detail"


def default_endpoints(intensity: float) -> dict[PromptCategory, tuple[float, float]]:
    """Category (start, end) multiplier pairs for a given intensity > 1.

    Structure categories start high and end low; detail categories mirror
    them.  The weak variants are softened by a factor of two on each end.
    """
    a = intensity
    return {
        PromptCategory.STRONG_STRUCTURE: (a, 1.0 / a),
        PromptCategory.WEAK_STRUCTURE: (a / 2.0, 2.0 / a),
        PromptCategory.NEUTRAL: (1.0, 1.0),
        PromptCategory.WEAK_DETAIL: (2.0 / a, a / 2.0),
        PromptCategory.STRONG_DETAIL: (1.0 / a, a),
    }


@dataclass
class PromptWeightPlan:
    """Per-prompt-token categories plus the multiplier endpoint table."""

    tokens: tuple[str, ...]
    categories: tuple[PromptCategory, ...]
    intensity: float = 1.5
    endpoints: dict[PromptCategory, tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if len(self.tokens) != len(self.categories):
            raise ValueError("one category per prompt token required")
        if self.intensity <= 1.0:
            raise ValueError("intensity must exceed 1")
        if not self.endpoints:
            self.endpoints = default_endpoints(self.intensity)
        for cat, (start, end) in self.endpoints.items():
            if start <= 0 or end <= 0:
                raise ValueError(f"multipliers must be positive, got {cat}: ({start}, {end})")
        if self.endpoints[PromptCategory.NEUTRAL] != (1.0, 1.0):
            raise ValueError("neutral endpoints must be (1, 1)")


class Categorizer(Protocol):
    def __call__(self, prompt: str, tokens: Sequence[str]) -> list[PromptCategory] | None:
        ...


class FileCategorizer:
    """Categories read from an annotation JSON document.

    The document shape is ``{"prompt": ..., "tokens": [...], "categories":
    [...]}``; tokens found there get their annotated category, everything
    else defaults to neutral with a logged warning.
    """

    def __init__(self, mapping: dict[str, PromptCategory]):
        self.mapping = mapping

    @classmethod
    def from_path(cls, path) -> "FileCategorizer":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        tokens = doc["tokens"]
        categories = doc["categories"]
        if len(tokens) != len(categories):
            raise ValueError(f"{path}: tokens and categories differ in length")
        return cls({t: PromptCategory(c) for t, c in zip(tokens, categories)})

    def __call__(self, prompt: str, tokens: Sequence[str]) -> list[PromptCategory]:
        out = []
        for t in tokens:
            cat = self.mapping.get(t)
            if cat is None:
                log.warning("token %r has no annotation; defaulting to neutral", t)
                cat = PromptCategory.NEUTRAL
            out.append(cat)
        return out


class RemoteCategorizer:
    """Client for a remote categorization service.

    Posts ``{"prompt", "tokens"}`` to ``<base_url>/categorize`` and expects
    the same document back with a ``categories`` list.  Any failure (network,
    non-200, malformed body) is non-fatal: the caller falls back to neutral.
    Responses are cached by (prompt, base_url).
    """

    def __init__(self, base_url: str, timeout: float = DEFAULT_TIMEOUT):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self._cache: dict[tuple[str, str], list[PromptCategory]] = {}

    def __call__(self, prompt: str, tokens: Sequence[str]) -> list[PromptCategory] | None:
        key = (prompt, self.base_url)
        if key in self._cache:
            return list(self._cache[key])
        try:
            resp = requests.post(
                f"{self.base_url}/categorize",
                json={"prompt": prompt, "tokens": list(tokens)},
                timeout=self.timeout,
            )
            if resp.status_code != 200:
                log.warning("categorizer returned HTTP %s", resp.status_code)
                return None
            doc = resp.json()
            cats = [PromptCategory(c) for c in doc["categories"]]
            if len(cats) != len(tokens):
                raise ValueError("category count mismatch")
        except Exception as exc:  # non-fatal by contract
            log.warning("remote categorization failed (%s); using neutral", exc)
            return None
        self._cache[key] = cats
        return list(cats)


def categorize(tokens: Sequence[str], provider: Categorizer, prompt: str = "") -> list[PromptCategory]:
    """One category per token; provider failure degrades to all-neutral."""
    if not tokens:
        return []
    cats = provider(prompt, tokens)
    if cats is None:
        return [PromptCategory.NEUTRAL] * len(tokens)
    return cats


def multiplier_at(plan: PromptWeightPlan, token_index: int, step: int, total_steps: int) -> float:
    """Geometric interpolation between the token category's endpoints.

    With progress s = step / (total_steps - 1) the multiplier is
    ``start**(1-s) * end**s``; neutral tokens return exactly 1 at all steps.
    """
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    cat = plan.categories[token_index]
    if cat is PromptCategory.NEUTRAL:
        return 1.0
    start, end = plan.endpoints[cat]
    s = step / (total_steps - 1) if total_steps > 1 else 0.0
    return float(start ** (1.0 - s) * end**s)


def reweight_attention(
    attn: np.ndarray,
    plan: PromptWeightPlan,
    prompt_columns: Sequence[int],
    step: int,
    total_steps: int,
) -> np.ndarray:
    """Scale prompt-token columns by their multipliers and renormalize rows.

    ``prompt_columns[j]`` is the attention column of prompt token j.  Image
    columns are untouched before normalization, and the output stays
    row-stochastic.  An all-ones multiplier assignment is an exact no-op.
    """
    attn = np.asarray(attn, dtype=np.float64)
    cols = np.asarray(prompt_columns, dtype=np.int64)
    if cols.shape[0] > len(plan.tokens):
        raise ValueError("more prompt columns than plan tokens")
    mults = np.array(
        [multiplier_at(plan, j, step, total_steps) for j in range(cols.shape[0])],
        dtype=np.float64,
    )
    if np.all(mults == 1.0):
        return attn.copy()
    scaled = attn.copy()
    scaled[:, cols] *= mults
    sums = scaled.sum(axis=1, keepdims=True)
    if np.any(sums <= 0.0):
        raise ValueError("attention row vanished after reweighting")
    return scaled / sums
