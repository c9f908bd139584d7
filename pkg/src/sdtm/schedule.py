"""Compression scheduling: dynamic ratios and calibrated adaptive thresholds.

The dynamic-ratio schedule follows a quarter-period cosine from
``basic_ratio + max_deviation`` down to ``basic_ratio - max_deviation`` over
the denoising run, with designated steps and layers pinned to the minimum.
The adaptive-threshold path calibrates, from a few sampled runs, a table
mapping merge ratios at 1% granularity to the score thresholds that realize
them, plus a per-(step, layer) similarity statistic that steers the ratio.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .grid import MergeGroup, MergePlan
from .numerics import softmax

STRUCTURE = "structure"
DETAIL = "detail"

MAP_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ScheduleConfig:
    """Compression schedule parameters for one denoising run."""

    total_steps: int
    stage_boundary: float = 0.6
    basic_ratio: float = 0.5
    max_deviation: float = 0.2
    special_steps: frozenset[int] = frozenset({0})
    special_layers: frozenset[int] = frozenset({0, 1, 2, 3})
    mode: str = "dynamic_ratio"  # or "adaptive_threshold"

    def __post_init__(self) -> None:
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if not 0.0 < self.stage_boundary < 1.0:
            raise ValueError("stage_boundary must lie in (0, 1)")
        if self.basic_ratio - self.max_deviation < 0 or self.basic_ratio + self.max_deviation > 1:
            raise ValueError("basic_ratio +/- max_deviation must stay within [0, 1]")
        if self.max_deviation < 0:
            raise ValueError("max_deviation must be >= 0")
        if self.mode not in ("dynamic_ratio", "adaptive_threshold"):
            raise ValueError(f"unknown schedule mode {self.mode!r}")
        object.__setattr__(self, "special_steps", frozenset(self.special_steps))
        object.__setattr__(self, "special_layers", frozenset(self.special_layers))


def stage_of(cfg: ScheduleConfig, step: int) -> str:
    """Structure stage while the elapsed fraction is below the boundary."""
    if not 0 <= step < cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps})")
    return STRUCTURE if step / cfg.total_steps < cfg.stage_boundary else DETAIL


def dynamic_ratio(cfg: ScheduleConfig, step: int, layer: int) -> float:
    """Cosine-decayed merge ratio for (step, layer).

    Special steps and layers return the minimum directly.  Elsewhere the
    ratio follows ``(r - d) + 2d * cos(pi/2 * s)`` over normalized progress
    s = step / (total_steps - 1), hitting exactly r + d at s = 0 and r - d at
    s = 1 and decreasing monotonically in between.
    """
    if not 0 <= step < cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps})")
    lo = cfg.basic_ratio - cfg.max_deviation
    if step in cfg.special_steps or layer in cfg.special_layers:
        return lo
    if cfg.total_steps == 1 or step == 0:
        return cfg.basic_ratio + cfg.max_deviation
    if step == cfg.total_steps - 1:
        return lo
    s = step / (cfg.total_steps - 1)
    return lo + 2.0 * cfg.max_deviation * math.cos(math.pi / 2.0 * s)


@dataclass
class SimilarityDistribution:
    """Per-(step, layer) mean score statistic, raw and min-max scaled to [-1, 1]."""

    raw: dict[tuple[int, int], float]
    scaled: dict[tuple[int, int], float]

    @classmethod
    def from_raw(cls, raw: Mapping[tuple[int, int], float]) -> "SimilarityDistribution":
        values = list(raw.values())
        lo, hi = min(values), max(values)
        if hi == lo:
            # degenerate range: neutral deviation everywhere
            scaled = {k: 0.0 for k in raw}
        else:
            scaled = {k: 2.0 * (v - lo) / (hi - lo) - 1.0 for k, v in raw.items()}
        return cls(raw=dict(raw), scaled=scaled)


def percentile_thresholds(scores: Sequence[float]) -> np.ndarray:
    """Thresholds realizing each merge percentage on one score population.

    Entry p is the value theta such that selecting with strict ``score >
    theta`` admits the top p% of the descending-sorted scores: the midpoint
    between the last admitted and the first rejected score.  p = 0 sits at
    the maximum (admits none), p = 100 strictly below the minimum.
    """
    s = np.sort(np.asarray(scores, dtype=np.float64))[::-1]
    n = s.shape[0]
    if n == 0:
        raise ValueError("empty score population")
    out = np.empty(101, dtype=np.float64)
    for p in range(101):
        c = (p * n + 50) // 100  # round half up
        if c <= 0:
            out[p] = s[0]
        elif c >= n:
            out[p] = s[-1] - 1.0
        else:
            out[p] = (s[c - 1] + s[c]) / 2.0
    return out


@dataclass
class RatioThresholdMap:
    """Calibrated ratio-to-threshold table at 1% granularity per (step, layer)."""

    total_steps: int
    layers: int
    thresholds: dict[tuple[int, int], np.ndarray]
    similarity: SimilarityDistribution
    samples: int
    seed: int
    kinds: dict[str, str] = field(default_factory=dict)

    def threshold_at(self, step: int, layer: int, ratio: float) -> float:
        """Threshold at the nearest 1% bucket of ``ratio`` (round half up)."""
        key = (step, layer)
        if key not in self.thresholds:
            raise KeyError(f"no calibration entry for step {step}, layer {layer}")
        bucket = min(100, int(math.floor(ratio * 100.0 + 0.5)))
        return float(self.thresholds[key][bucket])

    def to_doc(self) -> dict:
        entries = [
            {
                "step": step,
                "layer": layer,
                "thresholds": [float(v) for v in self.thresholds[(step, layer)]],
            }
            for step, layer in sorted(self.thresholds)
        ]
        similarity = [
            {
                "step": step,
                "layer": layer,
                "raw": float(self.similarity.raw[(step, layer)]),
                "scaled": float(self.similarity.scaled[(step, layer)]),
            }
            for step, layer in sorted(self.similarity.raw)
        ]
        return {
            "version": MAP_FORMAT_VERSION,
            "total_steps": self.total_steps,
            "layers": self.layers,
            "granularity_percent": 1,
            "entries": entries,
            "similarity": similarity,
            "meta": {"samples": self.samples, "seed": self.seed, "kinds": dict(self.kinds)},
        }

    @classmethod
    def from_doc(cls, doc: Mapping) -> "RatioThresholdMap":
        if doc.get("version") != MAP_FORMAT_VERSION:
            raise ValueError(f"unsupported map version {doc.get('version')!r}")
        thresholds = {}
        for e in doc["entries"]:
            vec = np.asarray(e["thresholds"], dtype=np.float64)
            if vec.shape != (101,):
                raise ValueError("each entry needs 101 thresholds (0..100%)")
            thresholds[(int(e["step"]), int(e["layer"]))] = vec
        raw = {(int(e["step"]), int(e["layer"])): float(e["raw"]) for e in doc["similarity"]}
        scaled = {(int(e["step"]), int(e["layer"])): float(e["scaled"]) for e in doc["similarity"]}
        meta = doc.get("meta", {})
        return cls(
            total_steps=int(doc["total_steps"]),
            layers=int(doc["layers"]),
            thresholds=thresholds,
            similarity=SimilarityDistribution(raw=raw, scaled=scaled),
            samples=int(meta.get("samples", 0)),
            seed=int(meta.get("seed", 0)),
            kinds=dict(meta.get("kinds", {})),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_doc(), sort_keys=True, indent=2) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "RatioThresholdMap":
        return cls.from_doc(json.loads(Path(path).read_text(encoding="utf-8")))


def calibrate(
    sample_runs: Sequence[Mapping[tuple[int, int], Sequence[float]]],
    cfg: ScheduleConfig,
    *,
    layers: int,
    seed: int = 0,
    kinds: Mapping[str, str] | None = None,
) -> RatioThresholdMap:
    """Build the ratio-threshold map and similarity distribution.

    Each sample run maps (step, layer) to the score population the threshold
    selector would filter there (window totals in the structure stage, best
    match similarities in the detail stage).  Thresholds and the similarity
    statistic are averaged over runs; accumulation order is fixed by sorting
    keys, so identical inputs serialize byte-identically.
    """
    if not sample_runs:
        raise ValueError("at least one sample run required")
    keys = sorted({k for run in sample_runs for k in run})
    thresholds: dict[tuple[int, int], np.ndarray] = {}
    raw: dict[tuple[int, int], float] = {}
    for key in keys:
        per_run = []
        means = []
        for i, run in enumerate(sample_runs):
            scores = run.get(key)
            if not scores:
                raise ValueError(f"sample {i} has no scores for step {key[0]}, layer {key[1]}")
            per_run.append(percentile_thresholds(scores))
            means.append(float(np.mean(np.asarray(scores, dtype=np.float64))))
        thresholds[key] = np.mean(np.stack(per_run), axis=0)
        raw[key] = float(np.mean(means))
    return RatioThresholdMap(
        total_steps=cfg.total_steps,
        layers=layers,
        thresholds=thresholds,
        similarity=SimilarityDistribution.from_raw(raw),
        samples=len(sample_runs),
        seed=seed,
        kinds=dict(kinds or {}),
    )


def implied_ratio(rt_map: RatioThresholdMap, cfg: ScheduleConfig, step: int, layer: int) -> float:
    """Similarity-steered merge ratio: clamp(r + d * scaled_similarity, 0, 1)."""
    key = (step, layer)
    if key not in rt_map.similarity.scaled:
        raise KeyError(f"no similarity entry for step {step}, layer {layer}")
    rho = cfg.basic_ratio + cfg.max_deviation * rt_map.similarity.scaled[key]
    return float(min(1.0, max(0.0, rho)))


def adaptive_threshold(
    rt_map: RatioThresholdMap, cfg: ScheduleConfig, step: int, layer: int
) -> float:
    """Threshold for (step, layer): the map looked up at the implied ratio."""
    return rt_map.threshold_at(step, layer, implied_ratio(rt_map, cfg, step, layer))


def _truncate_structure(plan: MergePlan, target_tokens: int) -> MergePlan:
    per_group = len(plan.groups[0].member_indices) - 1
    keep_groups = target_tokens // per_group
    keep_survivors = set(plan.merge_order[:keep_groups])
    groups = tuple(g for g in plan.groups if g.survivor_index in keep_survivors)
    dropped = [i for g in plan.groups if g.survivor_index not in keep_survivors
               for i in g.member_indices]
    return MergePlan(
        kind=plan.kind,
        groups=groups,
        kept=tuple(sorted(list(plan.kept) + dropped)),
        source_count=plan.source_count,
        result_count=plan.source_count - keep_groups * per_group,
        merge_order=plan.merge_order[:keep_groups],
        warnings=plan.warnings,
    )


def _truncate_detail(plan: MergePlan, target_tokens: int) -> MergePlan:
    keep = set(plan.merge_order[:target_tokens])
    groups = []
    dropped: list[int] = []
    for g in plan.groups:
        members = []
        logits = []
        for idx, logit in zip(g.member_indices, g.member_logits):
            if idx == g.survivor_index or idx in keep:
                members.append(idx)
                logits.append(logit)
            else:
                dropped.append(idx)
        if len(members) == 1:
            dropped.append(g.survivor_index)
            continue
        weights = tuple(float(w) for w in softmax(np.asarray(logits)))
        groups.append(
            MergeGroup(
                survivor_index=g.survivor_index,
                member_indices=tuple(members),
                member_weights=weights,
                member_logits=tuple(logits),
            )
        )
    return MergePlan(
        kind=plan.kind,
        groups=tuple(groups),
        kept=tuple(sorted(list(plan.kept) + dropped)),
        source_count=plan.source_count,
        result_count=plan.source_count - len(keep),
        merge_order=plan.merge_order[:target_tokens],
        warnings=plan.warnings,
    )


def batch_harmonize(plans: Sequence[MergePlan]) -> list[MergePlan]:
    """Equalize merged-token counts across one batch at a single (step, layer).

    Threshold selection can merge different numbers of tokens per batch
    element; every plan is truncated, dropping its lowest-priority merges, to
    the minimum merged count so the whole batch shares one compressed width.
    """
    if len(plans) <= 1:
        return list(plans)
    kinds = {p.kind for p in plans}
    if len(kinds) != 1:
        raise ValueError("cannot harmonize plans of different kinds")
    sources = {p.source_count for p in plans}
    if len(sources) != 1:
        raise ValueError("cannot harmonize plans with different source sizes")
    target = min(p.merged_count for p in plans)
    out = []
    for p in plans:
        if p.merged_count == target:
            out.append(p)
        elif p.kind == STRUCTURE:
            out.append(_truncate_structure(p, target))
        else:
            out.append(_truncate_detail(p, target))
    return out
