"""Spatial token container: H x W grid of d-dimensional tokens.

Provides window partitioning, per-position merge-history counters, and the
MergePlan record that makes every merge reversible.  Position index is the
stable token identity: unmerging restores all N positions after every block,
so counters and plans key on position.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


@dataclass
class TokenGrid:
    """H x W grid of tokens with per-position merge-age counters.

    ``tokens`` is the (N, d) feature matrix with N = H*W; row i holds the
    token at spatial position (i // W, i % W).  ``last_merge_age`` counts the
    steps since each position last took part in a merge.
    """

    height: int
    width: int
    tokens: np.ndarray
    last_merge_age: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.tokens = np.ascontiguousarray(self.tokens, dtype=np.float64)
        n = self.height * self.width
        if self.tokens.ndim != 2 or self.tokens.shape[0] != n:
            raise ValueError(
                f"tokens must be ({n}, d) for a {self.height}x{self.width} grid, "
                f"got {self.tokens.shape}"
            )
        if self.last_merge_age is None:
            self.last_merge_age = np.zeros(n, dtype=np.int64)
        else:
            self.last_merge_age = np.asarray(self.last_merge_age, dtype=np.int64)
            if self.last_merge_age.shape != (n,):
                raise ValueError(f"last_merge_age must have {n} entries")
            if np.any(self.last_merge_age < 0):
                raise ValueError("merge-age counters must be non-negative")

    @property
    def token_count(self) -> int:
        return self.height * self.width

    @property
    def dim(self) -> int:
        return int(self.tokens.shape[1])

    def position_of(self, index: int) -> tuple[int, int]:
        return index // self.width, index % self.width

    @classmethod
    def from_field(cls, field_hwd: np.ndarray, last_merge_age=None) -> "TokenGrid":
        """Build a grid from an (H, W, d) feature field."""
        field_hwd = np.asarray(field_hwd, dtype=np.float64)
        if field_hwd.ndim != 3:
            raise ValueError("expected an (H, W, d) field")
        h, w, d = field_hwd.shape
        return cls(h, w, field_hwd.reshape(h * w, d).copy(), last_merge_age)

    def field(self) -> np.ndarray:
        """The (H, W, d) view of the token matrix."""
        return self.tokens.reshape(self.height, self.width, self.dim)


@dataclass(frozen=True)
class WindowPartition:
    """Disjoint m x m spatial windows covering the whole grid, row-major order."""

    window_size: int
    windows: tuple[tuple[int, ...], ...]

    @property
    def window_count(self) -> int:
        return len(self.windows)

    @property
    def tokens_per_window(self) -> int:
        return self.window_size * self.window_size


def partition_windows(grid: TokenGrid, m: int) -> WindowPartition:
    """Partition the grid into contiguous m x m index blocks.

    Raises if the grid dimensions are not divisible by ``m``; callers must pad
    the grid or pick a different window size.
    """
    if m < 1:
        raise ValueError("window size must be >= 1")
    if grid.height % m or grid.width % m:
        raise ValueError(
            f"grid {grid.height}x{grid.width} is not divisible by window size {m}; "
            "pad the grid or choose a different window size"
        )
    w = grid.width
    windows = []
    for wr in range(grid.height // m):
        for wc in range(grid.width // m):
            idx = tuple(
                (wr * m + i) * w + (wc * m + j) for i in range(m) for j in range(m)
            )
            windows.append(idx)
    return WindowPartition(window_size=m, windows=tuple(windows))


@dataclass(frozen=True)
class MergeGroup:
    """One merged group: the survivor position, its members, and their weights.

    ``member_logits`` optionally records the raw pre-softmax weight inputs so
    a truncated group can recompute exact weights (used by batch harmonizing).
    """

    survivor_index: int
    member_indices: tuple[int, ...]
    member_weights: tuple[float, ...]
    member_logits: tuple[float, ...] | None = None


@dataclass
class MergePlan:
    """Record of one merge: which positions fold into which survivors.

    The compressed row layout is survivors first (ascending survivor index)
    followed by kept positions (ascending index), which makes the plan fully
    self-describing for :func:`apply_merge` and unmerging.

    ``merge_order`` lists merge units in descending selection priority:
    window survivor indices for structure plans, merged token indices for
    detail plans.  It exists so batch harmonizing can drop the lowest-priority
    merges exactly.
    """

    kind: str  # "structure" | "detail"
    groups: tuple[MergeGroup, ...]
    kept: tuple[int, ...]
    source_count: int
    result_count: int
    merge_order: tuple[int, ...] = ()
    warnings: tuple[str, ...] = ()
    layout_groups: tuple[MergeGroup, ...] = field(init=False)

    def __post_init__(self) -> None:
        if self.kind not in ("structure", "detail"):
            raise ValueError(f"unknown plan kind {self.kind!r}")
        seen: set[int] = set()
        for g in self.groups:
            if len(g.member_indices) != len(g.member_weights):
                raise ValueError("group weights/members length mismatch")
            if g.survivor_index not in g.member_indices:
                raise ValueError("survivor must be one of its group members")
            w = np.asarray(g.member_weights, dtype=np.float64)
            if np.any(w < 0) or abs(float(w.sum()) - 1.0) > 1e-9:
                raise ValueError("group weights must be non-negative and sum to 1")
            for i in g.member_indices:
                if i in seen:
                    raise ValueError(f"source index {i} appears twice in plan")
                seen.add(i)
        for i in self.kept:
            if i in seen:
                raise ValueError(f"source index {i} appears both merged and kept")
            seen.add(i)
        if seen != set(range(self.source_count)):
            raise ValueError("plan does not cover every source index exactly once")
        if self.result_count != len(self.kept) + len(self.groups):
            raise ValueError("result_count inconsistent with groups/kept")
        self.layout_groups = tuple(sorted(self.groups, key=lambda g: g.survivor_index))

    @property
    def merged_count(self) -> int:
        return self.source_count - self.result_count

    def merged_positions(self) -> np.ndarray:
        """Positions that took part in a merge (singleton groups excluded)."""
        idx = [
            i
            for g in self.groups
            if len(g.member_indices) > 1
            for i in g.member_indices
        ]
        return np.array(sorted(idx), dtype=np.int64)

    def is_noop(self) -> bool:
        return not self.groups


def noop_plan(kind: str, source_count: int) -> MergePlan:
    """A plan that merges nothing; the compressed layout is the identity."""
    return MergePlan(
        kind=kind,
        groups=(),
        kept=tuple(range(source_count)),
        source_count=source_count,
        result_count=source_count,
    )


def apply_merge(source, plan: MergePlan) -> np.ndarray:
    """Compress tokens per plan: survivor rows, then kept rows, each ascending.

    ``source`` may be a :class:`TokenGrid` or a raw (N, d) matrix.  Each group
    row is the weighted sum of its member tokens; kept rows are copied
    verbatim.
    """
    tokens = source.tokens if isinstance(source, TokenGrid) else np.asarray(source, dtype=np.float64)
    if tokens.ndim != 2 or tokens.shape[0] != plan.source_count:
        raise ValueError(
            f"plan covers {plan.source_count} tokens but source has shape {tokens.shape}"
        )
    out = np.empty((plan.result_count, tokens.shape[1]), dtype=np.float64)
    for row, g in enumerate(plan.layout_groups):
        members = np.asarray(g.member_indices, dtype=np.int64)
        weights = np.asarray(g.member_weights, dtype=np.float64)
        out[row] = weights @ tokens[members]
    kept = np.asarray(plan.kept, dtype=np.int64)
    out[len(plan.layout_groups):] = tokens[kept]
    return out


def tick_merge_ages(grid: TokenGrid, plans: MergePlan | Iterable[MergePlan]) -> np.ndarray:
    """Step the merge-age counters once.

    Positions merged by any of ``plans`` (all plans applied within the step)
    reset to 0, everything else increments.  Returns the new counter array
    without mutating the grid.
    """
    if isinstance(plans, MergePlan):
        plans = [plans]
    merged: set[int] = set()
    for plan in plans:
        merged.update(plan.merged_positions().tolist())
    ages = grid.last_merge_age + 1
    if merged:
        ages[np.fromiter(merged, dtype=np.int64)] = 0
    return ages
