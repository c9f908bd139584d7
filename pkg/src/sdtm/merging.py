"""Token merging: structure merging, detail merging, and reversible unmerging.

Structure merging (SSM) folds locally homogeneous windows into their average
before the attention and feed-forward blocks of the early denoising stage.
Detail merging (IDM) absorbs tokens that receive little attention into their
best-matching attentive token before the feed-forward block of the late
stage.  Unmerging restores the full token map by survivor reuse plus a
temporal blend against the previous step's restored map.

Scoring and plan building are pure; :func:`unmerge` mutates its
:class:`UnmergeState` and must be serialized per denoising run.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import MergeGroup, MergePlan, TokenGrid, WindowPartition
from .numerics import cosine_similarity_matrix, softmax


@dataclass(frozen=True)
class WindowScore:
    """Merge priority of one window: mean pairwise similarity plus staleness."""

    window_index: int
    similarity: float  # mean cosine over ordered member pairs, in [-1, 1]
    staleness: float   # mean member merge age / global mean age, >= 0
    total: float


@dataclass(frozen=True)
class TokenScore:
    """Merge priority of one token for detail merging.

    ``best_match``/``best_similarity`` are set only for inattentive-group
    members: the most similar attentive token and that similarity.
    """

    token_index: int
    inattention: float  # 1 - mean attention column, in [0, 1]
    staleness: float
    total: float
    best_match: int | None = None
    best_similarity: float | None = None


@dataclass
class IdmScoring:
    """Token scores sorted by descending priority plus the group split point."""

    scores: tuple[TokenScore, ...]
    inattentive_count: int
    source_count: int

    @property
    def inattentive(self) -> tuple[TokenScore, ...]:
        return self.scores[: self.inattentive_count]

    @property
    def attentive(self) -> tuple[TokenScore, ...]:
        return self.scores[self.inattentive_count:]


@dataclass
class UnmergeState:
    """Cross-step blending state for one merge site.

    ``previous_full`` holds the restored full-resolution map from the previous
    step; ``blend`` weighs the fresh restoration against it on positions that
    merged this layer.
    """

    blend: float = 0.5
    previous_full: np.ndarray | None = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.blend <= 1.0:
            raise ValueError("blend must lie in [0, 1]")


def staleness_scores(ages: np.ndarray) -> np.ndarray:
    """Per-token merge-age normalized by the mean age over all tokens.

    When every counter is zero (e.g. the first step) there is no history to
    prefer, so the score is uniformly 1.
    """
    ages = np.asarray(ages, dtype=np.float64)
    mean = float(ages.mean())
    if mean == 0.0:
        return np.ones_like(ages)
    return ages / mean


def _check_selector(ratio, threshold) -> None:
    if (ratio is None) == (threshold is None):
        raise ValueError("pass exactly one of ratio= or threshold=")
    if ratio is not None and not 0.0 <= ratio <= 1.0:
        raise ValueError(f"ratio must lie in [0, 1], got {ratio}")


def ssm_score_windows(
    grid: TokenGrid, part: WindowPartition, staleness_weight: float = 1.0
) -> list[WindowScore]:
    """Score every window by mean pairwise cosine plus weighted staleness.

    Returns scores sorted by descending total; ties break to the lower window
    index so schedules are reproducible.
    """
    per_token = staleness_scores(grid.last_merge_age)
    k = part.tokens_per_window
    denom = k * (k - 1)
    scores = []
    for widx, members in enumerate(part.windows):
        idx = np.asarray(members, dtype=np.int64)
        sims = cosine_similarity_matrix(grid.tokens[idx], grid.tokens[idx])
        # ordered pairs: the full matrix minus the diagonal
        sim = float((sims.sum() - np.trace(sims)) / denom) if denom else 0.0
        stale = float(per_token[idx].mean())
        scores.append(
            WindowScore(
                window_index=widx,
                similarity=sim,
                staleness=stale,
                total=sim + staleness_weight * stale,
            )
        )
    scores.sort(key=lambda s: (-s.total, s.window_index))
    return scores


def ssm_build_plan(
    scores: list[WindowScore],
    part: WindowPartition,
    *,
    ratio: float | None = None,
    threshold: float | None = None,
) -> MergePlan:
    """Select windows and fold each into one uniformly weighted group.

    Ratio mode merges the top ``floor(ratio * window_count)`` windows;
    threshold mode merges every window whose total score exceeds the
    threshold.  An empty selection yields a no-op plan.
    """
    _check_selector(ratio, threshold)
    ordered = sorted(scores, key=lambda s: (-s.total, s.window_index))
    if ratio is not None:
        selected = ordered[: int(ratio * part.window_count)]
    else:
        selected = [s for s in ordered if s.total > threshold]
    k = part.tokens_per_window
    uniform = (1.0 / k,) * k
    groups = []
    chosen: set[int] = set()
    for s in selected:
        members = part.windows[s.window_index]
        groups.append(
            MergeGroup(
                survivor_index=min(members),
                member_indices=members,
                member_weights=uniform,
            )
        )
        chosen.add(s.window_index)
    kept = tuple(
        i
        for widx, members in enumerate(part.windows)
        if widx not in chosen
        for i in members
    )
    n = part.window_count * k
    return MergePlan(
        kind="structure",
        groups=tuple(groups),
        kept=tuple(sorted(kept)),
        source_count=n,
        result_count=n - len(groups) * (k - 1),
        merge_order=tuple(min(part.windows[s.window_index]) for s in selected),
    )


def idm_score_tokens(
    grid: TokenGrid,
    attn: np.ndarray,
    staleness_weight: float = 1.0,
    split: float = 0.5,
) -> IdmScoring:
    """Score tokens by inattention plus staleness and split into two groups.

    ``attn`` must be a row-stochastic (N, N) map with non-negative entries;
    anything else signals an upstream attention bug.  The top ``split``
    fraction by total score forms the inattentive group; each of its members
    gets the most similar attentive token recorded as its merge target.
    """
    n = grid.token_count
    attn = np.asarray(attn, dtype=np.float64)
    if attn.shape != (n, n):
        raise ValueError(f"attention map must be ({n}, {n}), got {attn.shape}")
    row_sums = attn.sum(axis=1)
    if np.any(np.abs(row_sums - 1.0) > 1e-6) or np.any(attn < 0):
        raise ValueError("attention map is not row-stochastic within 1e-6")
    if not 0.0 < split < 1.0:
        raise ValueError("split fraction must lie in (0, 1)")

    inattention = 1.0 - attn.mean(axis=0)  # column-mean complement
    stale = staleness_scores(grid.last_merge_age)
    totals = inattention + staleness_weight * stale
    order = np.lexsort((np.arange(n), -totals))
    split_count = int(split * n)
    inatt_idx = order[:split_count]
    att_idx = np.sort(order[split_count:])  # ascending index for tie-breaks

    sims = cosine_similarity_matrix(grid.tokens[inatt_idx], grid.tokens[att_idx])
    best_cols = np.argmax(sims, axis=1)  # first max wins: lowest attentive index

    scores: list[TokenScore] = []
    for pos, tok in enumerate(inatt_idx):
        scores.append(
            TokenScore(
                token_index=int(tok),
                inattention=float(inattention[tok]),
                staleness=float(stale[tok]),
                total=float(totals[tok]),
                best_match=int(att_idx[best_cols[pos]]),
                best_similarity=float(sims[pos, best_cols[pos]]),
            )
        )
    for tok in order[split_count:]:
        scores.append(
            TokenScore(
                token_index=int(tok),
                inattention=float(inattention[tok]),
                staleness=float(stale[tok]),
                total=float(totals[tok]),
            )
        )
    return IdmScoring(scores=tuple(scores), inattentive_count=split_count, source_count=n)


def idm_build_plan(
    scoring: IdmScoring,
    *,
    ratio: float | None = None,
    threshold: float | None = None,
) -> MergePlan:
    """Merge selected inattentive tokens into their best-matching targets.

    Ratio mode merges the top ``floor(ratio * N)`` inattentive tokens by
    priority, clamped to the group size with a recorded warning; threshold
    mode merges those whose best similarity exceeds the threshold.  Tokens
    sharing a target fold into a single group whose weights are the softmax
    of each member's attention mass (1 - inattention).
    """
    _check_selector(ratio, threshold)
    inatt = scoring.inattentive
    warnings: list[str] = []
    if ratio is not None:
        want = int(ratio * scoring.source_count)
        if want > len(inatt):
            warnings.append(
                f"requested {want} merges exceeds inattentive group size {len(inatt)}; clamped"
            )
            want = len(inatt)
        merged = list(inatt[:want])
    else:
        merged = [s for s in inatt if s.best_similarity > threshold]

    by_target: dict[int, list[TokenScore]] = {}
    for s in merged:
        by_target.setdefault(s.best_match, []).append(s)

    ina_of = {s.token_index: s.inattention for s in scoring.scores}
    groups = []
    for target in sorted(by_target):
        member_idx = sorted([s.token_index for s in by_target[target]] + [target])
        logits = tuple(1.0 - ina_of[i] for i in member_idx)
        weights = tuple(float(w) for w in softmax(np.asarray(logits)))
        groups.append(
            MergeGroup(
                survivor_index=target,
                member_indices=tuple(member_idx),
                member_weights=weights,
                member_logits=logits,
            )
        )

    in_groups = {i for g in groups for i in g.member_indices}
    kept = tuple(sorted(set(range(scoring.source_count)) - in_groups))
    return MergePlan(
        kind="detail",
        groups=tuple(groups),
        kept=kept,
        source_count=scoring.source_count,
        result_count=scoring.source_count - len(merged),
        merge_order=tuple(s.token_index for s in merged),
        warnings=tuple(warnings),
    )


def unmerge(compressed: np.ndarray, plan: MergePlan, state: UnmergeState) -> np.ndarray:
    """Restore the full token map from a compressed one.

    Every group member position receives its survivor row and kept positions
    receive their own rows; positions merged this layer are then blended with
    the previous step's restored map (``blend`` toward the fresh values).
    Untouched positions pass through exactly.  The state is updated to the
    returned map.
    """
    compressed = np.asarray(compressed, dtype=np.float64)
    if compressed.ndim != 2 or compressed.shape[0] != plan.result_count:
        raise ValueError(
            f"compressed shape {compressed.shape} does not match plan result "
            f"count {plan.result_count}"
        )
    full = np.empty((plan.source_count, compressed.shape[1]), dtype=np.float64)
    for row, g in enumerate(plan.layout_groups):
        full[np.asarray(g.member_indices, dtype=np.int64)] = compressed[row]
    kept = np.asarray(plan.kept, dtype=np.int64)
    full[kept] = compressed[len(plan.layout_groups):]

    merged = plan.merged_positions()
    if state.previous_full is not None:
        if state.previous_full.shape != full.shape:
            raise ValueError(
                f"previous map shape {state.previous_full.shape} does not match {full.shape}"
            )
        if merged.size:
            lam = state.blend
            full[merged] = lam * full[merged] + (1.0 - lam) * state.previous_full[merged]
    state.previous_full = full.copy()
    return full
