"""Per-cutoff exposure metrics for one ranking snapshot.

All metrics compare the group composition of the top-k prefix against a
target proportion vector.  Shares are computed over *labeled* candidates
only: hidden or unresolved entries occupy rank positions but enter neither
numerator nor denominator.

Sign conventions:

* deviation at k  =  target share - observed share (positive = the group is
  under-represented in the prefix),
* skew at k       =  ln(observed share / target share), -inf when the group
  is absent from a non-empty labeled prefix,
* MinSkew at k    =  min over groups of skew; never positive.

Point operations raise typed errors on unusable inputs; curve builders mark
those cells undefined (``None``) and keep going.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

from .errors import (
    CutoffOutOfRange,
    DegenerateProportion,
    EmptyLabeledPrefix,
    UnknownLabel,
    ZeroTargetProportion,
)
from .model import GroupProportions, GroupScheme, RankingSnapshot

DEVIATION = "deviation"
SKEW = "skew"
MINSKEW = "minskew"
CORRECTED_SKEW = "corrected_skew"
CHURN = "churn"

DEFAULT_PAGE_SIZE = 25


@dataclass(frozen=True)
class TopKCounts:
    """Group tallies over the top-k prefix of one snapshot."""

    k: int
    counts: Mapping[str, int]
    labeled_total: int


@dataclass(frozen=True)
class MetricCurve:
    """One metric traced over a cutoff grid for one query-day.

    ``values`` maps cutoff k to the metric value; ``None`` marks an undefined
    cell (cutoff beyond the list, or no labeled candidates in the prefix) and
    ``-inf`` is a legitimate skew value.  ``label`` is ``None`` for metrics
    that aggregate over groups (MinSkew).
    """

    query_id: str
    day: int
    attribute: str
    label: str | None
    metric: str
    values: Mapping[int, float | None]

    def defined(self) -> dict[int, float]:
        return {k: v for k, v in self.values.items() if v is not None}


def page_cutoffs(limit: int, page_size: int = DEFAULT_PAGE_SIZE) -> tuple[int, ...]:
    """Page-boundary cutoffs (page_size, 2*page_size, ...) up to ``limit``."""
    if page_size < 1:
        raise ValueError("page_size must be >= 1")
    return tuple(range(page_size, limit + 1, page_size))


def topk_counts(snapshot: RankingSnapshot, scheme: GroupScheme, k: int) -> TopKCounts:
    """Tally group labels over the top-k prefix.

    Raises :class:`CutoffOutOfRange` unless ``1 <= k <= len(entries)``.
    """
    _check_cutoff(snapshot, k)
    counts = dict.fromkeys(scheme.labels, 0)
    labeled = 0
    for record in snapshot.entries[:k]:
        label = record.label_for(scheme)
        if label in counts:
            counts[label] += 1
            labeled += 1
    return TopKCounts(k=k, counts=counts, labeled_total=labeled)


def deviation_at_k(
    snapshot: RankingSnapshot,
    scheme: GroupScheme,
    proportions: GroupProportions,
    label: str,
    k: int,
) -> float:
    """Target share minus observed labeled share of ``label`` in the top k."""
    share = _observed_share(snapshot, scheme, proportions, label, k)
    return proportions.shares[label] - share


def skew_at_k(
    snapshot: RankingSnapshot,
    scheme: GroupScheme,
    proportions: GroupProportions,
    label: str,
    k: int,
) -> float:
    """Log ratio of observed to target share for ``label`` in the top k.

    Returns ``-inf`` when the group is absent from a non-empty labeled
    prefix.  Raises :class:`ZeroTargetProportion` when the target share is
    not strictly positive and :class:`EmptyLabeledPrefix` when no labeled
    candidate sits above the cutoff.
    """
    target = _positive_target(proportions, label)
    share = _observed_share(snapshot, scheme, proportions, label, k)
    if share == 0.0:
        return -math.inf
    return math.log(share / target)


def min_skew_at_k(
    snapshot: RankingSnapshot,
    scheme: GroupScheme,
    proportions: GroupProportions,
    k: int,
) -> float:
    """Minimum skew over all labels of the scheme; at most zero."""
    return min(skew_at_k(snapshot, scheme, proportions, label, k) for label in scheme.labels)


def best_attainable_skew(p_star: float, k: int) -> float:
    """Smallest skew magnitude any length-k prefix can realize.

    Non-integral ``k * p_star`` forces every prefix share off target; the
    nearest attainable shares are ``floor(k p*) / k`` and ``ceil(k p*) / k``.
    The floor branch is excluded when the floor count is zero (its skew is
    infinite).  Zero when ``k * p_star`` is an integer.
    """
    if not 0.0 < p_star < 1.0:
        raise DegenerateProportion(f"target proportion must be inside (0, 1), got {p_star!r}")
    if k < 1:
        raise CutoffOutOfRange(f"cutoff must be >= 1, got {k}")
    lo = math.floor(k * p_star)
    hi = math.ceil(k * p_star)
    if lo == hi:
        return 0.0
    up = abs(math.log((hi / k) / p_star))
    if lo == 0:
        return up
    down = abs(math.log((lo / k) / p_star))
    return min(down, up)


def corrected_skew(observed: float | None, p_star: float, k: int) -> float | None:
    """Observed skew with the unattainability floor removed.

    Shrinks the magnitude by :func:`best_attainable_skew` while keeping the
    sign, so a prefix that is as close to target as integer counts allow
    scores zero.  ``None`` and ``-inf`` pass through unchanged.
    """
    if observed is None:
        return None
    if observed == -math.inf:
        return -math.inf
    floor_term = best_attainable_skew(p_star, k)
    if observed == 0.0:
        return 0.0
    sign = 1.0 if observed > 0.0 else -1.0
    return sign * (abs(observed) - floor_term)


def deviation_curve(
    snapshot: RankingSnapshot,
    scheme: GroupScheme,
    proportions: GroupProportions,
    label: str,
    k_grid: Sequence[int] | None = None,
) -> MetricCurve:
    """Deviation traced over ``k_grid`` (default: every cutoff 1..n)."""
    _check_label(scheme, label)
    target = proportions.shares[label]
    table = _PrefixTable.build(snapshot, scheme)

    def cell(k: int) -> float | None:
        share = table.share(label, k)
        return None if share is None else target - share

    return _curve(snapshot, scheme, label, DEVIATION, _grid(snapshot, k_grid), cell)


def skew_curve(
    snapshot: RankingSnapshot,
    scheme: GroupScheme,
    proportions: GroupProportions,
    label: str,
    k_grid: Sequence[int] | None = None,
) -> MetricCurve:
    """Skew traced over ``k_grid`` (default: every cutoff 1..n)."""
    _check_label(scheme, label)
    target = _positive_target(proportions, label)
    table = _PrefixTable.build(snapshot, scheme)

    def cell(k: int) -> float | None:
        return _skew_cell(table, label, target, k)

    return _curve(snapshot, scheme, label, SKEW, _grid(snapshot, k_grid), cell)


def minskew_curve(
    snapshot: RankingSnapshot,
    scheme: GroupScheme,
    proportions: GroupProportions,
    k_grid: Sequence[int] | None = None,
) -> MetricCurve:
    """MinSkew traced over ``k_grid`` (default: every cutoff 1..n)."""
    targets = {label: _positive_target(proportions, label) for label in scheme.labels}
    table = _PrefixTable.build(snapshot, scheme)

    def cell(k: int) -> float | None:
        skews = [_skew_cell(table, label, targets[label], k) for label in scheme.labels]
        if any(s is None for s in skews):
            return None
        return min(skews)

    return _curve(snapshot, scheme, None, MINSKEW, _grid(snapshot, k_grid), cell)


def corrected_skew_curve(
    snapshot: RankingSnapshot,
    scheme: GroupScheme,
    proportions: GroupProportions,
    label: str,
    k_grid: Sequence[int] | None = None,
) -> MetricCurve:
    """Integrality-corrected skew traced over ``k_grid``."""
    _check_label(scheme, label)
    target = _positive_target(proportions, label)
    if not target < 1.0:
        raise DegenerateProportion(f"target proportion must be inside (0, 1), got {target!r}")
    table = _PrefixTable.build(snapshot, scheme)

    def cell(k: int) -> float | None:
        return corrected_skew(_skew_cell(table, label, target, k), target, k)

    return _curve(snapshot, scheme, label, CORRECTED_SKEW, _grid(snapshot, k_grid), cell)


class _PrefixTable:
    """Cumulative per-label counts, one pass over the entry list."""

    __slots__ = ("counts", "totals", "n")

    def __init__(self, counts: dict[str, list[int]], totals: list[int], n: int) -> None:
        self.counts = counts
        self.totals = totals
        self.n = n

    @classmethod
    def build(cls, snapshot: RankingSnapshot, scheme: GroupScheme) -> "_PrefixTable":
        counts: dict[str, list[int]] = {label: [0] for label in scheme.labels}
        totals = [0]
        running = dict.fromkeys(scheme.labels, 0)
        labeled = 0
        for record in snapshot.entries:
            label = record.label_for(scheme)
            if label in running:
                running[label] += 1
                labeled += 1
            for lbl, acc in counts.items():
                acc.append(running[lbl])
            totals.append(labeled)
        return cls(counts, totals, len(snapshot.entries))

    def share(self, label: str, k: int) -> float | None:
        """Labeled share of ``label`` at cutoff ``k``; None when undefined."""
        if k < 1 or k > self.n or self.totals[k] == 0:
            return None
        return self.counts[label][k] / self.totals[k]


def _skew_cell(table: _PrefixTable, label: str, target: float, k: int) -> float | None:
    share = table.share(label, k)
    if share is None:
        return None
    if share == 0.0:
        return -math.inf
    return math.log(share / target)


def _curve(snapshot, scheme, label, metric, grid, cell):
    return MetricCurve(
        query_id=snapshot.query_id,
        day=snapshot.day,
        attribute=scheme.attribute_name,
        label=label,
        metric=metric,
        values={k: cell(k) for k in grid},
    )


def _grid(snapshot: RankingSnapshot, k_grid: Sequence[int] | None) -> list[int]:
    if k_grid is None:
        return list(range(1, len(snapshot.entries) + 1))
    return [int(k) for k in k_grid]


def _check_cutoff(snapshot: RankingSnapshot, k: int) -> None:
    if k < 1 or k > len(snapshot.entries):
        raise CutoffOutOfRange(
            f"cutoff {k} outside 1..{len(snapshot.entries)} for {snapshot.query_id!r} day {snapshot.day}"
        )


def _check_label(scheme: GroupScheme, label: str) -> None:
    if label not in scheme.labels:
        raise UnknownLabel(f"label {label!r} not in scheme {scheme.attribute_name!r}")


def _positive_target(proportions: GroupProportions, label: str) -> float:
    _check_label(proportions.scheme, label)
    target = proportions.shares[label]
    if target <= 0.0:
        raise ZeroTargetProportion(f"target share for {label!r} must be positive, got {target!r}")
    return target


def _observed_share(
    snapshot: RankingSnapshot,
    scheme: GroupScheme,
    proportions: GroupProportions,
    label: str,
    k: int,
) -> float:
    _check_label(scheme, label)
    if label not in proportions.shares:
        raise UnknownLabel(f"label {label!r} has no target proportion")
    tally = topk_counts(snapshot, scheme, k)
    if tally.labeled_total == 0:
        raise EmptyLabeledPrefix(
            f"no labeled candidates in top {k} of {snapshot.query_id!r} day {snapshot.day}"
        )
    return tally.counts[label] / tally.labeled_total
