"""Between-day churn of top-k membership, per group.

Churn from day s to day e at cutoff k is the fraction of a group's day-s
top-k members that no longer appear anywhere in the day-e top k, matched by
candidate id.  The top-k window is positional over the raw entry list
(hidden candidates occupy their slots); the group filter applies only to the
day-s membership, so a candidate who is still ranked on day e counts as
retained even if its label was masked that day.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

from .errors import CutoffOutOfRange, DayMissing, UnknownLabel
from .model import GroupScheme, QuerySeries, RankingSnapshot


@dataclass(frozen=True)
class ChurnCell:
    """One churn measurement; ``churn`` is ``None`` when no group member
    was in the day-s top k (rate undefined, not zero)."""

    query_id: str
    attribute: str
    label: str
    k: int
    start_day: int
    end_day: int
    churn: float | None
    base_count: int


def churn_rate(
    series: QuerySeries,
    scheme: GroupScheme,
    label: str,
    k: int,
    start_day: int,
    end_day: int,
) -> ChurnCell:
    """Churn of ``label`` members between two days of one query.

    Raises :class:`DayMissing` when either day has no snapshot and
    :class:`CutoffOutOfRange` when ``k`` exceeds either day's list.
    """
    if label not in scheme.labels:
        raise UnknownLabel(f"label {label!r} not in scheme {scheme.attribute_name!r}")
    if start_day >= end_day:
        raise ValueError(f"start day {start_day} must precede end day {end_day}")
    start = _snapshot_for(series, start_day)
    end = _snapshot_for(series, end_day)
    for snap in (start, end):
        if k < 1 or k > len(snap.entries):
            raise CutoffOutOfRange(
                f"cutoff {k} outside 1..{len(snap.entries)} for {series.query_id!r} day {snap.day}"
            )
    members = [r.candidate_id for r in start.entries[:k] if r.label_for(scheme) == label]
    base = len(members)
    if base == 0:
        return _cell(series, scheme, label, k, start_day, end_day, None, 0)
    retained = {r.candidate_id for r in end.entries[:k]}
    gone = sum(1 for cid in members if cid not in retained)
    return _cell(series, scheme, label, k, start_day, end_day, gone / base, base)


def churn_grid(
    series: QuerySeries,
    scheme: GroupScheme,
    k_grid: Sequence[int],
    day_pairs: Sequence[tuple[int, int]],
    labels: Sequence[str] | None = None,
) -> list[ChurnCell]:
    """Churn cells over labels x day pairs x cutoffs for one query.

    Element-wise :func:`churn_rate`; a missing day or an out-of-range cutoff
    yields an undefined cell rather than aborting the sweep.  Cells come out
    sorted by (label order, day pair, k).
    """
    cells: list[ChurnCell] = []
    for label in labels if labels is not None else scheme.labels:
        for start_day, end_day in day_pairs:
            for k in k_grid:
                try:
                    cells.append(churn_rate(series, scheme, label, k, start_day, end_day))
                except (DayMissing, CutoffOutOfRange):
                    cells.append(_cell(series, scheme, label, k, start_day, end_day, None, 0))
    return cells


def consecutive_pairs(series: QuerySeries) -> list[tuple[int, int]]:
    """Adjacent-day pairs present in the series, for example (1,2),(2,3),..."""
    days = series.days
    return [(days[i], days[i + 1]) for i in range(len(days) - 1)]


def anchored_pairs(series: QuerySeries) -> list[tuple[int, int]]:
    """Pairs from the first observed day to every later day."""
    days = series.days
    return [(days[0], d) for d in days[1:]]


def mean_churn_by_gap(cells: Iterable[ChurnCell]) -> dict[tuple[str, int, int], float]:
    """Average defined churn over same-distance day pairs.

    Keyed by (label, k, end_day - start_day); pools all queries present in
    ``cells``.  Pairs whose churn is undefined are left out of the average.
    """
    sums: dict[tuple[str, int, int], float] = {}
    counts: dict[tuple[str, int, int], int] = {}
    for cell in cells:
        if cell.churn is None:
            continue
        key = (cell.label, cell.k, cell.end_day - cell.start_day)
        sums[key] = sums.get(key, 0.0) + cell.churn
        counts[key] = counts.get(key, 0) + 1
    return {key: sums[key] / counts[key] for key in sums}


def _snapshot_for(series: QuerySeries, day: int) -> RankingSnapshot:
    snap = series.snapshots.get(day)
    if snap is None:
        raise DayMissing(f"series {series.query_id!r} has no day {day}")
    return snap


def _cell(series, scheme, label, k, start_day, end_day, churn, base) -> ChurnCell:
    return ChurnCell(
        query_id=series.query_id,
        attribute=scheme.attribute_name,
        label=label,
        k=k,
        start_day=start_day,
        end_day=end_day,
        churn=churn,
        base_count=base,
    )
