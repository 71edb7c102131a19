"""Core domain types for ranked-list audits.

A dataset is a collection of query series; each series holds one ranking
snapshot per day; each snapshot is an ordered list of candidate records.
Candidates hidden by the data source ("missing") still occupy their rank
position but expose no name and no group labels.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

from .errors import EmptyLabeledPool

OBSERVED_POOL = "observed_pool"
EXTERNAL_BASELINE = "external_baseline"

_SHARE_SUM_TOL = 1e-9


@dataclass(frozen=True)
class GroupScheme:
    """A protected attribute and its closed set of group labels.

    ``labels`` fixes the canonical label order used for deterministic
    tie-breaking and for column order in tabular output.  ``unknown_label``
    marks candidates whose group could not be resolved; it is never a member
    of ``labels``.
    """

    attribute_name: str
    labels: tuple[str, ...]
    unknown_label: str = "unknown"

    def __post_init__(self) -> None:
        if not self.attribute_name:
            raise ValueError("attribute_name must be non-empty")
        if len(self.labels) < 2:
            raise ValueError("a scheme needs at least two labels")
        if len(set(self.labels)) != len(self.labels):
            raise ValueError("labels must be unique")
        if any(not lbl for lbl in self.labels):
            raise ValueError("labels must be non-empty strings")
        if self.unknown_label in self.labels:
            raise ValueError("unknown_label must not collide with a group label")


@dataclass(frozen=True)
class CandidateRecord:
    """One candidate occurrence inside a ranking snapshot.

    ``group_labels`` maps attribute name to the candidate's label under that
    attribute; an absent attribute reads as the scheme's unknown label.
    Missing candidates carry no names and no labels at all.
    """

    candidate_id: str
    first_name: str | None = None
    last_name: str | None = None
    group_labels: Mapping[str, str] = field(default_factory=dict)
    missing: bool = False

    def __post_init__(self) -> None:
        if not self.candidate_id:
            raise ValueError("candidate_id must be non-empty")
        if self.missing:
            if self.first_name is not None or self.last_name is not None:
                raise ValueError("missing candidates cannot expose names")
            if self.group_labels:
                raise ValueError("missing candidates cannot expose group labels")

    def label_for(self, scheme: GroupScheme) -> str:
        """Label of this candidate under ``scheme``, unknown when unresolved."""
        if self.missing:
            return scheme.unknown_label
        return self.group_labels.get(scheme.attribute_name, scheme.unknown_label)

    def is_labeled(self, scheme: GroupScheme) -> bool:
        """True when the candidate carries one of the scheme's group labels."""
        return self.label_for(scheme) in scheme.labels


@dataclass(frozen=True)
class RankingSnapshot:
    """An ordered candidate list for one query on one day.

    ``entries`` is rank order: ``entries[0]`` is rank 1.  ``pool_size`` is the
    total number of candidates the source reported for the query, when known;
    it may exceed ``len(entries)`` for truncated scrapes.
    """

    query_id: str
    day: int
    entries: tuple[CandidateRecord, ...]
    pool_size: int | None = None

    def __post_init__(self) -> None:
        if not self.query_id:
            raise ValueError("query_id must be non-empty")
        if self.day < 1:
            raise ValueError("day must be >= 1")
        ids = [e.candidate_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate candidate_id in snapshot {self.query_id!r} day {self.day}")
        if self.pool_size is not None and self.pool_size < len(self.entries):
            raise ValueError("pool_size cannot be smaller than the entry list")

    @property
    def missing_count(self) -> int:
        return sum(1 for e in self.entries if e.missing)

    @property
    def missing_rate(self) -> float:
        """Fraction of list positions occupied by hidden candidates."""
        if not self.entries:
            return 0.0
        return self.missing_count / len(self.entries)


@dataclass(frozen=True)
class QuerySeries:
    """All snapshots collected for one query, keyed by day."""

    query_id: str
    snapshots: Mapping[int, RankingSnapshot]

    def __post_init__(self) -> None:
        if not self.snapshots:
            raise ValueError("a series needs at least one snapshot")
        for day, snap in self.snapshots.items():
            if snap.day != day:
                raise ValueError(f"snapshot day {snap.day} filed under key {day}")
            if snap.query_id != self.query_id:
                raise ValueError(f"snapshot for {snap.query_id!r} filed under series {self.query_id!r}")

    @property
    def days(self) -> tuple[int, ...]:
        return tuple(sorted(self.snapshots))

    @property
    def first_day(self) -> int:
        return min(self.snapshots)


@dataclass(frozen=True)
class GroupProportions:
    """Target (or observed) group shares for one scheme.

    ``shares`` covers every label of the scheme exactly, sums to one, and is
    either measured from a candidate pool (``source = "observed_pool"``,
    ``denominator`` = number of labeled candidates) or supplied externally
    (``source = "external_baseline"``, ``denominator 0``).
    """

    scheme: GroupScheme
    shares: Mapping[str, float]
    source: str = OBSERVED_POOL
    denominator: int = 0

    def __post_init__(self) -> None:
        if self.source not in (OBSERVED_POOL, EXTERNAL_BASELINE):
            raise ValueError(f"unrecognized proportions source {self.source!r}")
        if set(self.shares) != set(self.scheme.labels):
            raise ValueError("shares must cover the scheme labels exactly")
        if any(s < 0.0 for s in self.shares.values()):
            raise ValueError("shares must be non-negative")
        total = sum(self.shares.values())
        if abs(total - 1.0) > _SHARE_SUM_TOL:
            raise ValueError(f"shares sum to {total!r}, expected 1")
        if self.denominator < 0:
            raise ValueError("denominator must be non-negative")


def observed_proportions(
    snapshot: RankingSnapshot,
    scheme: GroupScheme,
    max_rank: int | None = None,
) -> GroupProportions:
    """Group shares among labeled candidates in the top ``max_rank`` positions.

    Missing and unknown-labeled candidates are excluded from both numerator
    and denominator.  ``max_rank`` of ``None`` (or beyond the list) uses the
    whole list.  Raises :class:`EmptyLabeledPool` when no labeled candidate
    falls inside the window.
    """
    window = snapshot.entries if max_rank is None else snapshot.entries[:max_rank]
    counts = {label: 0 for label in scheme.labels}
    labeled = 0
    for record in window:
        label = record.label_for(scheme)
        if label in counts:
            counts[label] += 1
            labeled += 1
    if labeled == 0:
        raise EmptyLabeledPool(
            f"no labeled candidates for {scheme.attribute_name!r} in "
            f"{snapshot.query_id!r} day {snapshot.day} (window {len(window)})"
        )
    shares = {label: counts[label] / labeled for label in scheme.labels}
    return GroupProportions(scheme=scheme, shares=shares, source=OBSERVED_POOL, denominator=labeled)
