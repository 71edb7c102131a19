"""Shared fixtures and snapshot-building helpers."""
from __future__ import annotations

import pytest

from rankaudit import CandidateRecord, GroupScheme, QuerySeries, RankingSnapshot

GENDER = GroupScheme("gender", ("F", "M"))


def record(cid: str, label: str | None, first: str | None = None, last: str | None = None) -> CandidateRecord:
    """Candidate with a gender label; label "?" or None = unlabeled, "x" = missing."""
    if label == "x":
        return CandidateRecord(candidate_id=cid, missing=True)
    if label == "?" or label is None:
        return CandidateRecord(candidate_id=cid, first_name=first, last_name=last)
    return CandidateRecord(
        candidate_id=cid, first_name=first, last_name=last, group_labels={"gender": label}
    )


def snapshot(labels: str, query_id: str = "q1", day: int = 1) -> RankingSnapshot:
    """Snapshot from a label string: F/M labeled, '?' unlabeled, 'x' missing.

    ``snapshot("FMx?")`` is a 4-entry list with ranks 1..4.
    """
    entries = []
    for i, ch in enumerate(labels):
        cid = f"{query_id}-d{day}-{i:03d}"
        if ch == "x":
            entries.append(CandidateRecord(candidate_id=cid, missing=True))
        elif ch == "?":
            entries.append(CandidateRecord(candidate_id=cid))
        else:
            entries.append(CandidateRecord(candidate_id=cid, group_labels={"gender": ch}))
    return RankingSnapshot(query_id=query_id, day=day, entries=tuple(entries))


def series_from_days(*day_labels: str, query_id: str = "q1") -> QuerySeries:
    """Series whose day d snapshot comes from ``day_labels[d-1]``."""
    snaps = {
        day: snapshot(labels, query_id=query_id, day=day)
        for day, labels in enumerate(day_labels, start=1)
    }
    return QuerySeries(query_id=query_id, snapshots=snaps)


@pytest.fixture
def gender() -> GroupScheme:
    return GENDER
