"""Group-label inference from name-frequency tables.

A frequency table maps a name to per-label occurrence counts (for example a
registry of first names by recorded sex).  Inference walks an ordered chain
of tables, lets the first table that contains the name decide, and assigns
the majority label.  An exact tie resolves to the scheme's unknown label
rather than guessing.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence, TextIO

from .errors import MalformedRow, UnknownLabel
from .model import CandidateRecord, GroupScheme, RankingSnapshot

_TABLE_COLUMNS = ("name", "label", "count")


def _fold(name: str) -> str:
    """Canonical lookup key: trimmed, Unicode-case-folded."""
    return name.strip().casefold()


@dataclass(frozen=True)
class NameFrequencyTable:
    """Per-name label counts under one group scheme."""

    scheme: GroupScheme
    counts: Mapping[str, Mapping[str, int]]

    def __contains__(self, name: str) -> bool:
        return _fold(name) in self.counts

    def lookup(self, name: str) -> Mapping[str, int] | None:
        return self.counts.get(_fold(name))

    def __len__(self) -> int:
        return len(self.counts)


@dataclass(frozen=True)
class InferenceResult:
    """Outcome of one name lookup.

    ``provider_index`` is the position of the resolving table in the chain,
    or -1 when no table contained the name.  ``confidence`` is the winning
    count divided by the name's total count; 0.0 when unresolved or tied.
    """

    label: str
    confidence: float
    provider_index: int


@dataclass(frozen=True)
class CoverageReport:
    """How much of a dataset the inference chain labeled."""

    total: int
    resolved: int

    @property
    def coverage(self) -> float:
        return self.resolved / self.total if self.total else 0.0


def load_name_table(source: str | Path | TextIO, scheme: GroupScheme) -> NameFrequencyTable:
    """Read a ``name,label,count`` CSV into a frequency table.

    Names are case-folded and whitespace-trimmed; duplicate (name, label)
    rows accumulate.  Raises :class:`MalformedRow` (with the line number) on
    unparsable rows and :class:`UnknownLabel` on labels outside the scheme.
    """
    if isinstance(source, (str, Path)):
        with open(source, "r", encoding="utf-8", newline="") as handle:
            return load_name_table(handle, scheme)

    reader = csv.reader(source)
    try:
        header = next(reader)
    except StopIteration:
        raise MalformedRow("line 1: empty table, expected header name,label,count") from None
    if tuple(h.strip() for h in header) != _TABLE_COLUMNS:
        raise MalformedRow(f"line 1: expected header name,label,count, got {header!r}")

    counts: dict[str, dict[str, int]] = {}
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != 3:
            raise MalformedRow(f"line {lineno}: expected 3 fields, got {len(row)}")
        raw_name, raw_label, raw_count = row
        name = _fold(raw_name)
        if not name:
            raise MalformedRow(f"line {lineno}: empty name")
        label = raw_label.strip()
        if label not in scheme.labels:
            raise UnknownLabel(f"line {lineno}: label {label!r} not in scheme {scheme.attribute_name!r}")
        try:
            count = int(raw_count)
        except ValueError:
            raise MalformedRow(f"line {lineno}: count {raw_count!r} is not an integer") from None
        if count < 0:
            raise MalformedRow(f"line {lineno}: count must be non-negative")
        if count == 0:
            continue
        counts.setdefault(name, dict.fromkeys(scheme.labels, 0))[label] += count

    return NameFrequencyTable(scheme=scheme, counts=counts)


def infer_label(name: str | None, chain: Sequence[NameFrequencyTable]) -> InferenceResult:
    """Resolve a name against an ordered chain of frequency tables.

    The first table containing the (case-folded) name decides; later tables
    are consulted only when the name is absent earlier.  Within a table the
    majority-count label wins; an exact tie yields the unknown label with
    confidence 0.
    """
    if not chain:
        raise ValueError("inference chain must contain at least one table")
    scheme = chain[0].scheme
    for table in chain[1:]:
        if table.scheme != scheme:
            raise ValueError("all tables in a chain must share one scheme")

    if name is not None:
        for index, table in enumerate(chain):
            entry = table.lookup(name)
            if entry is None:
                continue
            total = sum(entry.values())
            best = max(entry.values())
            winners = [lbl for lbl in scheme.labels if entry.get(lbl, 0) == best]
            if len(winners) > 1:
                return InferenceResult(scheme.unknown_label, 0.0, index)
            return InferenceResult(winners[0], best / total, index)
    return InferenceResult(scheme.unknown_label, 0.0, -1)


def label_dataset(
    snapshots: Iterable[RankingSnapshot],
    scheme: GroupScheme,
    chain: Sequence[NameFrequencyTable],
    full_name: bool = False,
) -> tuple[list[RankingSnapshot], CoverageReport]:
    """Infer labels for every non-missing candidate in the snapshots.

    Returns relabeled snapshot copies plus a coverage report; the inputs are
    left untouched.  ``full_name`` switches the lookup key from the first
    name to ``"first last"``, for chains built over full-name tables.
    Missing candidates stay unlabeled, and a candidate whose lookup fails
    gets the unknown label explicitly.
    """
    total = 0
    resolved = 0
    relabeled: list[RankingSnapshot] = []
    for snapshot in snapshots:
        entries: list[CandidateRecord] = []
        for record in snapshot.entries:
            if record.missing:
                entries.append(record)
                continue
            total += 1
            key = _lookup_key(record, full_name)
            result = infer_label(key, chain)
            if result.label != scheme.unknown_label:
                resolved += 1
            labels = dict(record.group_labels)
            labels[scheme.attribute_name] = result.label
            entries.append(replace(record, group_labels=labels))
        relabeled.append(replace(snapshot, entries=tuple(entries)))
    return relabeled, CoverageReport(total=total, resolved=resolved)


def _lookup_key(record: CandidateRecord, full_name: bool) -> str | None:
    if not full_name:
        return record.first_name
    parts = [p for p in (record.first_name, record.last_name) if p]
    return " ".join(parts) if parts else None


def save_name_table(table: NameFrequencyTable, destination: str | Path | TextIO) -> None:
    """Write a frequency table back to ``name,label,count`` CSV, sorted."""
    if isinstance(destination, (str, Path)):
        with open(destination, "w", encoding="utf-8", newline="") as handle:
            save_name_table(table, handle)
            return
    writer = csv.writer(destination, lineterminator="\n")
    writer.writerow(_TABLE_COLUMNS)
    for name in sorted(table.counts):
        entry = table.counts[name]
        for label in table.scheme.labels:
            if entry.get(label, 0):
                writer.writerow([name, label, entry[label]])


def table_from_rows(rows: Iterable[tuple[str, str, int]], scheme: GroupScheme) -> NameFrequencyTable:
    """Build a table from in-memory rows; same validation as the CSV loader."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(_TABLE_COLUMNS)
    for row in rows:
        writer.writerow(row)
    buffer.seek(0)
    return load_name_table(buffer, scheme)
