"""File formats, dataset validation, and tabular exports.

Snapshot datasets travel as JSONL, one object per ranked entry; baselines as
CSV; metric curves and churn grids as long-format tables (CSV or JSONL);
heatmaps as rectangular CSV matrices.  All text output is UTF-8 with LF line
endings, CSV quoting is RFC-4180 (via the stdlib writer), and reals are
formatted with 10 significant digits so identical analyses produce
byte-identical files.  Undefined cells serialize as ``"undefined"`` in long
tables and as empty cells in matrices; negative infinity as ``"-inf"``.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence, TextIO

from .churn import ChurnCell
from .errors import InconsistentGrid, MalformedRow, UnknownLabel
from .exposure import CHURN, MetricCurve
from .mixedlm import ProtocolRow
from .model import (
    EXTERNAL_BASELINE,
    CandidateRecord,
    GroupProportions,
    GroupScheme,
    QuerySeries,
    RankingSnapshot,
)
from .simulate import QueryTruth

SNAPSHOT_FIELDS = ("query_id", "day", "rank", "candidate_id", "first_name", "last_name", "groups", "missing")
BASELINE_HEADER = ("query_id", "attribute", "label", "share")
CURVE_HEADER = ("query_id", "day", "attribute", "label", "k", "metric", "value")
CHURN_HEADER = ("query_id", "attribute", "label", "k", "metric", "start_day", "end_day", "value")
PROTOCOL_HEADER = ("k", "coef", "estimate", "se", "z", "p", "ci_lo", "ci_hi")

UNDEFINED = "undefined"
NEG_INF = "-inf"

FORMAT_CSV = "csv"
FORMAT_JSON = "json"


def format_real(value: float) -> str:
    """Decimal form with 10 significant digits; stable across runs."""
    return f"{value:.10g}"


def format_cell(value: float | None, undefined: str = UNDEFINED) -> str:
    if value is None:
        return undefined
    if value == -math.inf:
        return NEG_INF
    return format_real(value)


# ---------------------------------------------------------------------------
# snapshot JSONL


def write_snapshots(series: Iterable[QuerySeries], destination: str | Path | TextIO) -> None:
    """Write a dataset as snapshot JSONL, sorted by query, day, rank."""
    if isinstance(destination, (str, Path)):
        with open(destination, "w", encoding="utf-8", newline="\n") as handle:
            write_snapshots(series, handle)
            return
    for one in sorted(series, key=lambda s: s.query_id):
        for day in sorted(one.snapshots):
            snap = one.snapshots[day]
            for rank, record in enumerate(snap.entries, start=1):
                row = {
                    "query_id": snap.query_id,
                    "day": snap.day,
                    "rank": rank,
                    "candidate_id": record.candidate_id,
                    "first_name": record.first_name,
                    "last_name": record.last_name,
                    "groups": None if record.missing else dict(sorted(record.group_labels.items())),
                    "missing": record.missing,
                }
                destination.write(json.dumps(row, ensure_ascii=False, separators=(",", ":")))
                destination.write("\n")


@dataclass(frozen=True)
class ParseIssue:
    line: int
    message: str


@dataclass(frozen=True)
class IntegrityIssue:
    query_id: str
    day: int
    line: int
    message: str


@dataclass
class ValidationReport:
    """Everything the loader noticed; no row disappears without a trace."""

    n_rows: int = 0
    n_snapshots: int = 0
    n_series: int = 0
    parse_issues: list[ParseIssue] = field(default_factory=list)
    integrity_issues: list[IntegrityIssue] = field(default_factory=list)
    quarantined: list[tuple[str, int]] = field(default_factory=list)
    missing_rates: dict[str, float] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.parse_issues and not self.integrity_issues and not self.quarantined

    def to_dict(self) -> dict:
        return {
            "n_rows": self.n_rows,
            "n_snapshots": self.n_snapshots,
            "n_series": self.n_series,
            "ok": self.ok,
            "parse_issues": [{"line": i.line, "message": i.message} for i in self.parse_issues],
            "integrity_issues": [
                {"query_id": i.query_id, "day": i.day, "line": i.line, "message": i.message}
                for i in self.integrity_issues
            ],
            "quarantined": [{"query_id": q, "day": d} for q, d in self.quarantined],
            "missing_rates": dict(sorted(self.missing_rates.items())),
        }


def load_dataset(path: str | Path) -> tuple[list[QuerySeries], ValidationReport]:
    """Load snapshot JSONL, quarantining malformed snapshots instead of failing.

    Rows that do not parse are reported line by line; snapshots with rank
    gaps, rank duplicates, or duplicate candidate ids are quarantined whole.
    Everything that survives is grouped into QuerySeries sorted by query id.
    """
    report = ValidationReport()
    grouped: dict[tuple[str, int], list[tuple[int, int, dict]]] = {}
    tainted: dict[tuple[str, int], int] = {}

    with open(path, "r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            report.n_rows += 1
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                report.parse_issues.append(ParseIssue(lineno, f"invalid JSON: {exc.msg}"))
                continue
            problem = _row_problem(raw)
            if problem is not None:
                report.parse_issues.append(ParseIssue(lineno, problem))
                key = _row_key(raw)
                if key is not None:
                    tainted.setdefault(key, lineno)
                continue
            key = (raw["query_id"], raw["day"])
            grouped.setdefault(key, []).append((lineno, raw["rank"], raw))

    snapshots: dict[str, dict[int, RankingSnapshot]] = {}
    for key in sorted(grouped):
        query_id, day = key
        rows = sorted(grouped[key], key=lambda item: item[1])
        first_line = rows[0][0]
        if key in tainted:
            report.quarantined.append(key)
            continue
        ranks = [rank for _, rank, _ in rows]
        if ranks != list(range(1, len(rows) + 1)):
            report.integrity_issues.append(
                IntegrityIssue(query_id, day, first_line, f"ranks not contiguous 1..{len(rows)}: {_rank_gap(ranks)}")
            )
            report.quarantined.append(key)
            continue
        ids = [raw["candidate_id"] for _, _, raw in rows]
        if len(set(ids)) != len(ids):
            dupe = next(cid for cid in ids if ids.count(cid) > 1)
            report.integrity_issues.append(
                IntegrityIssue(query_id, day, first_line, f"duplicate candidate_id {dupe!r}")
            )
            report.quarantined.append(key)
            continue
        entries = tuple(
            CandidateRecord(
                candidate_id=raw["candidate_id"],
                first_name=raw["first_name"],
                last_name=raw["last_name"],
                group_labels=raw["groups"] or {},
                missing=raw["missing"],
            )
            for _, _, raw in rows
        )
        snapshots.setdefault(query_id, {})[day] = RankingSnapshot(
            query_id=query_id, day=day, entries=entries
        )

    for key in sorted(tainted):
        if key not in grouped:
            report.quarantined.append(key)
    report.quarantined.sort()

    series = [
        QuerySeries(query_id=query_id, snapshots=days)
        for query_id, days in sorted(snapshots.items())
    ]
    report.n_series = len(series)
    report.n_snapshots = sum(len(s.snapshots) for s in series)
    for one in series:
        report.missing_rates[one.query_id] = one.snapshots[one.first_day].missing_rate
    return series, report


def _row_key(raw: object) -> tuple[str, int] | None:
    if (
        isinstance(raw, dict)
        and isinstance(raw.get("query_id"), str)
        and isinstance(raw.get("day"), int)
        and not isinstance(raw.get("day"), bool)
    ):
        return (raw["query_id"], raw["day"])
    return None


def _row_problem(raw: object) -> str | None:
    if not isinstance(raw, dict):
        return "row is not a JSON object"
    for name in SNAPSHOT_FIELDS:
        if name not in raw:
            return f"required field {name!r} absent"
    if not isinstance(raw["query_id"], str) or not raw["query_id"]:
        return "query_id must be a non-empty string"
    for name in ("day", "rank"):
        value = raw[name]
        if isinstance(value, bool) or not isinstance(value, int) or value < 1:
            return f"{name} must be an integer >= 1"
    if not isinstance(raw["candidate_id"], str) or not raw["candidate_id"]:
        return "candidate_id must be a non-empty string"
    for name in ("first_name", "last_name"):
        if raw[name] is not None and not isinstance(raw[name], str):
            return f"{name} must be a string or null"
    groups = raw["groups"]
    if groups is not None:
        if not isinstance(groups, dict) or not all(
            isinstance(k, str) and isinstance(v, str) for k, v in groups.items()
        ):
            return "groups must be a string-to-string object or null"
    if not isinstance(raw["missing"], bool):
        return "missing must be a boolean"
    if raw["missing"] and not (raw["first_name"] is None and raw["last_name"] is None and groups is None):
        return "missing entries must have null names and groups"
    return None


def _rank_gap(ranks: Sequence[int]) -> str:
    expected = set(range(1, len(ranks) + 1))
    gaps = sorted(expected - set(ranks))
    dupes = sorted({r for r in ranks if ranks.count(r) > 1})
    parts = []
    if gaps:
        parts.append(f"absent {gaps}")
    if dupes:
        parts.append(f"duplicated {dupes}")
    return ", ".join(parts) if parts else f"out of range {sorted(set(ranks) - expected)}"


# ---------------------------------------------------------------------------
# ground-truth ledger JSONL


def write_ledger(truths: Iterable[QueryTruth], destination: str | Path | TextIO) -> None:
    if isinstance(destination, (str, Path)):
        with open(destination, "w", encoding="utf-8", newline="\n") as handle:
            write_ledger(truths, handle)
            return
    for truth in sorted(truths, key=lambda t: t.query_id):
        row = {
            "query_id": truth.query_id,
            "weights": {k: truth.weights[k] for k in sorted(truth.weights)},
            "composition": {k: truth.composition[k] for k in sorted(truth.composition)},
            "labels": {k: truth.labels[k] for k in sorted(truth.labels)},
            "scores": {k: truth.scores[k] for k in sorted(truth.scores)},
            "departures": [[day, cid] for day, cid in truth.departures],
        }
        destination.write(json.dumps(row, ensure_ascii=False, separators=(",", ":")))
        destination.write("\n")


def load_ledger(path: str | Path) -> list[QueryTruth]:
    truths = []
    with open(path, "r", encoding="utf-8") as handle:
        for line in handle:
            if not line.strip():
                continue
            raw = json.loads(line)
            truths.append(
                QueryTruth(
                    query_id=raw["query_id"],
                    weights=raw["weights"],
                    composition=raw["composition"],
                    labels=raw["labels"],
                    scores=raw["scores"],
                    departures=tuple((day, cid) for day, cid in raw["departures"]),
                )
            )
    return truths


# ---------------------------------------------------------------------------
# baseline proportions CSV


def load_baseline(
    path: str | Path | TextIO,
    schemes: Mapping[str, GroupScheme],
) -> dict[tuple[str, str], GroupProportions]:
    """Read external target proportions keyed by (query_id, attribute).

    Every (query, attribute) block must cover the scheme's labels exactly
    and sum to 1 within 1e-6; shares are renormalized to sum exactly 1.
    """
    if isinstance(path, (str, Path)):
        with open(path, "r", encoding="utf-8", newline="") as handle:
            return load_baseline(handle, schemes)

    reader = csv.reader(path)
    try:
        header = next(reader)
    except StopIteration:
        raise MalformedRow("line 1: empty baseline file") from None
    if tuple(h.strip() for h in header) != BASELINE_HEADER:
        raise MalformedRow(f"line 1: expected header {','.join(BASELINE_HEADER)}, got {header!r}")

    shares: dict[tuple[str, str], dict[str, float]] = {}
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != 4:
            raise MalformedRow(f"line {lineno}: expected 4 fields, got {len(row)}")
        query_id, attribute, label, raw_share = (f.strip() for f in row)
        scheme = schemes.get(attribute)
        if scheme is None:
            raise UnknownLabel(f"line {lineno}: no scheme for attribute {attribute!r}")
        if label not in scheme.labels:
            raise UnknownLabel(f"line {lineno}: label {label!r} not in scheme {attribute!r}")
        try:
            share = float(raw_share)
        except ValueError:
            raise MalformedRow(f"line {lineno}: share {raw_share!r} is not a number") from None
        if not 0.0 <= share <= 1.0:
            raise MalformedRow(f"line {lineno}: share must be in [0, 1]")
        bucket = shares.setdefault((query_id, attribute), {})
        if label in bucket:
            raise MalformedRow(f"line {lineno}: duplicate label {label!r} for {query_id!r}/{attribute!r}")
        bucket[label] = share

    out: dict[tuple[str, str], GroupProportions] = {}
    for (query_id, attribute), bucket in shares.items():
        scheme = schemes[attribute]
        if set(bucket) != set(scheme.labels):
            absent = sorted(set(scheme.labels) - set(bucket))
            raise MalformedRow(f"baseline for {query_id!r}/{attribute!r} lacks labels {absent}")
        total = sum(bucket.values())
        if abs(total - 1.0) > 1e-6:
            raise MalformedRow(f"baseline for {query_id!r}/{attribute!r} sums to {total!r}, expected 1")
        out[(query_id, attribute)] = GroupProportions(
            scheme=scheme,
            shares={label: bucket[label] / total for label in scheme.labels},
            source=EXTERNAL_BASELINE,
        )
    return out


# ---------------------------------------------------------------------------
# query filtering


def filter_queries(
    series: Iterable[QuerySeries],
    max_missing_rate: float,
    min_pool: int,
) -> tuple[list[QuerySeries], list[dict]]:
    """Keep series whose first-day snapshot passes both inclusion thresholds.

    A series is kept when its day-1 missing rate is at most
    ``max_missing_rate`` and its day-1 list holds at least ``min_pool``
    entries.  Returns the kept series plus a manifest line per input series.
    """
    if not 0.0 <= max_missing_rate <= 1.0:
        raise ValueError("max_missing_rate must be in [0, 1]")
    if min_pool < 0:
        raise ValueError("min_pool must be non-negative")
    kept: list[QuerySeries] = []
    manifest: list[dict] = []
    for one in sorted(series, key=lambda s: s.query_id):
        snap = one.snapshots[one.first_day]
        rate = snap.missing_rate
        pool = len(snap.entries)
        keep = rate <= max_missing_rate and pool >= min_pool
        manifest.append(
            {
                "query_id": one.query_id,
                "kept": keep,
                "missing_rate": rate,
                "pool": pool,
            }
        )
        if keep:
            kept.append(one)
    return kept, manifest


# ---------------------------------------------------------------------------
# long-format tables


def curve_rows(curves: Iterable[MetricCurve]) -> list[tuple]:
    """Long-format rows for metric curves, deterministically ordered."""
    ordered = sorted(curves, key=lambda c: (c.query_id, c.day, c.attribute, c.metric, c.label or ""))
    rows = []
    for curve in ordered:
        for k in sorted(curve.values):
            rows.append(
                (
                    curve.query_id,
                    curve.day,
                    curve.attribute,
                    curve.label or "",
                    k,
                    curve.metric,
                    curve.values[k],
                )
            )
    return rows


def churn_rows(cells: Iterable[ChurnCell]) -> list[tuple]:
    """Long-format rows for churn cells, deterministically ordered."""
    ordered = sorted(
        cells, key=lambda c: (c.query_id, c.attribute, c.label, c.start_day, c.end_day, c.k)
    )
    return [
        (cell.query_id, cell.attribute, cell.label, cell.k, CHURN, cell.start_day, cell.end_day, cell.churn)
        for cell in ordered
    ]


def write_long_table(
    rows: Sequence[tuple],
    header: Sequence[str],
    destination: str | Path | TextIO,
    fmt: str = FORMAT_CSV,
) -> None:
    """Write long-format rows as CSV or JSONL; the last column is the value."""
    if isinstance(destination, (str, Path)):
        with open(destination, "w", encoding="utf-8", newline="") as handle:
            write_long_table(rows, header, handle, fmt)
            return
    if fmt == FORMAT_CSV:
        writer = csv.writer(destination, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([*row[:-1], format_cell(row[-1])])
    elif fmt == FORMAT_JSON:
        for row in rows:
            obj = dict(zip(header, row))
            obj[header[-1]] = _json_value(row[-1])
            destination.write(json.dumps(obj, ensure_ascii=False, separators=(",", ":")))
            destination.write("\n")
    else:
        raise ValueError(f"unrecognized format {fmt!r}")


def _json_value(value: float | None) -> float | str | None:
    if value is None:
        return None
    if value == -math.inf:
        return NEG_INF
    return float(format_real(value))


def write_protocol_table(
    rows: Iterable[ProtocolRow],
    destination: str | Path | TextIO,
    fmt: str = FORMAT_CSV,
) -> None:
    """Write protocol results in the fixed k,coef,estimate,... layout."""
    if isinstance(destination, (str, Path)):
        with open(destination, "w", encoding="utf-8", newline="") as handle:
            write_protocol_table(rows, handle, fmt)
            return
    if fmt == FORMAT_CSV:
        writer = csv.writer(destination, lineterminator="\n")
        writer.writerow(PROTOCOL_HEADER)
        for row in rows:
            writer.writerow(
                [
                    row.k,
                    row.coefficient,
                    format_real(row.estimate),
                    format_real(row.se),
                    format_real(row.z),
                    format_real(row.p_value),
                    format_real(row.ci_lo),
                    format_real(row.ci_hi),
                ]
            )
    elif fmt == FORMAT_JSON:
        for row in rows:
            obj = {
                "k": row.k,
                "coef": row.coefficient,
                "estimate": _json_value(row.estimate),
                "se": _json_value(row.se),
                "z": _json_value(row.z),
                "p": _json_value(row.p_value),
                "ci_lo": _json_value(row.ci_lo),
                "ci_hi": _json_value(row.ci_hi),
                "n_obs": row.n_obs,
                "n_groups": row.n_groups,
                "n_excluded": row.n_excluded,
            }
            destination.write(json.dumps(obj, ensure_ascii=False, separators=(",", ":")))
            destination.write("\n")
    else:
        raise ValueError(f"unrecognized format {fmt!r}")


# ---------------------------------------------------------------------------
# heatmap matrices


def export_heatmap(
    source: Sequence[MetricCurve] | Sequence[ChurnCell],
    destination: str | Path | TextIO,
) -> None:
    """Write a rectangular matrix: curve rows by query-day, churn rows by
    day pair; columns are the cutoff grid.

    Curves must share one metric, label, and cutoff grid.  Churn cells must
    share one label; with several queries present, each (pair, k) cell is
    the mean of the defined per-query cells.  Undefined cells come out
    empty, negative infinity as ``-inf``.
    """
    items = list(source)
    if not items:
        raise ValueError("nothing to export")
    if isinstance(items[0], MetricCurve):
        row_labels, grid, cells = _matrix_from_curves(items)
    elif isinstance(items[0], ChurnCell):
        row_labels, grid, cells = _matrix_from_churn(items)
    else:
        raise TypeError(f"cannot export {type(items[0]).__name__} objects")
    _write_matrix(row_labels, grid, cells, destination)


def _matrix_from_curves(curves: Sequence[MetricCurve]):
    metrics = {c.metric for c in curves}
    labels = {c.label for c in curves}
    if len(metrics) > 1 or len(labels) > 1:
        raise ValueError("heatmap needs curves of one metric and one label")
    grids = {tuple(sorted(c.values)) for c in curves}
    if len(grids) > 1:
        raise InconsistentGrid("curves carry different cutoff grids")
    grid = list(grids.pop())
    ordered = sorted(curves, key=lambda c: (c.query_id, c.day))
    row_labels = [f"{c.query_id}:{c.day}" for c in ordered]
    cells = [[c.values[k] for k in grid] for c in ordered]
    return row_labels, grid, cells


def _matrix_from_churn(cells_in: Sequence[ChurnCell]):
    labels = {c.label for c in cells_in}
    if len(labels) > 1:
        raise ValueError("heatmap needs churn cells of one label")
    pairs = sorted({(c.start_day, c.end_day) for c in cells_in})
    grids = {}
    for cell in cells_in:
        grids.setdefault((cell.start_day, cell.end_day), set()).add(cell.k)
    grid_sets = {tuple(sorted(ks)) for ks in grids.values()}
    if len(grid_sets) > 1:
        raise InconsistentGrid("day pairs carry different cutoff grids")
    grid = list(grid_sets.pop())
    sums: dict[tuple[tuple[int, int], int], float] = {}
    counts: dict[tuple[tuple[int, int], int], int] = {}
    for cell in cells_in:
        if cell.churn is None:
            continue
        key = ((cell.start_day, cell.end_day), cell.k)
        sums[key] = sums.get(key, 0.0) + cell.churn
        counts[key] = counts.get(key, 0) + 1
    matrix = [
        [
            sums[(pair, k)] / counts[(pair, k)] if (pair, k) in sums else None
            for k in grid
        ]
        for pair in pairs
    ]
    row_labels = [f"{s}->{e}" for s, e in pairs]
    return row_labels, grid, matrix


def _write_matrix(
    row_labels: Sequence[str],
    grid: Sequence[int],
    cells: Sequence[Sequence[float | None]],
    destination: str | Path | TextIO,
) -> None:
    if isinstance(destination, (str, Path)):
        with open(destination, "w", encoding="utf-8", newline="") as handle:
            _write_matrix(row_labels, grid, cells, handle)
            return
    writer = csv.writer(destination, lineterminator="\n")
    writer.writerow(["row", *grid])
    for label, row in zip(row_labels, cells):
        writer.writerow([label, *(format_cell(v, undefined="") for v in row)])
