"""Command-line interface.

Subcommands: validate, label, audit, churn, rerank, stats, simulate,
export.  A key/value config file can set defaults for any long option
(``key = value`` lines, ``#`` comments); explicit flags win.  Every
randomized subcommand requires an explicit ``--seed``.  Output ordering is
deterministic (sorted by query, day, cutoff) no matter how many worker
threads RANKAUDIT_THREADS allows.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from pathlib import Path
from typing import Sequence

from . import churn as churn_mod
from . import dataio, exposure, mixedlm, simulate
from .detgreedy import ScoredCandidate, detgreedy_rerank
from .errors import AuditError, ZeroTargetProportion
from .model import GroupProportions, GroupScheme, QuerySeries, observed_proportions
from .names import label_dataset, load_name_table
from .parallel import ordered_map

_PROTOCOLS = ("minskew-protocol", "churn-protocol")


def main(argv: Sequence[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        config = _load_config(args.config) if args.config else {}
        _apply_config(args, config)
        return args.handler(args)
    except AuditError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


# ---------------------------------------------------------------------------
# parser


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value file with option defaults")
    common.add_argument("--format", choices=(dataio.FORMAT_CSV, dataio.FORMAT_JSON), default=None)
    common.add_argument("--output", "-o", help="output path (default: stdout)")

    scheme = argparse.ArgumentParser(add_help=False)
    scheme.add_argument("--attribute", default=None, help="protected attribute name (default gender)")
    scheme.add_argument("--labels", default=None, help="comma-separated group labels (default F,M)")
    scheme.add_argument("--unknown-label", default=None, help="label for unresolved candidates")

    parser = argparse.ArgumentParser(prog="rankaudit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", parents=[common], help="check a snapshot file and report problems")
    p.add_argument("dataset")
    p.set_defaults(handler=_cmd_validate)

    p = sub.add_parser("label", parents=[common, scheme], help="infer group labels from name tables")
    p.add_argument("dataset")
    p.add_argument("--names", action="append", default=None, metavar="CSV",
                   help="name,label,count table; repeat to build a chain")
    p.add_argument("--full-name", action="store_true", help="look up 'first last' instead of first name")
    p.set_defaults(handler=_cmd_label)

    p = sub.add_parser("audit", parents=[common, scheme], help="exposure metrics per query, day, and cutoff")
    p.add_argument("dataset")
    p.add_argument("--baseline", help="external target proportions CSV")
    p.add_argument("--k-grid", default=None, help="cutoffs: 'N', 'A,B,C', 'LO:HI[:STEP]', or 'full'")
    p.add_argument("--metrics", default=None, help="comma list from deviation,skew,minskew,corrected_skew")
    p.add_argument("--day", default=None, help="restrict to one day (default: all days)")
    p.set_defaults(handler=_cmd_audit)

    p = sub.add_parser("churn", parents=[common, scheme], help="top-k membership churn between days")
    p.add_argument("dataset")
    p.add_argument("--k-grid", default=None, help="cutoffs (default 25,50,75,100)")
    p.add_argument("--pairs", default=None,
                   help="'anchored', 'consecutive', or explicit 'S-E,S-E,...' day pairs")
    p.set_defaults(handler=_cmd_churn)

    p = sub.add_parser("rerank", parents=[common, scheme], help="apply DetGreedy to a scored pool")
    p.add_argument("pool", help="CSV candidate_id,label,score")
    p.add_argument("--proportions", default=None, help="targets like 'F=0.5,M=0.5' (default: pool shares)")
    p.set_defaults(handler=_cmd_rerank)

    p = sub.add_parser("stats", parents=[common, scheme], help="mixed-model significance protocols")
    p.add_argument("protocol", choices=_PROTOCOLS)
    p.add_argument("dataset")
    p.add_argument("--null", default=None, help="null value for the MinSkew intercept test")
    p.add_argument("--cutoffs", default=None, help="comma-separated cutoffs (default 25,50,75,100)")
    p.add_argument("--max-missing", default=None, help="inclusion threshold on day-1 missing rate")
    p.add_argument("--min-pool", default=None, help="inclusion threshold on day-1 list length")
    p.add_argument("--baseline", help="external target proportions CSV (minskew protocol)")
    p.set_defaults(handler=_cmd_stats)

    p = sub.add_parser("simulate", parents=[common, scheme], help="generate a synthetic dataset")
    p.add_argument("--seed", default=None, required=False, help="RNG seed (required)")
    p.add_argument("--queries", default=None, help="number of queries")
    p.add_argument("--pool", default=None, help="pool size range MIN:MAX")
    p.add_argument("--weights", default=None, help="group mix, e.g. '0.45,0.55'")
    p.add_argument("--score-means", default=None, help="per-group score means")
    p.add_argument("--score-spreads", default=None, help="per-group score spreads")
    p.add_argument("--days", default=None)
    p.add_argument("--departures", default=None, help="per-group daily departure probabilities")
    p.add_argument("--missing-prob", default=None)
    p.add_argument("--postprocess", default=None, choices=(simulate.POSTPROCESS_NONE, simulate.POSTPROCESS_DETGREEDY))
    p.add_argument("--weights-concentration", default=None)
    p.add_argument("--ledger", default=None, help="path for the ground-truth ledger JSONL")
    p.add_argument("--inject-label", default=None, help="demote this group from the top page")
    p.add_argument("--inject-strength", default=None)
    p.add_argument("--inject-seed", default=None)
    p.add_argument("--page-size", default=None)
    p.set_defaults(handler=_cmd_simulate)

    p = sub.add_parser("export", parents=[common], help="pivot a long metric table into a matrix")
    p.add_argument("table", help="long-format CSV or JSONL produced by audit/churn")
    p.add_argument("--metric", required=True)
    p.add_argument("--label", default=None, help="group label filter (required for labeled metrics)")
    p.set_defaults(handler=_cmd_export)

    return parser


# ---------------------------------------------------------------------------
# config file


def _load_config(path: str) -> dict:
    """Parse flat ``key = value`` lines; quotes optional, # starts a comment."""
    values: dict[str, object] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        key, _, value = line.partition("=")
        values[key.strip().replace("-", "_")] = _coerce(value.strip())
    return values


def _coerce(text: str) -> object:
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "'\"":
        return text[1:-1]
    lowered = text.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text


def _apply_config(args: argparse.Namespace, config: dict) -> None:
    for key, value in config.items():
        if not hasattr(args, key):
            continue
        current = getattr(args, key)
        if current is None:
            setattr(args, key, value)
        elif current is False and value is True:
            setattr(args, key, True)


# ---------------------------------------------------------------------------
# shared helpers


def _scheme(args: argparse.Namespace) -> GroupScheme:
    labels = tuple(_csv_list(args.labels or "F,M"))
    return GroupScheme(
        attribute_name=args.attribute or "gender",
        labels=labels,
        unknown_label=args.unknown_label or "unknown",
    )


def _csv_list(text: str) -> list[str]:
    return [part.strip() for part in str(text).split(",") if part.strip()]


def _int_list(text: str) -> list[int]:
    return [int(part) for part in _csv_list(text)]


def _float_list(text: str) -> list[float]:
    return [float(part) for part in _csv_list(text)]


def _parse_grid(spec: str | None, limit: int) -> list[int]:
    """Cutoff grid spec: 'full', single int, comma list, or LO:HI[:STEP]."""
    if spec is None:
        grid = list(exposure.page_cutoffs(limit))
        return grid if grid else [limit]
    spec = str(spec).strip()
    if spec == "full":
        return list(range(1, limit + 1))
    if ":" in spec:
        parts = [int(p) for p in spec.split(":")]
        lo, hi = parts[0], parts[1]
        step = parts[2] if len(parts) > 2 else 1
        return list(range(lo, hi + 1, step))
    return _int_list(spec)


def _out_stream(args: argparse.Namespace):
    if args.output:
        return open(args.output, "w", encoding="utf-8", newline="")
    return None


def _emit_long(args, rows, header) -> None:
    fmt = args.format or dataio.FORMAT_CSV
    stream = _out_stream(args)
    if stream is None:
        dataio.write_long_table(rows, header, sys.stdout, fmt)
    else:
        with stream:
            dataio.write_long_table(rows, header, stream, fmt)


def _load_or_fail(path: str):
    series, report = dataio.load_dataset(path)
    for issue in report.parse_issues:
        print(f"warning: line {issue.line}: {issue.message}", file=sys.stderr)
    for issue in report.integrity_issues:
        print(
            f"warning: {issue.query_id} day {issue.day} (line {issue.line}): {issue.message}",
            file=sys.stderr,
        )
    return series, report


def _targets_for(
    snapshot,
    scheme: GroupScheme,
    baseline: dict[tuple[str, str], GroupProportions] | None,
) -> GroupProportions:
    if baseline is not None:
        key = (snapshot.query_id, scheme.attribute_name)
        if key not in baseline:
            raise ZeroTargetProportion(f"baseline has no proportions for {key!r}")
        return baseline[key]
    return observed_proportions(snapshot, scheme)


# ---------------------------------------------------------------------------
# subcommands


def _cmd_validate(args: argparse.Namespace) -> int:
    series, report = dataio.load_dataset(args.dataset)
    fmt = args.format or dataio.FORMAT_JSON
    stream = _out_stream(args)
    out = stream if stream is not None else sys.stdout
    try:
        if fmt == dataio.FORMAT_JSON:
            out.write(json.dumps(report.to_dict(), indent=2, sort_keys=False))
            out.write("\n")
        else:
            writer = csv.writer(out, lineterminator="\n")
            writer.writerow(["kind", "query_id", "day", "line", "message"])
            for issue in report.parse_issues:
                writer.writerow(["parse", "", "", issue.line, issue.message])
            for issue in report.integrity_issues:
                writer.writerow(["integrity", issue.query_id, issue.day, issue.line, issue.message])
            for query_id, day in report.quarantined:
                writer.writerow(["quarantined", query_id, day, "", ""])
    finally:
        if stream is not None:
            stream.close()
    return 0 if report.ok else 1


def _cmd_label(args: argparse.Namespace) -> int:
    if not args.names:
        raise ValueError("at least one --names table is required")
    scheme = _scheme(args)
    chain = [load_name_table(path, scheme) for path in args.names]
    series, report = _load_or_fail(args.dataset)
    snapshots = [series_one.snapshots[day] for series_one in series for day in series_one.days]
    labeled, coverage = label_dataset(snapshots, scheme, chain, full_name=bool(args.full_name))
    regrouped: dict[str, dict[int, object]] = {}
    for snap in labeled:
        regrouped.setdefault(snap.query_id, {})[snap.day] = snap
    out_series = [QuerySeries(query_id=qid, snapshots=days) for qid, days in sorted(regrouped.items())]
    destination = args.output if args.output else sys.stdout
    dataio.write_snapshots(out_series, destination)
    print(
        f"labeled {coverage.resolved}/{coverage.total} candidates (coverage {coverage.coverage:.4f})",
        file=sys.stderr,
    )
    return 0 if report.ok else 1


def _cmd_audit(args: argparse.Namespace) -> int:
    scheme = _scheme(args)
    series, report = _load_or_fail(args.dataset)
    baseline = dataio.load_baseline(args.baseline, {scheme.attribute_name: scheme}) if args.baseline else None
    metrics = _csv_list(args.metrics) if args.metrics else [
        exposure.DEVIATION, exposure.SKEW, exposure.MINSKEW, exposure.CORRECTED_SKEW
    ]
    unknown = set(metrics) - {exposure.DEVIATION, exposure.SKEW, exposure.MINSKEW, exposure.CORRECTED_SKEW}
    if unknown:
        raise ValueError(f"unrecognized metrics: {sorted(unknown)}")
    only_day = int(args.day) if args.day is not None else None

    def curves_for(one: QuerySeries) -> list[exposure.MetricCurve]:
        out = []
        for day in one.days:
            if only_day is not None and day != only_day:
                continue
            snap = one.snapshots[day]
            if not snap.entries:
                continue
            grid = _parse_grid(args.k_grid, len(snap.entries))
            try:
                targets = _targets_for(snap, scheme, baseline)
            except AuditError as exc:
                print(f"warning: {one.query_id} day {day}: {exc}", file=sys.stderr)
                continue
            try:
                if exposure.DEVIATION in metrics:
                    for label in scheme.labels:
                        out.append(exposure.deviation_curve(snap, scheme, targets, label, grid))
                if exposure.SKEW in metrics:
                    for label in scheme.labels:
                        out.append(exposure.skew_curve(snap, scheme, targets, label, grid))
                if exposure.MINSKEW in metrics:
                    out.append(exposure.minskew_curve(snap, scheme, targets, grid))
                if exposure.CORRECTED_SKEW in metrics:
                    for label in scheme.labels:
                        out.append(exposure.corrected_skew_curve(snap, scheme, targets, label, grid))
            except AuditError as exc:
                print(f"warning: {one.query_id} day {day}: {exc}", file=sys.stderr)
        return out

    curves = [curve for bundle in ordered_map(curves_for, series) for curve in bundle]
    _emit_long(args, dataio.curve_rows(curves), dataio.CURVE_HEADER)
    return 0 if report.ok else 1


def _cmd_churn(args: argparse.Namespace) -> int:
    scheme = _scheme(args)
    series, report = _load_or_fail(args.dataset)
    spec = (args.pairs or "anchored").strip()

    def cells_for(one: QuerySeries) -> list:
        if spec == "anchored":
            pairs = churn_mod.anchored_pairs(one)
        elif spec == "consecutive":
            pairs = churn_mod.consecutive_pairs(one)
        else:
            pairs = [(int(s), int(e)) for s, _, e in (p.partition("-") for p in _csv_list(spec))]
        if not pairs:
            return []
        max_len = max(len(one.snapshots[d].entries) for d in one.days)
        grid = _parse_grid(args.k_grid, max_len) if args.k_grid else list(mixedlm.DEFAULT_CUTOFFS)
        return churn_mod.churn_grid(one, scheme, grid, pairs)

    cells = [cell for bundle in ordered_map(cells_for, series) for cell in bundle]
    _emit_long(args, dataio.churn_rows(cells), dataio.CHURN_HEADER)
    return 0 if report.ok else 1


def _cmd_rerank(args: argparse.Namespace) -> int:
    scheme = _scheme(args)
    pool: list[ScoredCandidate] = []
    with open(args.pool, "r", encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != ("candidate_id", "label", "score"):
            raise ValueError("pool CSV must have header candidate_id,label,score")
        for row in reader:
            if not row:
                continue
            pool.append(ScoredCandidate(row[0].strip(), row[1].strip(), float(row[2])))
    if args.proportions:
        shares = {}
        for part in _csv_list(args.proportions):
            label, _, share = part.partition("=")
            shares[label.strip()] = float(share)
        targets = GroupProportions(scheme=scheme, shares=shares)
    else:
        counts = {label: 0 for label in scheme.labels}
        for cand in pool:
            if cand.label not in counts:
                raise ValueError(f"pool label {cand.label!r} not in scheme")
            counts[cand.label] += 1
        targets = GroupProportions(
            scheme=scheme,
            shares={label: counts[label] / len(pool) for label in scheme.labels},
            denominator=len(pool),
        )
    result = detgreedy_rerank(pool, targets)
    by_id = {cand.candidate_id: cand for cand in pool}
    fmt = args.format or dataio.FORMAT_CSV
    stream = _out_stream(args)
    out = stream if stream is not None else sys.stdout
    try:
        if fmt == dataio.FORMAT_CSV:
            writer = csv.writer(out, lineterminator="\n")
            writer.writerow(["rank", "candidate_id", "label", "score"])
            for rank, cid in enumerate(result.order, start=1):
                cand = by_id[cid]
                writer.writerow([rank, cid, cand.label, dataio.format_real(cand.score)])
        else:
            out.write(
                json.dumps(
                    {
                        "order": list(result.order),
                        "feasible": result.feasible,
                        "violations": [[k, label] for k, label in result.violation_positions],
                    },
                    ensure_ascii=False,
                )
            )
            out.write("\n")
    finally:
        if stream is not None:
            stream.close()
    if not result.feasible:
        print(f"warning: {len(result.violation_positions)} prefix-constraint violations", file=sys.stderr)
    return 0


def _cmd_stats(args: argparse.Namespace) -> int:
    scheme = _scheme(args)
    series, report = _load_or_fail(args.dataset)
    max_missing = float(args.max_missing) if args.max_missing is not None else 0.15
    min_pool = int(args.min_pool) if args.min_pool is not None else 101
    kept, manifest = dataio.filter_queries(series, max_missing, min_pool)
    dropped = sum(1 for line in manifest if not line["kept"])
    if dropped:
        print(f"filtered out {dropped}/{len(manifest)} queries", file=sys.stderr)
    cutoffs = _int_list(args.cutoffs) if args.cutoffs else list(mixedlm.DEFAULT_CUTOFFS)

    if args.protocol == "minskew-protocol":
        baseline = (
            dataio.load_baseline(args.baseline, {scheme.attribute_name: scheme}) if args.baseline else None
        )
        curves = []
        for one in kept:
            for day in one.days:
                snap = one.snapshots[day]
                if not snap.entries:
                    continue
                try:
                    targets = _targets_for(snap, scheme, baseline)
                    curves.append(exposure.minskew_curve(snap, scheme, targets, cutoffs))
                except AuditError as exc:
                    print(f"warning: {one.query_id} day {day}: {exc}", file=sys.stderr)
        null = float(args.null) if args.null is not None else mixedlm.DEFAULT_MINSKEW_NULL
        rows = mixedlm.minskew_protocol(curves, null, cutoffs)
    else:
        cells = []
        for one in kept:
            pairs = churn_mod.anchored_pairs(one)
            if pairs:
                cells.extend(churn_mod.churn_grid(one, scheme, cutoffs, pairs))
        rows = mixedlm.churn_protocol(cells, scheme, cutoffs)

    fmt = args.format or dataio.FORMAT_CSV
    stream = _out_stream(args)
    if stream is None:
        dataio.write_protocol_table(rows, sys.stdout, fmt)
    else:
        with stream:
            dataio.write_protocol_table(rows, stream, fmt)
    return 0 if report.ok else 1


def _cmd_simulate(args: argparse.Namespace) -> int:
    if args.seed is None:
        raise ValueError("--seed is required (no time-based default)")
    scheme = _scheme(args)
    labels = scheme.labels
    weights = _float_list(args.weights) if args.weights else [1.0 / len(labels)] * len(labels)
    means = _float_list(args.score_means) if args.score_means else [0.6] * len(labels)
    spreads = _float_list(args.score_spreads) if args.score_spreads else [0.15] * len(labels)
    departures = _float_list(args.departures) if args.departures else [0.0] * len(labels)
    for name, values in (("weights", weights), ("score-means", means),
                         ("score-spreads", spreads), ("departures", departures)):
        if len(values) != len(labels):
            raise ValueError(f"--{name} needs one value per label ({len(labels)})")
    pool_spec = str(args.pool or "100:200")
    lo, _, hi = pool_spec.partition(":")
    config = simulate.SimConfig(
        seed=int(args.seed),
        n_queries=int(args.queries or 100),
        pool_size=(int(lo), int(hi or lo)),
        scheme=scheme,
        group_weights=dict(zip(labels, weights)),
        score_models={
            label: simulate.ScoreModel(mean, spread)
            for label, mean, spread in zip(labels, means, spreads)
        },
        days=int(args.days or 1),
        departure_probs=dict(zip(labels, departures)),
        missing_prob=float(args.missing_prob or 0.0),
        postprocess=args.postprocess or simulate.POSTPROCESS_NONE,
        weights_concentration=(
            float(args.weights_concentration) if args.weights_concentration is not None else None
        ),
    )
    result = simulate.generate(config)
    series = result.series
    if args.inject_label is not None:
        strength = float(args.inject_strength) if args.inject_strength is not None else 1.0
        inject_seed = int(args.inject_seed) if args.inject_seed is not None else int(args.seed)
        page = int(args.page_size) if args.page_size is not None else exposure.DEFAULT_PAGE_SIZE
        series, record = simulate.inject_topk_bias(
            series, scheme, args.inject_label, strength, inject_seed, page
        )
        print(json.dumps(record, ensure_ascii=False), file=sys.stderr)
    destination = args.output if args.output else sys.stdout
    dataio.write_snapshots(series, destination)
    if args.ledger:
        dataio.write_ledger(result.truth, args.ledger)
    return 0


def _cmd_export(args: argparse.Namespace) -> int:
    rows = _read_long_table(args.table)
    wanted = [r for r in rows if r.get("metric") == args.metric]
    if args.label is not None:
        wanted = [r for r in wanted if r.get("label") == args.label]
    if not wanted:
        raise ValueError(f"no rows for metric {args.metric!r}" + (f" label {args.label!r}" if args.label else ""))
    labels = {r.get("label", "") for r in wanted}
    if len(labels) > 1:
        raise ValueError(f"rows span labels {sorted(labels)}; pass --label to pick one")

    if "start_day" in wanted[0]:
        cells = [
            churn_mod.ChurnCell(
                query_id=r["query_id"],
                attribute=r.get("attribute", ""),
                label=r.get("label", ""),
                k=int(r["k"]),
                start_day=int(r["start_day"]),
                end_day=int(r["end_day"]),
                churn=r["value"],
                base_count=1 if r["value"] is not None else 0,
            )
            for r in wanted
        ]
        source: list = cells
    else:
        grouped: dict[tuple[str, int], dict[int, float | None]] = {}
        attr = wanted[0].get("attribute", "")
        for r in wanted:
            grouped.setdefault((r["query_id"], int(r["day"])), {})[int(r["k"])] = r["value"]
        source = [
            exposure.MetricCurve(
                query_id=query_id,
                day=day,
                attribute=attr,
                label=args.label,
                metric=args.metric,
                values=values,
            )
            for (query_id, day), values in sorted(grouped.items())
        ]
    stream = _out_stream(args)
    if stream is None:
        dataio.export_heatmap(source, sys.stdout)
    else:
        with stream:
            dataio.export_heatmap(source, stream)
    return 0


def _read_long_table(path: str) -> list[dict]:
    """Read back a long-format table, CSV or JSONL, with typed cells."""
    text = Path(path).read_text(encoding="utf-8")
    head = text.lstrip()[:1]
    rows: list[dict] = []
    if head == "{":
        for line in text.splitlines():
            if not line.strip():
                continue
            raw = json.loads(line)
            raw["value"] = _parse_cell(raw.get("value"))
            rows.append(raw)
        return rows
    reader = csv.DictReader(io.StringIO(text))
    for raw in reader:
        raw["value"] = _parse_cell(raw.get("value"))
        rows.append(raw)
    return rows


def _parse_cell(value) -> float | None:
    if value is None or value == dataio.UNDEFINED or value == "":
        return None
    if value == dataio.NEG_INF:
        return -math.inf
    return float(value)


if __name__ == "__main__":
    sys.exit(main())
