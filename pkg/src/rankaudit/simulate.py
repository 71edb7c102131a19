"""Synthetic ranking datasets with known ground truth.

Generation mirrors a two-stage ranking system: a retrieval stage draws a
candidate pool from a group mix, a scoring stage assigns each candidate a
relevance score, and the ranking is descending score order (optionally
post-processed by DetGreedy).  Later days evolve the pool: each candidate
independently departs with its group's daily probability and is replaced by
a fresh same-group candidate, after which the list is re-ranked.
Missingness masks names and labels without touching ids or positions.

Scores are normal draws truncated to [0, 1] (inverse-CDF transform), one
unimodal bump per group.  All randomness flows from a single seed through
counter-based per-query substreams, so any subset of queries regenerates
identically regardless of scheduling; masking uses a separate substream so
toggling it never perturbs pool composition or order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.special import ndtr, ndtri

from .detgreedy import ScoredCandidate, detgreedy_rerank
from .errors import InvalidConfig
from .model import (
    EXTERNAL_BASELINE,
    CandidateRecord,
    GroupProportions,
    GroupScheme,
    QuerySeries,
    RankingSnapshot,
)
from .parallel import ordered_map

POSTPROCESS_NONE = "none"
POSTPROCESS_DETGREEDY = "detgreedy"
REPLACEMENT_SAME_GROUP = "same_group"

_CORE_STREAM = 0
_MASK_STREAM = 1


@dataclass(frozen=True)
class ScoreModel:
    """Truncated-normal score bump for one group: location and spread."""

    mean: float
    spread: float


@dataclass(frozen=True)
class SimConfig:
    """Full description of one synthetic dataset.

    ``group_weights`` is the generating mix over scheme labels; with
    ``weights_concentration`` set, each query draws its own mix from a
    Dirichlet centered on the weights (larger = tighter).  ``departure_probs``
    gives each group's independent daily drop-out chance; replacements are
    always fresh candidates from the departing group.
    """

    seed: int
    n_queries: int
    pool_size: tuple[int, int]
    scheme: GroupScheme
    group_weights: Mapping[str, float]
    score_models: Mapping[str, ScoreModel]
    days: int = 1
    departure_probs: Mapping[str, float] = field(default_factory=dict)
    missing_prob: float = 0.0
    postprocess: str = POSTPROCESS_NONE
    postprocess_targets: Mapping[str, float] | None = None
    weights_concentration: float | None = None
    replacement_policy: str = REPLACEMENT_SAME_GROUP

    def __post_init__(self) -> None:
        labels = set(self.scheme.labels)
        if self.n_queries < 1:
            raise InvalidConfig("n_queries must be >= 1")
        lo, hi = self.pool_size
        if not 1 <= lo <= hi:
            raise InvalidConfig(f"pool_size range ({lo}, {hi}) must satisfy 1 <= min <= max")
        if self.days < 1:
            raise InvalidConfig("days must be >= 1")
        if set(self.group_weights) != labels:
            raise InvalidConfig("group_weights must cover the scheme labels exactly")
        if any(w < 0.0 for w in self.group_weights.values()):
            raise InvalidConfig("group weights must be non-negative")
        if abs(sum(self.group_weights.values()) - 1.0) > 1e-9:
            raise InvalidConfig("group weights must sum to 1")
        if set(self.score_models) != labels:
            raise InvalidConfig("score_models must cover the scheme labels exactly")
        for label, model in self.score_models.items():
            if not math.isfinite(model.mean):
                raise InvalidConfig(f"score mean for {label!r} must be finite")
            if not model.spread > 0.0:
                raise InvalidConfig(f"score spread for {label!r} must be positive")
        extra = set(self.departure_probs) - labels
        if extra:
            raise InvalidConfig(f"departure_probs for labels outside the scheme: {sorted(extra)}")
        for label, prob in self.departure_probs.items():
            if not 0.0 <= prob <= 1.0:
                raise InvalidConfig(f"departure probability for {label!r} must be in [0, 1]")
        if not 0.0 <= self.missing_prob <= 1.0:
            raise InvalidConfig("missing_prob must be in [0, 1]")
        if self.postprocess not in (POSTPROCESS_NONE, POSTPROCESS_DETGREEDY):
            raise InvalidConfig(f"unrecognized postprocess {self.postprocess!r}")
        if self.postprocess_targets is not None:
            if self.postprocess != POSTPROCESS_DETGREEDY:
                raise InvalidConfig("postprocess_targets requires the detgreedy postprocess")
            if set(self.postprocess_targets) != labels:
                raise InvalidConfig("postprocess_targets must cover the scheme labels exactly")
            if any(not 0.0 <= t <= 1.0 for t in self.postprocess_targets.values()):
                raise InvalidConfig("postprocess targets must lie in [0, 1]")
            if abs(sum(self.postprocess_targets.values()) - 1.0) > 1e-9:
                raise InvalidConfig("postprocess targets must sum to 1")
        if self.weights_concentration is not None and not self.weights_concentration > 0.0:
            raise InvalidConfig("weights_concentration must be positive")
        if self.replacement_policy != REPLACEMENT_SAME_GROUP:
            raise InvalidConfig(f"unrecognized replacement policy {self.replacement_policy!r}")


@dataclass(frozen=True)
class QueryTruth:
    """Unmasked generating state for one query."""

    query_id: str
    weights: Mapping[str, float]
    composition: Mapping[str, int]
    labels: Mapping[str, str]
    scores: Mapping[str, float]
    departures: tuple[tuple[int, str], ...]


@dataclass(frozen=True)
class SimResult:
    """Generated dataset plus its ground-truth ledger."""

    series: list[QuerySeries]
    truth: list[QueryTruth]
    config: SimConfig


def generate(config: SimConfig) -> SimResult:
    """Generate the full dataset described by ``config``.

    Deterministic: the same config (seed included) always yields the same
    series and ledger, byte for byte once serialized.
    """
    results = ordered_map(lambda qi: _generate_query(config, qi), range(config.n_queries))
    return SimResult(
        series=[series for series, _ in results],
        truth=[truth for _, truth in results],
        config=config,
    )


def _substream(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy=seed, spawn_key=key)))


def _generate_query(config: SimConfig, index: int) -> tuple[QuerySeries, QueryTruth]:
    rng = _substream(config.seed, index, _CORE_STREAM)
    mask_rng = _substream(config.seed, index, _MASK_STREAM)
    scheme = config.scheme
    labels = scheme.labels
    query_id = f"q{index:05d}"

    lo, hi = config.pool_size
    n = int(rng.integers(lo, hi + 1))
    base = np.array([config.group_weights[label] for label in labels])
    if config.weights_concentration is not None:
        weights = rng.dirichlet(config.weights_concentration * np.clip(base, 1e-12, None))
    else:
        weights = base
    means = np.array([config.score_models[label].mean for label in labels])
    spreads = np.array([config.score_models[label].spread for label in labels])

    group_idx = rng.choice(len(labels), size=n, p=weights)
    scores = _truncated_scores(rng, means[group_idx], spreads[group_idx])
    masked = mask_rng.random(n) < config.missing_prob

    serial = 0
    pool: list[_Candidate] = []
    truth_labels: dict[str, str] = {}
    truth_scores: dict[str, float] = {}
    for g, score, hide in zip(group_idx, scores, masked):
        cid = f"{query_id}-c{serial:06d}"
        serial += 1
        cand = _Candidate(cid, int(g), float(score), bool(hide))
        pool.append(cand)
        truth_labels[cid] = labels[int(g)]
        truth_scores[cid] = float(score)
    composition = {label: int((group_idx == i).sum()) for i, label in enumerate(labels)}

    departure = np.array([config.departure_probs.get(label, 0.0) for label in labels])
    snapshots: dict[int, RankingSnapshot] = {}
    departures: list[tuple[int, str]] = []
    order = _rank(pool, config, scheme, labels)
    snapshots[1] = _snapshot(query_id, 1, order, scheme, labels)

    for day in range(2, config.days + 1):
        u = rng.random(len(order))
        survivors = [cand for cand, draw in zip(order, u) if draw >= departure[cand.group]]
        departed = [cand for cand, draw in zip(order, u) if draw < departure[cand.group]]
        replacements: list[_Candidate] = []
        if departed:
            groups = np.array([cand.group for cand in departed])
            fresh = _truncated_scores(rng, means[groups], spreads[groups])
            hidden = mask_rng.random(len(departed)) < config.missing_prob
            for cand, score, hide in zip(departed, fresh, hidden):
                departures.append((day, cand.candidate_id))
                cid = f"{query_id}-c{serial:06d}"
                serial += 1
                newcomer = _Candidate(cid, cand.group, float(score), bool(hide))
                replacements.append(newcomer)
                truth_labels[cid] = labels[cand.group]
                truth_scores[cid] = float(score)
        order = _rank(survivors + replacements, config, scheme, labels)
        snapshots[day] = _snapshot(query_id, day, order, scheme, labels)

    series = QuerySeries(query_id=query_id, snapshots=snapshots)
    truth = QueryTruth(
        query_id=query_id,
        weights={label: float(w) for label, w in zip(labels, weights)},
        composition=composition,
        labels=truth_labels,
        scores=truth_scores,
        departures=tuple(departures),
    )
    return series, truth


@dataclass(frozen=True)
class _Candidate:
    candidate_id: str
    group: int
    score: float
    masked: bool


def _truncated_scores(rng: np.random.Generator, means: np.ndarray, spreads: np.ndarray) -> np.ndarray:
    lo = ndtr((0.0 - means) / spreads)
    hi = ndtr((1.0 - means) / spreads)
    u = rng.random(means.shape[0])
    return np.clip(means + spreads * ndtri(lo + u * (hi - lo)), 0.0, 1.0)


def _rank(
    pool: Sequence[_Candidate],
    config: SimConfig,
    scheme: GroupScheme,
    labels: tuple[str, ...],
) -> list[_Candidate]:
    by_score = sorted(pool, key=lambda c: (-c.score, c.candidate_id))
    if config.postprocess != POSTPROCESS_DETGREEDY:
        return by_score
    if config.postprocess_targets is not None:
        proportions = GroupProportions(
            scheme=scheme,
            shares=dict(config.postprocess_targets),
            source=EXTERNAL_BASELINE,
        )
    else:
        counts = {label: 0 for label in labels}
        for cand in pool:
            counts[labels[cand.group]] += 1
        proportions = GroupProportions(
            scheme=scheme,
            shares={label: counts[label] / len(pool) for label in labels},
            denominator=len(pool),
        )
    scored = [ScoredCandidate(c.candidate_id, labels[c.group], c.score) for c in by_score]
    result = detgreedy_rerank(scored, proportions)
    by_id = {c.candidate_id: c for c in pool}
    return [by_id[cid] for cid in result.order]


def _snapshot(
    query_id: str,
    day: int,
    order: Sequence[_Candidate],
    scheme: GroupScheme,
    labels: tuple[str, ...],
) -> RankingSnapshot:
    entries = []
    for cand in order:
        if cand.masked:
            entries.append(CandidateRecord(candidate_id=cand.candidate_id, missing=True))
        else:
            entries.append(
                CandidateRecord(
                    candidate_id=cand.candidate_id,
                    group_labels={scheme.attribute_name: labels[cand.group]},
                )
            )
    return RankingSnapshot(query_id=query_id, day=day, entries=tuple(entries))


def inject_topk_bias(
    series: Sequence[QuerySeries],
    scheme: GroupScheme,
    label: str,
    strength: float,
    seed: int,
    page_size: int = 25,
) -> tuple[list[QuerySeries], dict]:
    """Probabilistically demote ``label`` members out of the first page.

    Every labeled member of the first ``page_size`` positions is demoted with
    probability ``strength``; vacated slots are filled by the highest-ranked
    non-members from below the boundary (in order), and the demoted members
    land just under the boundary keeping their relative order.  When fewer
    alternatives exist than flagged members, only as many as can be replaced
    are demoted.  Returns the modified series plus an effect record.
    """
    if not 0.0 <= strength <= 1.0:
        raise ValueError(f"strength must be in [0, 1], got {strength!r}")
    if label not in scheme.labels:
        raise ValueError(f"label {label!r} not in scheme {scheme.attribute_name!r}")
    modified: list[QuerySeries] = []
    demotions = 0
    snapshots_touched = 0
    for si, one in enumerate(series):
        rng = _substream(seed, si)
        new_snaps: dict[int, RankingSnapshot] = {}
        for day in sorted(one.snapshots):
            snap = one.snapshots[day]
            entries, moved = _demote_page(snap.entries, scheme, label, strength, rng, page_size)
            if moved:
                demotions += moved
                snapshots_touched += 1
                new_snaps[day] = RankingSnapshot(
                    query_id=snap.query_id, day=snap.day, entries=entries, pool_size=snap.pool_size
                )
            else:
                new_snaps[day] = snap
        modified.append(QuerySeries(query_id=one.query_id, snapshots=new_snaps))
    record = {
        "label": label,
        "strength": strength,
        "page_size": page_size,
        "seed": seed,
        "demotions": demotions,
        "snapshots_touched": snapshots_touched,
    }
    return modified, record


def _demote_page(
    entries: tuple[CandidateRecord, ...],
    scheme: GroupScheme,
    label: str,
    strength: float,
    rng: np.random.Generator,
    page_size: int,
) -> tuple[tuple[CandidateRecord, ...], int]:
    page = entries[:page_size]
    below = entries[page_size:]
    flagged = [
        i
        for i, record in enumerate(page)
        if record.label_for(scheme) == label and rng.random() < strength
    ]
    alternatives = [i for i, record in enumerate(below) if record.label_for(scheme) != label]
    moved = min(len(flagged), len(alternatives))
    if moved == 0:
        return entries, 0
    flagged = flagged[:moved]
    pulled = alternatives[:moved]
    kept_page = [record for i, record in enumerate(page) if i not in set(flagged)]
    new_page = kept_page + [below[i] for i in pulled]
    pulled_set = set(pulled)
    new_below = [page[i] for i in flagged] + [r for i, r in enumerate(below) if i not in pulled_set]
    return tuple(new_page) + tuple(new_below), moved
