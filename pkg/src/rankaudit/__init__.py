"""rankaudit: exposure audits for ranked candidate lists.

Measures how group representation in top-k prefixes compares to target
proportions (deviation, skew, MinSkew, integrality-corrected skew), tracks
day-to-day membership churn per group, applies and verifies the DetGreedy
constrained re-ranker, and tests audit hypotheses with random-intercept
mixed models.  A seeded simulator supplies ground truth for all of it.
"""
from __future__ import annotations

from .churn import (
    ChurnCell,
    anchored_pairs,
    churn_grid,
    churn_rate,
    consecutive_pairs,
    mean_churn_by_gap,
)
from .detgreedy import RerankResult, ScoredCandidate, check_feasibility, detgreedy_rerank
from .errors import (
    AuditError,
    CoefficientMissing,
    CutoffOutOfRange,
    DayMissing,
    DegenerateProportion,
    EmptyLabeledPool,
    EmptyLabeledPrefix,
    EmptyPool,
    InconsistentGrid,
    InvalidConfig,
    LabelWithoutProportion,
    MalformedRow,
    NonConvergence,
    RankDeficientDesign,
    TooFewGroups,
    UnknownLabel,
    ZeroTargetProportion,
)
from .exposure import (
    MetricCurve,
    TopKCounts,
    best_attainable_skew,
    corrected_skew,
    corrected_skew_curve,
    deviation_at_k,
    deviation_curve,
    min_skew_at_k,
    minskew_curve,
    page_cutoffs,
    skew_at_k,
    skew_curve,
    topk_counts,
)
from .mixedlm import (
    LongObservation,
    MixedModelFit,
    ProtocolRow,
    WaldTest,
    churn_protocol,
    fit_random_intercept,
    minskew_protocol,
    wald_test,
)
from .model import (
    EXTERNAL_BASELINE,
    OBSERVED_POOL,
    CandidateRecord,
    GroupProportions,
    GroupScheme,
    QuerySeries,
    RankingSnapshot,
    observed_proportions,
)
from .names import (
    CoverageReport,
    InferenceResult,
    NameFrequencyTable,
    infer_label,
    label_dataset,
    load_name_table,
    save_name_table,
    table_from_rows,
)
from .simulate import QueryTruth, ScoreModel, SimConfig, SimResult, generate, inject_topk_bias

__version__ = "0.1.0"

__all__ = [
    "AuditError",
    "CandidateRecord",
    "ChurnCell",
    "CoefficientMissing",
    "CoverageReport",
    "CutoffOutOfRange",
    "DayMissing",
    "DegenerateProportion",
    "EXTERNAL_BASELINE",
    "EmptyLabeledPool",
    "EmptyLabeledPrefix",
    "EmptyPool",
    "GroupProportions",
    "GroupScheme",
    "InconsistentGrid",
    "InferenceResult",
    "InvalidConfig",
    "LabelWithoutProportion",
    "LongObservation",
    "MalformedRow",
    "MetricCurve",
    "MixedModelFit",
    "NameFrequencyTable",
    "NonConvergence",
    "OBSERVED_POOL",
    "ProtocolRow",
    "QuerySeries",
    "QueryTruth",
    "RankDeficientDesign",
    "RankingSnapshot",
    "RerankResult",
    "ScoreModel",
    "ScoredCandidate",
    "SimConfig",
    "SimResult",
    "TooFewGroups",
    "TopKCounts",
    "UnknownLabel",
    "WaldTest",
    "ZeroTargetProportion",
    "anchored_pairs",
    "best_attainable_skew",
    "check_feasibility",
    "churn_grid",
    "churn_protocol",
    "churn_rate",
    "consecutive_pairs",
    "corrected_skew",
    "corrected_skew_curve",
    "detgreedy_rerank",
    "deviation_at_k",
    "deviation_curve",
    "fit_random_intercept",
    "generate",
    "infer_label",
    "inject_topk_bias",
    "label_dataset",
    "load_name_table",
    "mean_churn_by_gap",
    "min_skew_at_k",
    "minskew_curve",
    "minskew_protocol",
    "observed_proportions",
    "page_cutoffs",
    "save_name_table",
    "skew_at_k",
    "skew_curve",
    "table_from_rows",
    "topk_counts",
    "wald_test",
]
