"""Random-intercept linear mixed models and the audit test protocols.

The model is ``y = X beta + Z b + e`` with one random intercept per query:
``b ~ N(0, tau^2 I)``, ``e ~ N(0, sigma^2 I)``.  Writing ``lambda`` for the
variance ratio ``tau^2 / sigma^2`` gives ``y ~ N(X beta, sigma^2 W)`` with
``W = I + lambda Z Z^T`` block diagonal, so everything profiles down to a
one-dimensional search:

* ``W^-1`` restricted to a query with ``n_j`` rows is
  ``I - (lambda / (1 + lambda n_j)) J``,
* ``log |W| = sum_j log(1 + lambda n_j)``,
* GLS at fixed lambda gives ``beta_hat`` and the residual quadratic form
  ``r^T W^-1 r``, and the restricted criterion to minimize is
  ``(n - p) log(r^T W^-1 r) + log |W| + log |X^T W^-1 X|``.

The search brackets the minimizer on a log-spaced grid (with the boundary
``lambda = 0`` evaluated explicitly, so pure fixed-effects data degrades to
OLS exactly) and then polishes with a bounded scalar minimization to 1e-8
relative tolerance.  Standard errors come from
``sigma_hat^2 (X^T W^-1 X)^-1`` at the fitted ratio.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from .churn import ChurnCell
from .errors import (
    CoefficientMissing,
    NonConvergence,
    RankDeficientDesign,
    TooFewGroups,
)
from .exposure import MetricCurve
from .model import GroupScheme

logger = logging.getLogger(__name__)

INTERCEPT = "intercept"

# Published post-deployment MinSkew@100 self-audit figure used as the default
# null level when testing whether independently measured skew is worse.
DEFAULT_MINSKEW_NULL = -0.011

DEFAULT_CUTOFFS = (25, 50, 75, 100)

_LAMBDA_MAX = 1e8
_REL_TOL = 1e-8


@dataclass(frozen=True)
class LongObservation:
    """One response row: grouping id, response value, named covariates."""

    query_id: str
    response: float
    covariates: Mapping[str, float]

    def __post_init__(self) -> None:
        if not math.isfinite(self.response):
            raise ValueError(f"response must be finite, got {self.response!r}")


@dataclass(frozen=True)
class MixedModelFit:
    """Fitted random-intercept model."""

    beta: Mapping[str, float]
    se: Mapping[str, float]
    tau2: float
    sigma2: float
    loglik: float
    converged: bool
    n_obs: int
    n_groups: int
    var_ratio: float
    method: str


@dataclass(frozen=True)
class WaldTest:
    """Two-sided normal test of one coefficient against a null value."""

    coefficient: str
    estimate: float
    se: float
    null_value: float
    z: float
    p_value: float
    ci95: tuple[float, float]


@dataclass(frozen=True)
class ProtocolRow:
    """One emitted line of a test protocol table."""

    k: int
    coefficient: str
    estimate: float
    se: float
    z: float
    p_value: float
    ci_lo: float
    ci_hi: float
    n_obs: int
    n_groups: int
    n_excluded: int


class _Profile:
    """Sufficient statistics for evaluating the profiled criterion in
    O(groups * p^2) per lambda, independent of n."""

    def __init__(self, X: np.ndarray, y: np.ndarray, codes: np.ndarray, n_groups: int) -> None:
        self.n, self.p = X.shape
        self.S = np.zeros((n_groups, self.p))
        np.add.at(self.S, codes, X)
        self.t = np.bincount(codes, weights=y, minlength=n_groups)
        self.sizes = np.bincount(codes, minlength=n_groups).astype(np.float64)
        self.A = X.T @ X
        self.b = X.T @ y
        self.q = float(y @ y)

    def gls(self, lam: float) -> tuple[np.ndarray, np.ndarray, float, float, float]:
        """(beta, XtWiX, rss, logdetW, logdetXtWiX) at fixed variance ratio."""
        c = lam / (1.0 + lam * self.sizes)
        xtwix = self.A - (self.S.T * c) @ self.S
        xtwiy = self.b - self.S.T @ (c * self.t)
        ytwiy = self.q - float(c @ (self.t * self.t))
        beta = np.linalg.solve(xtwix, xtwiy)
        rss = max(ytwiy - float(xtwiy @ beta), 1e-300)
        logdet_w = float(np.log1p(lam * self.sizes).sum())
        sign, logdet_x = np.linalg.slogdet(xtwix)
        if sign <= 0:
            raise np.linalg.LinAlgError("X^T W^-1 X not positive definite")
        return beta, xtwix, rss, logdet_w, logdet_x

    def criterion(self, lam: float, reml: bool) -> float:
        try:
            _, _, rss, logdet_w, logdet_x = self.gls(lam)
        except np.linalg.LinAlgError:
            return math.inf
        if reml:
            return (self.n - self.p) * math.log(rss) + logdet_w + logdet_x
        return self.n * math.log(rss) + logdet_w


def fit_random_intercept(
    data: Iterable[LongObservation],
    fixed_design: Sequence[str] = (INTERCEPT,),
    method: str = "reml",
) -> MixedModelFit:
    """Fit a random-intercept model by profiled REML (or ML).

    ``fixed_design`` lists coefficient names in order; the name
    ``"intercept"`` denotes the constant column, every other name is looked
    up in each observation's covariates.  Raises
    :class:`RankDeficientDesign`, :class:`TooFewGroups`, or
    :class:`NonConvergence` when the ratio search runs off its bracket.
    """
    if method not in ("reml", "ml"):
        raise ValueError(f"method must be 'reml' or 'ml', got {method!r}")
    rows = list(data)
    names = list(fixed_design)
    if not names:
        raise ValueError("fixed_design must name at least one coefficient")
    if len(set(names)) != len(names):
        raise ValueError("fixed_design names must be unique")
    n, p = len(rows), len(names)
    if n < p + 2:
        raise ValueError(f"need at least {p + 2} observations for {p} coefficients, got {n}")

    group_ids: dict[str, int] = {}
    codes = np.empty(n, dtype=np.intp)
    X = np.empty((n, p))
    y = np.empty(n)
    for r, obs in enumerate(rows):
        codes[r] = group_ids.setdefault(obs.query_id, len(group_ids))
        y[r] = obs.response
        for j, name in enumerate(names):
            if name == INTERCEPT:
                X[r, j] = 1.0
            else:
                try:
                    X[r, j] = obs.covariates[name]
                except KeyError:
                    raise ValueError(f"observation {r} lacks covariate {name!r}") from None
    n_groups = len(group_ids)
    if n_groups < 2:
        raise TooFewGroups(f"need at least 2 queries, got {n_groups}")
    if np.linalg.matrix_rank(X) < p:
        raise RankDeficientDesign("fixed-effect design is rank deficient")
    profile = _Profile(X, y, codes, n_groups)
    reml = method == "reml"
    if n_groups == n:
        # With one observation per query W = (1 + lambda)I, which cancels out
        # of the profiled criterion entirely; report the boundary fit.
        logger.warning(
            "one observation per query: variance ratio unidentifiable, reporting boundary fit"
        )
        lam_hat, converged = 0.0, True
    else:
        lam_hat, converged = _minimize_ratio(lambda lam: profile.criterion(lam, reml))

    beta, xtwix, rss, logdet_w, logdet_x = profile.gls(lam_hat)
    dof = n - p if reml else n
    sigma2 = rss / dof
    cov = sigma2 * np.linalg.inv(xtwix)
    se = np.sqrt(np.diag(cov))
    if reml:
        loglik = -0.5 * ((n - p) * (math.log(2.0 * math.pi * sigma2) + 1.0) + logdet_w + logdet_x)
    else:
        loglik = -0.5 * (n * (math.log(2.0 * math.pi * sigma2) + 1.0) + logdet_w)
    return MixedModelFit(
        beta={name: float(b) for name, b in zip(names, beta)},
        se={name: float(s) for name, s in zip(names, se)},
        tau2=lam_hat * sigma2,
        sigma2=sigma2,
        loglik=loglik,
        converged=converged,
        n_obs=n,
        n_groups=n_groups,
        var_ratio=lam_hat,
        method=method,
    )


def _minimize_ratio(objective) -> tuple[float, bool]:
    """Bracket on a log grid, polish with bounded search, check stationarity."""
    grid = [0.0] + list(np.logspace(-8.0, math.log10(_LAMBDA_MAX), 65))
    values = [objective(lam) for lam in grid]
    best = int(np.argmin(values))
    if best == len(grid) - 1:
        raise NonConvergence(f"variance ratio exceeded search bound {_LAMBDA_MAX:g}")

    if best == 0:
        res = minimize_scalar(objective, bounds=(0.0, grid[1]), method="bounded", options={"xatol": 1e-12})
        lam = float(res.x) if res.fun < values[0] else 0.0
    else:
        lo, hi = math.log(grid[best - 1]), math.log(grid[best + 1])
        res = minimize_scalar(
            lambda u: objective(math.exp(u)),
            bounds=(lo, hi),
            method="bounded",
            options={"xatol": 0.5 * _REL_TOL},
        )
        lam = math.exp(float(res.x))
        if values[0] <= res.fun:
            lam = 0.0

    f_hat = objective(lam)
    h = max(lam, 1e-6) * 1e-5
    tol = 1e-7 * max(1.0, abs(f_hat))
    stationary = objective(lam + h) >= f_hat - tol
    if lam > h:
        stationary = stationary and objective(lam - h) >= f_hat - tol
    return lam, bool(stationary)


def wald_test(fit: MixedModelFit, coefficient: str, null_value: float = 0.0) -> WaldTest:
    """Two-sided z-test of one fitted coefficient against ``null_value``."""
    if not fit.converged:
        raise ValueError("cannot test a non-converged fit")
    if coefficient not in fit.beta:
        raise CoefficientMissing(f"coefficient {coefficient!r} not in fitted design")
    estimate = fit.beta[coefficient]
    se = fit.se[coefficient]
    if not se > 0.0:
        raise ValueError(f"standard error for {coefficient!r} must be positive, got {se!r}")
    z = (estimate - null_value) / se
    p_value = math.erfc(abs(z) / math.sqrt(2.0))
    half = 1.96 * se
    return WaldTest(
        coefficient=coefficient,
        estimate=estimate,
        se=se,
        null_value=null_value,
        z=z,
        p_value=p_value,
        ci95=(estimate - half, estimate + half),
    )


def minskew_protocol(
    curves: Iterable[MetricCurve],
    null: float = DEFAULT_MINSKEW_NULL,
    cutoffs: Sequence[int] = DEFAULT_CUTOFFS,
) -> list[ProtocolRow]:
    """Test whether mean MinSkew sits below a published benchmark level.

    Each curve contributes one cell per cutoff; cells that are undefined or
    ``-inf`` are excluded (and counted).  Per cutoff, an intercept-only
    random-intercept model pools repeated days within a query, and the
    intercept is Wald-tested against ``null``.
    """
    curve_list = list(curves)
    rows: list[ProtocolRow] = []
    for k in cutoffs:
        observations: list[LongObservation] = []
        excluded = 0
        for curve in curve_list:
            value = curve.values.get(k)
            if value is None or value == -math.inf:
                excluded += 1
                continue
            observations.append(LongObservation(curve.query_id, value, {}))
        if excluded:
            logger.info("MinSkew@%d: excluded %d undefined or -inf cells", k, excluded)
        fit = fit_random_intercept(observations, (INTERCEPT,))
        test = wald_test(fit, INTERCEPT, null)
        rows.append(_row(k, test, fit, excluded))
    return rows


def churn_protocol(
    cells: Iterable[ChurnCell],
    scheme: GroupScheme,
    cutoffs: Sequence[int] = DEFAULT_CUTOFFS,
) -> list[ProtocolRow]:
    """Test for a between-group churn gap, adjusting for horizon.

    Expects churn cells anchored at one start day with varying end days, for
    a two-label scheme.  Per cutoff, churn is regressed on an indicator for
    the second scheme label plus the end day, with a random intercept per
    query; queries with any undefined cell at that cutoff are dropped (and
    counted).  The group indicator is tested against zero; the day slope is
    reported alongside.
    """
    if len(scheme.labels) != 2:
        raise ValueError("churn protocol expects a two-label scheme")
    reference, other = scheme.labels
    group_coef = f"is_{other}"
    by_k: dict[int, dict[str, list[ChurnCell]]] = {k: {} for k in cutoffs}
    for cell in cells:
        if cell.k in by_k and cell.label in (reference, other):
            by_k[cell.k].setdefault(cell.query_id, []).append(cell)

    rows: list[ProtocolRow] = []
    for k in cutoffs:
        observations: list[LongObservation] = []
        excluded = 0
        for query_id in sorted(by_k[k]):
            bucket = by_k[k][query_id]
            if any(cell.churn is None for cell in bucket):
                excluded += 1
                continue
            for cell in bucket:
                observations.append(
                    LongObservation(
                        query_id=query_id,
                        response=cell.churn,
                        covariates={
                            group_coef: 1.0 if cell.label == other else 0.0,
                            "day": float(cell.end_day),
                        },
                    )
                )
        if excluded:
            logger.info("churn@%d: dropped %d queries with undefined cells", k, excluded)
        fit = fit_random_intercept(observations, (INTERCEPT, group_coef, "day"))
        rows.append(_row(k, wald_test(fit, group_coef, 0.0), fit, excluded))
        rows.append(_row(k, wald_test(fit, "day", 0.0), fit, excluded))
    return rows


def _row(k: int, test: WaldTest, fit: MixedModelFit, excluded: int) -> ProtocolRow:
    return ProtocolRow(
        k=k,
        coefficient=test.coefficient,
        estimate=test.estimate,
        se=test.se,
        z=test.z,
        p_value=test.p_value,
        ci_lo=test.ci95[0],
        ci_hi=test.ci95[1],
        n_obs=fit.n_obs,
        n_groups=fit.n_groups,
        n_excluded=excluded,
    )
