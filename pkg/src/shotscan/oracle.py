"""Brute-force oracle for small support sets.

For each prefix length k, every ordered k-prefix of the support (all
k-permutations) is evaluated and averaged with exact rational arithmetic.
That is exactly the quantity the Monte Carlo engine estimates for one fixed
support set, so the estimator can be checked against it: with full
enumeration forced, the two must match bit for bit; with sampled
permutations, the gap must stay within a few standard errors derived from the
enumerated variance.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from fractions import Fraction
from .analytics import summarize_curve
from .corpus import Dataset, SupportSet, subsample_eval
from .engine import PredictionCache, PrefixEvaluator, RunConfig, run_experiment
from .errors import BackendError, OracleGuardError
from .prompting import PromptTemplate
from .scorer import Backend

ENUMERATION_GUARD = 8


@dataclass(frozen=True)
class ExactPoint:
    k: int
    exact_mean: Fraction
    variance: Fraction
    prefix_count: int


@dataclass(frozen=True)
class ExactCurve:
    points: tuple[ExactPoint, ...]

    def mean(self, k: int) -> Fraction:
        return self.points[k].exact_mean

    def variance(self, k: int) -> Fraction:
        return self.points[k].variance


def _fresh_evaluator(
    dataset: Dataset, backend: Backend, template: PromptTemplate
) -> PrefixEvaluator:
    # In-memory memo only: each distinct (prefix, query) is scored once per pass.
    cache = PredictionCache(
        None,
        dataset_digest=dataset.digest(),
        template_digest=template.digest(),
        backend_digest=backend.digest,
    )
    return PrefixEvaluator(dataset, backend, template, cache)


def _accuracy_pass(
    support: SupportSet, dataset: Dataset, backend: Backend, template: PromptTemplate
) -> dict[int, list[Fraction]]:
    evaluator = _fresh_evaluator(dataset, backend, template)
    eval_ids = [q.id for q in dataset.eval]
    gold = {q.id: q.label for q in dataset.eval}
    total = len(eval_ids)
    out: dict[int, list[Fraction]] = {}
    for k in range(len(support.members) + 1):
        prefixes = [tuple(p) for p in itertools.permutations(support.members, k)]
        units = [(prefix, qid) for prefix in prefixes for qid in eval_ids]
        predictions = evaluator.predictions(units)
        out[k] = [
            Fraction(
                sum(1 for qid in eval_ids if predictions[(prefix, qid)] == gold[qid]), total
            )
            for prefix in prefixes
        ]
    return out


def exact_expectation(
    support: SupportSet,
    dataset: Dataset,
    backend: Backend,
    template: PromptTemplate,
    *,
    guard: int = ENUMERATION_GUARD,
    check_determinism: bool = True,
) -> ExactCurve:
    """Exact per-k expectation over all ordered k-prefixes of one support set.

    Requires a deterministic backend; with check_determinism the whole
    enumeration runs twice and any disagreement raises. Guarded to small
    supports, since the enumeration grows as k!/(k-j)! per prefix length.
    """
    if len(support.members) > guard:
        raise OracleGuardError(
            f"support of size {len(support.members)} exceeds enumeration guard {guard}"
        )
    if not dataset.eval:
        raise ValueError("dataset has an empty eval split")
    accuracies = _accuracy_pass(support, dataset, backend, template)
    if check_determinism:
        second = _accuracy_pass(support, dataset, backend, template)
        if second != accuracies:
            raise BackendError(
                "backend is nondeterministic: repeated evaluation of the same "
                "(prefix, query) pairs disagreed"
            )
    points = []
    for k in sorted(accuracies):
        values = accuracies[k]
        mean = sum(values, Fraction(0)) / len(values)
        variance = sum((v - mean) ** 2 for v in values) / len(values)
        points.append(
            ExactPoint(k=k, exact_mean=mean, variance=variance, prefix_count=len(values))
        )
    return ExactCurve(points=tuple(points))


def exact_expectation_unordered(
    support: SupportSet,
    dataset: Dataset,
    backend: Backend,
    template: PromptTemplate,
    *,
    guard: int = ENUMERATION_GUARD,
) -> dict[int, Fraction]:
    """Set-based cross-check: average over the C(K,k) unordered subsets.

    Each subset is evaluated in support order. For an order-insensitive
    backend this equals the ordered enumeration's mean at every k.
    """
    if len(support.members) > guard:
        raise OracleGuardError(
            f"support of size {len(support.members)} exceeds enumeration guard {guard}"
        )
    evaluator = _fresh_evaluator(dataset, backend, template)
    eval_ids = [q.id for q in dataset.eval]
    gold = {q.id: q.label for q in dataset.eval}
    total = len(eval_ids)
    out: dict[int, Fraction] = {}
    for k in range(len(support.members) + 1):
        subsets = [tuple(c) for c in itertools.combinations(support.members, k)]
        units = [(subset, qid) for subset in subsets for qid in eval_ids]
        predictions = evaluator.predictions(units)
        values = [
            Fraction(sum(1 for qid in eval_ids if predictions[(s, qid)] == gold[qid]), total)
            for s in subsets
        ]
        out[k] = sum(values, Fraction(0)) / len(values)
    return out


@dataclass(frozen=True)
class VerifyRow:
    trial: int
    k: int
    estimate: float
    exact: float
    abs_error: float
    std_error: float
    bound: float
    passed: bool


@dataclass(frozen=True)
class VerifyReport:
    passed: bool
    max_abs_error: float
    sigma: float
    tolerance: float | None
    rows: tuple[VerifyRow, ...]

    def to_json_obj(self) -> dict:
        return {
            "passed": self.passed,
            "max_abs_error": self.max_abs_error,
            "sigma": self.sigma,
            "tolerance": self.tolerance,
            "rows": [
                {
                    "trial": r.trial,
                    "k": r.k,
                    "estimate": r.estimate,
                    "exact": r.exact,
                    "abs_error": r.abs_error,
                    "std_error": r.std_error,
                    "bound": r.bound,
                    "passed": r.passed,
                }
                for r in self.rows
            ],
        }


def verify_estimator(
    config: RunConfig,
    dataset: Dataset,
    backend: Backend,
    template: PromptTemplate,
    *,
    tolerance: float | None = None,
    sigma: float = 3.0,
    guard: int = ENUMERATION_GUARD,
) -> VerifyReport:
    """Run the engine and compare each trial's per-k means to the oracle.

    With an explicit tolerance, every |estimate - exact| must stay below it.
    Otherwise the bound is sigma standard errors, sqrt(v_k / P), from the
    enumerated per-k variance v_k; at k = 0 that bound is exactly zero and the
    estimator meets it because both sides are exact fractions.
    """
    if config.k > guard:
        raise OracleGuardError(f"k={config.k} exceeds enumeration guard {guard}")
    artifact = run_experiment(config, dataset, backend, template)
    eval_ds = subsample_eval(dataset, config.eval_subsample, config.seed)
    summary = summarize_curve(artifact.records)
    effective_p = summary.permutations

    rows = []
    max_abs_error = 0.0
    for index, trial in enumerate(summary.trials):
        members = tuple(artifact.provenance["support_sets"][str(trial)])
        support = SupportSet(trial=trial, members=members, seed=config.seed)
        exact = exact_expectation(
            support, eval_ds, backend, template, guard=guard, check_determinism=False
        )
        for k in range(config.k + 1):
            estimate = summary.points[k].mean_per_trial[index]
            delta = abs(estimate - exact.mean(k))
            std_error = math.sqrt(float(exact.variance(k)) / effective_p)
            bound = tolerance if tolerance is not None else sigma * std_error
            ok = float(delta) <= bound
            max_abs_error = max(max_abs_error, float(delta))
            rows.append(
                VerifyRow(
                    trial=trial,
                    k=k,
                    estimate=float(estimate),
                    exact=float(exact.mean(k)),
                    abs_error=float(delta),
                    std_error=std_error,
                    bound=bound,
                    passed=ok,
                )
            )
    return VerifyReport(
        passed=all(r.passed for r in rows),
        max_abs_error=max_abs_error,
        sigma=sigma,
        tolerance=tolerance,
        rows=tuple(rows),
    )
