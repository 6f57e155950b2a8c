"""Aggregation of eval records into curves, per-exemplar averages, and z-score selections.

All means are exact fractions; dispersions are floats. Two dispersion
variants are kept side by side (std of per-trial means vs std over every
permutation) and two per-exemplar averaging modes (accuracy at the step where
the exemplar is added vs over every cell whose prefix contains it), because a
single choice would hide the other, equally defensible reading.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from fractions import Fraction
from typing import Mapping, Sequence

from .engine import EvalRecord
from .errors import SelectionError

MU_MODES = ("at-addition", "in-prefix")

DEFAULT_Z_THRESHOLD = 1.0
DEFAULT_SET_SIZE = 6


@dataclass(frozen=True)
class CurvePoint:
    k: int
    mean_per_trial: tuple[Fraction, ...]
    grand_mean: Fraction
    std_over_trials: float
    std_over_all_perms: float


@dataclass(frozen=True)
class CurveSummary:
    points: tuple[CurvePoint, ...]
    trials: tuple[int, ...]
    permutations: int

    @property
    def k_max(self) -> int:
        return len(self.points) - 1

    def grand_mean(self, k: int) -> Fraction:
        return self.points[k].grand_mean


def _pop_std(values: Sequence[float]) -> float:
    if max(values) == min(values):
        return 0.0
    mean = sum(values) / len(values)
    return math.sqrt(sum((v - mean) ** 2 for v in values) / len(values))


def _grid(records: Sequence[EvalRecord]) -> tuple[dict, tuple[int, ...], int, int]:
    """Index records by (trial, perm, k), checking the grid is complete."""
    if not records:
        raise ValueError("no records")
    by_cell: dict[tuple[int, int, int], EvalRecord] = {}
    for record in records:
        cell = (record.trial, record.perm, record.k)
        if cell in by_cell:
            raise ValueError(f"duplicate record for (trial={cell[0]}, perm={cell[1]}, k={cell[2]})")
        by_cell[cell] = record
    trials = tuple(sorted({r.trial for r in records}))
    permutations = max(r.perm for r in records) + 1
    k_max = max(r.k for r in records)
    for trial in trials:
        for perm in range(permutations):
            for k in range(k_max + 1):
                if (trial, perm, k) not in by_cell:
                    raise ValueError(f"missing record (trial={trial}, perm={perm}, k={k})")
    return by_cell, trials, permutations, k_max


def summarize_curve(records: Sequence[EvalRecord]) -> CurveSummary:
    """Per-k means and dispersions over the full trials x permutations grid.

    grand_mean[k] is the mean over trials of the mean over permutations;
    both standard deviations use the population formula.
    """
    by_cell, trials, permutations, k_max = _grid(records)
    points = []
    for k in range(k_max + 1):
        trial_means = []
        all_values = []
        for trial in trials:
            accs = [by_cell[(trial, perm, k)].accuracy for perm in range(permutations)]
            trial_means.append(sum(accs, Fraction(0)) / permutations)
            all_values.extend(float(a) for a in accs)
        grand = sum(trial_means, Fraction(0)) / len(trial_means)
        points.append(
            CurvePoint(
                k=k,
                mean_per_trial=tuple(trial_means),
                grand_mean=grand,
                std_over_trials=_pop_std([float(m) for m in trial_means]),
                std_over_all_perms=_pop_std(all_values),
            )
        )
    return CurveSummary(points=tuple(points), trials=trials, permutations=permutations)


def per_example_average(
    records: Sequence[EvalRecord],
    support_sets: Mapping[int, Sequence[str]] | None = None,
    mode: str = "at-addition",
) -> dict[int, dict[str, Fraction]]:
    """Per-trial map exemplar -> mu_e.

    at-addition: mean over permutations of the accuracy at the step where the
    exemplar is the just-added element (exactly P samples per exemplar per
    trial). in-prefix: mean over every (perm, k) cell whose prefix contains
    the exemplar.
    """
    if mode not in MU_MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MU_MODES}")
    by_cell, trials, permutations, k_max = _grid(records)
    out: dict[int, dict[str, Fraction]] = {}
    for trial in trials:
        sums: dict[str, Fraction] = defaultdict(lambda: Fraction(0))
        counts: dict[str, int] = defaultdict(int)
        for perm in range(permutations):
            ordering = by_cell[(trial, perm, k_max)].prefix_ids
            for k in range(1, k_max + 1):
                accuracy = by_cell[(trial, perm, k)].accuracy
                members = (ordering[k - 1],) if mode == "at-addition" else ordering[:k]
                for exemplar_id in members:
                    sums[exemplar_id] += accuracy
                    counts[exemplar_id] += 1
        mu = {e: sums[e] / counts[e] for e in sums}
        if support_sets is not None:
            missing = sorted(set(support_sets[trial]) - set(mu))
            if missing:
                raise ValueError(
                    f"exemplar(s) absent from trial {trial} records: {', '.join(missing)}"
                )
        out[trial] = mu
    return out


@dataclass(frozen=True)
class TrialZScores:
    mu_e: Mapping[str, float]
    mu_t: float
    sigma_t: float
    z: Mapping[str, float]


def trial_zscores(mu_map: Mapping[str, Fraction | float]) -> TrialZScores:
    """Standardize per-exemplar averages within one trial.

    mu_t is the mean of the mu_e values and sigma_t their population standard
    deviation (squared deviations, divisor = count). A zero sigma_t maps every
    z to 0 by convention.
    """
    if len(mu_map) < 2:
        raise ValueError("z-scores need at least two exemplar averages")
    mu_e = {e: float(v) for e, v in mu_map.items()}
    values = list(mu_e.values())
    mu_t = sum(values) / len(values)
    sigma_t = _pop_std(values)
    if sigma_t > 0:
        z = {e: (v - mu_t) / sigma_t for e, v in mu_e.items()}
    else:
        z = {e: 0.0 for e in mu_e}
    return TrialZScores(mu_e=mu_e, mu_t=mu_t, sigma_t=sigma_t, z=z)


@dataclass(frozen=True)
class Selection:
    high: tuple[str, ...]
    low: tuple[str, ...]
    pooled: Mapping[str, float]


def select_extremes(
    trial_z: Mapping[int, Mapping[str, float]],
    threshold: float = DEFAULT_Z_THRESHOLD,
    set_size: int = DEFAULT_SET_SIZE,
) -> Selection:
    """Pick the highest- and lowest-scoring exemplars across trials.

    An exemplar appearing in several trials contributes its most extreme z
    (largest magnitude; sign breaks magnitude ties). Candidates must clear
    |z| > threshold; ranking ties break on exemplar id.
    """
    pooled: dict[str, float] = {}
    for trial in sorted(trial_z):
        for exemplar_id, z in trial_z[trial].items():
            current = pooled.get(exemplar_id)
            if current is None or (abs(z), z) > (abs(current), current):
                pooled[exemplar_id] = z
    candidates = {e: z for e, z in pooled.items() if abs(z) > threshold}
    if len(candidates) < 2 * set_size:
        raise SelectionError(
            f"only {len(candidates)} exemplar(s) exceed |z| > {threshold}, need "
            f"{2 * set_size}; relax the threshold or add trials"
        )
    high = tuple(sorted(candidates, key=lambda e: (-candidates[e], e))[:set_size])
    low = tuple(sorted(candidates, key=lambda e: (candidates[e], e))[:set_size])
    return Selection(high=high, low=low, pooled=pooled)


@dataclass(frozen=True)
class ZScoreReport:
    mode: str
    threshold: float
    set_size: int
    trials: Mapping[int, TrialZScores]
    pooled: Mapping[str, float]
    high_set: tuple[str, ...]
    low_set: tuple[str, ...]


def zscore_report(
    records: Sequence[EvalRecord],
    *,
    mode: str = "at-addition",
    threshold: float = DEFAULT_Z_THRESHOLD,
    set_size: int = DEFAULT_SET_SIZE,
    support_sets: Mapping[int, Sequence[str]] | None = None,
) -> ZScoreReport:
    """End-to-end selection pipeline: records -> mu_e -> z -> high/low sets."""
    mu_by_trial = per_example_average(records, support_sets=support_sets, mode=mode)
    trials = {t: trial_zscores(mu) for t, mu in mu_by_trial.items()}
    selection = select_extremes({t: s.z for t, s in trials.items()}, threshold, set_size)
    return ZScoreReport(
        mode=mode,
        threshold=threshold,
        set_size=set_size,
        trials=trials,
        pooled=selection.pooled,
        high_set=selection.high,
        low_set=selection.low,
    )


# ---------------------------------------------------------------------------
# Plot-data tables and serialization


def curve_json_obj(summary: CurveSummary) -> dict:
    return {
        "trials": list(summary.trials),
        "permutations": summary.permutations,
        "points": [
            {
                "k": p.k,
                "grand_mean": float(p.grand_mean),
                "grand_mean_exact": f"{p.grand_mean.numerator}/{p.grand_mean.denominator}",
                "mean_per_trial": [float(m) for m in p.mean_per_trial],
                "std_over_trials": p.std_over_trials,
                "std_over_all_perms": p.std_over_all_perms,
            }
            for p in summary.points
        ],
    }


def curve_table(summary: CurveSummary) -> tuple[list[str], list[list]]:
    """One row per k: grand mean plus both dispersion columns."""
    header = ["k", "grand_mean", "std_over_trials", "std_over_all_perms"]
    rows = [
        [p.k, float(p.grand_mean), p.std_over_trials, p.std_over_all_perms]
        for p in summary.points
    ]
    return header, rows


def trace_table(records: Sequence[EvalRecord]) -> tuple[list[str], list[list]]:
    """One row per (trial, permutation); columns are the k-step accuracies."""
    by_cell, trials, permutations, k_max = _grid(records)
    header = ["trial", "perm"] + [f"k{k}" for k in range(k_max + 1)]
    rows = []
    for trial in trials:
        for perm in range(permutations):
            rows.append(
                [trial, perm]
                + [float(by_cell[(trial, perm, k)].accuracy) for k in range(k_max + 1)]
            )
    return header, rows


def oneshot_table(records: Sequence[EvalRecord]) -> tuple[list[str], list[list]]:
    """One-shot accuracy per permutation plus one zero-shot reference row per trial."""
    by_cell, trials, permutations, _ = _grid(records)
    header = ["trial", "perm", "kind", "exemplar_id", "accuracy"]
    rows = []
    for trial in trials:
        rows.append(
            [trial, "", "zero_shot", "", float(by_cell[(trial, 0, 0)].accuracy)]
        )
        for perm in range(permutations):
            record = by_cell[(trial, perm, 1)]
            rows.append(
                [trial, perm, "one_shot", record.prefix_ids[0], float(record.accuracy)]
            )
    return header, rows


def zscore_json_obj(report: ZScoreReport) -> dict:
    return {
        "mode": report.mode,
        "threshold": report.threshold,
        "set_size": report.set_size,
        "high_set": list(report.high_set),
        "low_set": list(report.low_set),
        "pooled_z": dict(sorted(report.pooled.items())),
        "trials": {
            str(t): {
                "mu_t": s.mu_t,
                "sigma_t": s.sigma_t,
                "mu_e": dict(sorted(s.mu_e.items())),
                "z": dict(sorted(s.z.items())),
            }
            for t, s in sorted(report.trials.items())
        },
    }


def zscore_table(report: ZScoreReport) -> tuple[list[str], list[list]]:
    """One row per (exemplar, trial)."""
    header = ["trial", "exemplar_id", "mu_e", "mu_t", "sigma_t", "z"]
    rows = []
    for trial, scores in sorted(report.trials.items()):
        for exemplar_id in sorted(scores.mu_e):
            rows.append(
                [
                    trial,
                    exemplar_id,
                    scores.mu_e[exemplar_id],
                    scores.mu_t,
                    scores.sigma_t,
                    scores.z[exemplar_id],
                ]
            )
    return header, rows
