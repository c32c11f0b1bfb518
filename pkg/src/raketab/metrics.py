"""
error and calibration metrics comparing predicted tables to labeled truth.

Subpopulation metrics compare geolocation-level race totals; cellwise
metrics compare (surname, geolocation) cells in l1, l2, and negative
log-likelihood; calibration is summarized by weighted cumulative
miscalibration curves and their Kuiper statistic (max minus min of the
curve).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .table import (
    N_RACES,
    RACE_NAMES,
    ContingencyTable,
    PredictionTable,
    RaceCategory,
)

# the log of a predicted conditional is floored here so that empirically
# occupied cells with a zero prediction stay finite
NLL_PROB_FLOOR = 1e-12

ESTIMATE_MINUS_TRUTH = "estimate-minus-truth"
TRUTH_MINUS_ESTIMATE = "truth-minus-estimate"


@dataclass(frozen=True)
class SubpopReport:
    """Geolocation-level race totals of a prediction versus the truth.

    abs_error and rel_error are (n_g, 6); rel_error is NaN where the true
    subpopulation is empty. mad is the per-race sum over geolocations of
    absolute errors; avg_error is the statewide signed error per race.
    The signed entries follow `orientation`; mad is orientation-free.
    """

    geolocations: tuple
    truth_counts: np.ndarray
    estimate_counts: np.ndarray
    abs_error: np.ndarray
    rel_error: np.ndarray
    mad: np.ndarray
    avg_error: np.ndarray
    orientation: str

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(
                ["geolocation", "race", "truth", "estimate", "error", "relative_error"]
            )
            for i, g in enumerate(self.geolocations):
                for r in range(N_RACES):
                    rel = self.rel_error[i, r]
                    w.writerow(
                        [
                            g,
                            RACE_NAMES[r],
                            repr(float(self.truth_counts[i, r])),
                            repr(float(self.estimate_counts[i, r])),
                            repr(float(self.abs_error[i, r])),
                            "" if np.isnan(rel) else repr(float(rel)),
                        ]
                    )

    def summary(self) -> dict:
        return {
            "orientation": self.orientation,
            "mad": {RACE_NAMES[r]: float(self.mad[r]) for r in range(N_RACES)},
            "avg_error": {
                RACE_NAMES[r]: float(self.avg_error[r]) for r in range(N_RACES)
            },
        }


@dataclass(frozen=True)
class CellwiseReport:
    """Per-geolocation l1, l2, and negative log-likelihood, with optional
    region-level aggregates. Entries are NaN for empty geolocations."""

    geolocations: tuple
    l1: np.ndarray
    l2: np.ndarray
    nll: np.ndarray
    regions: Optional[dict] = None  # region -> (l1, l2, nll)
    overall: Optional[tuple] = None

    def to_csv(self, path):
        def fmt(x):
            return "" if np.isnan(x) else repr(float(x))

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["level", "name", "l1", "l2", "nll"])
            for i, g in enumerate(self.geolocations):
                w.writerow(["geolocation", g, fmt(self.l1[i]), fmt(self.l2[i]), fmt(self.nll[i])])
            if self.regions:
                for name in sorted(self.regions):
                    l1, l2, nll = self.regions[name]
                    w.writerow(["region", name, fmt(l1), fmt(l2), fmt(nll)])
            if self.overall is not None:
                l1, l2, nll = self.overall
                w.writerow(["overall", "", fmt(l1), fmt(l2), fmt(nll)])

    def summary(self) -> dict:
        out = {}
        if self.overall is not None:
            out["overall"] = {
                "l1": float(self.overall[0]),
                "l2": float(self.overall[1]),
                "nll": float(self.overall[2]),
            }
        if self.regions:
            out["regions"] = {
                name: {"l1": float(v[0]), "l2": float(v[1]), "nll": float(v[2])}
                for name, v in self.regions.items()
            }
        return out


@dataclass(frozen=True)
class CalibrationCurve:
    """Weighted cumulative miscalibration for one race category.

    `points` is an ordered list of (cumulative weight fraction, cumulative
    miscalibration), beginning at the origin. The Kuiper statistic is the
    difference between the curve's maximum and minimum.
    """

    race: RaceCategory
    points: list
    kuiper: float

    def values(self) -> np.ndarray:
        return np.array([v for _, v in self.points])

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["cumulative_weight", "cumulative_miscalibration"])
            for x, v in self.points:
                w.writerow([repr(float(x)), repr(float(v))])


def _check_labels(truth: ContingencyTable, pred: PredictionTable):
    """Predictions must live on the truth's label universe."""
    if set(pred.labels.geolocations) - set(truth.labels.geolocations):
        raise ValueError("prediction has geolocations unknown to the truth table")
    if set(pred.labels.surnames) - set(truth.labels.surnames):
        raise ValueError("prediction has surnames unknown to the truth table")


def _pred_margin_gr(truth, pred):
    """Prediction's (g, r) margin indexed by the truth's geolocation order."""
    out = np.zeros((truth.labels.n_g, N_RACES))
    gpos = {g: i for i, g in enumerate(truth.labels.geolocations)}
    pred_gr = pred.margin("gr")
    for j, g in enumerate(pred.labels.geolocations):
        out[gpos[g]] = pred_gr[j]
    return out


def _codes_in_truth(truth, pred):
    """Prediction cell codes in the truth's label space, ascending.

    Label maps are monotone (both label tuples are sorted), so the
    prediction's lexicographic cell order is preserved.
    """
    s_pos = {s: i for i, s in enumerate(truth.labels.surnames)}
    g_pos = {g: i for i, g in enumerate(truth.labels.geolocations)}
    s_map = np.array([s_pos[s] for s in pred.labels.surnames], dtype=np.int64)
    g_map = np.array([g_pos[g] for g in pred.labels.geolocations], dtype=np.int64)
    return (
        s_map[pred.cell_index[:, 0]] * truth.labels.n_g + g_map[pred.cell_index[:, 1]]
    )


def subpop_report(
    truth: ContingencyTable,
    pred: PredictionTable,
    orientation: str = ESTIMATE_MINUS_TRUTH,
) -> SubpopReport:
    """Compare geolocation-level race totals of a prediction to the truth.

    The default orientation reports estimate minus truth, so positive
    entries mean the subpopulation was overestimated. Relative errors
    divide by the true subpopulation and are NaN where it is zero.
    """
    if orientation not in (ESTIMATE_MINUS_TRUTH, TRUTH_MINUS_ESTIMATE):
        raise ValueError(f"unknown orientation {orientation!r}")
    _check_labels(truth, pred)
    x = truth.margin("gr")
    m = _pred_margin_gr(truth, pred)
    sign = 1.0 if orientation == ESTIMATE_MINUS_TRUTH else -1.0
    abs_err = sign * (m - x)
    with np.errstate(divide="ignore", invalid="ignore"):
        rel_err = np.where(x > 0, abs_err / x, np.nan)
    return SubpopReport(
        geolocations=truth.labels.geolocations,
        truth_counts=x,
        estimate_counts=m,
        abs_error=abs_err,
        rel_error=rel_err,
        mad=np.abs(x - m).sum(axis=0),
        avg_error=sign * (m.sum(axis=0) - x.sum(axis=0)),
        orientation=orientation,
    )


def cellwise_report(
    truth: ContingencyTable,
    pred: PredictionTable,
    region_map: Optional[dict] = None,
) -> CellwiseReport:
    """Per-geolocation l1/l2 errors and negative log-likelihood.

    For geolocation g with population x_{+g+}, l1 sums |x - m| over cells
    and races, l2 sums the per-cell euclidean norms, and the negative
    log-likelihood weights log predicted conditionals by true counts; all
    three are normalized by x_{+g+}. Region aggregates use the same
    formulas normalized by the region population. Empty geolocations
    report NaN.
    """
    _check_labels(truth, pred)
    geos = truth.labels.geolocations
    n_g = len(geos)

    t_codes = truth.cell_codes()
    p_codes = _codes_in_truth(truth, pred)
    union = np.union1d(t_codes, p_codes)
    x = np.zeros((len(union), N_RACES))
    m = np.zeros((len(union), N_RACES))
    x[np.searchsorted(union, t_codes)] = truth.cell_values
    m[np.searchsorted(union, p_codes)] = pred.cell_values
    gi = union % n_g

    d = x - m
    l1_num = np.bincount(gi, weights=np.abs(d).sum(axis=1), minlength=n_g)
    l2_num = np.bincount(gi, weights=np.sqrt((d * d).sum(axis=1)), minlength=n_g)
    m_tot = m.sum(axis=1)
    cond = np.divide(m, np.where(m_tot > 0, m_tot, 1.0)[:, None])
    log_terms = np.where(
        x > 0, x * np.log(np.maximum(cond, NLL_PROB_FLOOR)), 0.0
    )
    nll_num = -np.bincount(gi, weights=log_terms.sum(axis=1), minlength=n_g)

    pop = truth.margin("g")
    with np.errstate(divide="ignore", invalid="ignore"):
        l1 = np.where(pop > 0, l1_num / pop, np.nan)
        l2 = np.where(pop > 0, l2_num / pop, np.nan)
        nll = np.where(pop > 0, nll_num / pop, np.nan)

    regions = None
    if region_map is not None:
        regions = {}
        names = sorted(set(region_map.values()))
        for name in names:
            idx = [i for i, g in enumerate(geos) if region_map.get(g) == name]
            rpop = pop[idx].sum()
            if rpop > 0:
                regions[name] = (
                    float(l1_num[idx].sum() / rpop),
                    float(l2_num[idx].sum() / rpop),
                    float(nll_num[idx].sum() / rpop),
                )
            else:
                regions[name] = (np.nan, np.nan, np.nan)

    total = pop.sum()
    overall = (
        (float(l1_num.sum() / total), float(l2_num.sum() / total), float(nll_num.sum() / total))
        if total > 0
        else (np.nan, np.nan, np.nan)
    )
    return CellwiseReport(
        geolocations=geos, l1=l1, l2=l2, nll=nll, regions=regions, overall=overall
    )


def calibration_curve(
    truth: ContingencyTable,
    pred: PredictionTable,
    race: RaceCategory,
) -> CalibrationCurve:
    """Weighted cumulative miscalibration of one race's predictions.

    Every occupied truth cell contributes its empirical frequency f, its
    predicted conditional probability p, and its weight x_{sg+}. Cells are
    sorted by ascending p (ties broken by surname then geolocation) and the
    curve accumulates w * (f - p) normalized by the total weight, starting
    from the origin. The Kuiper statistic is max minus min over the curve.
    """
    race = RaceCategory(race)
    _check_labels(truth, pred)
    t_sums = truth.cell_sums
    occupied = t_sums > 0
    if not np.any(occupied):
        raise ValueError("empty support: no occupied cells to calibrate")
    t_codes = truth.cell_codes()[occupied]
    p_codes = _codes_in_truth(truth, pred)
    pos = np.searchsorted(p_codes, t_codes)
    bad = (pos >= len(p_codes)) | (p_codes[np.minimum(pos, len(p_codes) - 1)] != t_codes)
    m = pred.cell_values[np.minimum(pos, len(p_codes) - 1)]
    m_tot = m.sum(axis=1)
    bad |= m_tot <= 0
    if np.any(bad):
        code = int(t_codes[np.nonzero(bad)[0][0]])
        key = (
            truth.labels.surnames[code // truth.labels.n_g],
            truth.labels.geolocations[code % truth.labels.n_g],
        )
        raise ValueError(f"missing prediction for occupied cell {key}")

    weights = t_sums[occupied]
    probs = m[:, race] / m_tot
    freqs = truth.cell_values[occupied, race] / weights
    # ascending by predicted probability; ties fall back to the cells'
    # lexicographic (surname, geolocation) order for reproducible curves
    idx = truth.cell_index[occupied]
    order = np.lexsort((idx[:, 1], idx[:, 0], probs))
    weights, probs, freqs = weights[order], probs[order], freqs[order]
    wtot = weights.sum()
    cum_weight = np.cumsum(weights) / wtot
    cum_miscal = np.cumsum(weights * (freqs - probs)) / wtot
    points = [(0.0, 0.0)] + list(zip(cum_weight.tolist(), cum_miscal.tolist()))
    values = np.concatenate([[0.0], cum_miscal])
    return CalibrationCurve(
        race=race, points=points, kuiper=float(values.max() - values.min())
    )


def kuiper(curve) -> float:
    """Max minus min of a cumulative miscalibration curve, origin included.

    Accepts a CalibrationCurve or a plain sequence of curve values.
    """
    if isinstance(curve, CalibrationCurve):
        values = curve.values()
    else:
        values = np.asarray(curve, dtype=np.float64)
    if values.size == 0:
        raise ValueError("empty curve")
    values = np.concatenate([[0.0], values])
    return float(values.max() - values.min())


def write_summary_json(path, payload: dict):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
