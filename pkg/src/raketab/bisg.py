"""
predictions of race from surname and geolocation under conditional
independence, on both the count scale and the probability scale.

Factors are the three conditionals P(r|g), P(r|s), P(r) plus the axis
populations needed to recover count-scale quantities. Fitting the factors
on the same labeled table they are evaluated on makes every factor exact,
which isolates the error contributed by the independence assumption itself.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

from .table import (
    AxisLabels,
    N_RACES,
    ContingencyTable,
    PredictionTable,
    _as_race_vector,
)


class MissingFactorError(LookupError):
    """A queried surname or geolocation has no fitted factor."""


def _validate_conditionals(name, table):
    for label, vec in table.items():
        s = vec.sum()
        if np.any(vec < 0):
            raise ValueError(f"{name}[{label!r}] has negative entries")
        if abs(s - 1.0) > 1e-9:
            raise ValueError(f"{name}[{label!r}] sums to {s!r}, expected 1")


@dataclass(frozen=True)
class BisgFactors:
    """The conditional-probability inputs to the independence-based predictor.

    Attributes
    ----------
    race_given_geo : dict
        geolocation -> P(r | g), a 6-vector summing to 1.
    race_given_surname : dict
        surname -> P(r | s), a 6-vector summing to 1.
    race_prior : numpy array
        P(r), a 6-vector summing to 1.
    geo_counts, surname_counts : dict, optional
        Axis populations x_{+g+} and x_{s++}; required to recover
        count-scale margins for `bisg_counts`.
    """

    race_given_geo: Mapping[str, np.ndarray]
    race_given_surname: Mapping[str, np.ndarray]
    race_prior: np.ndarray
    geo_counts: Optional[Mapping[str, float]] = None
    surname_counts: Optional[Mapping[str, float]] = None

    def __post_init__(self):
        prior = _as_race_vector(self.race_prior, name="race_prior")
        if np.any(prior < 0):
            raise ValueError("race_prior has negative entries")
        if abs(prior.sum() - 1.0) > 1e-9:
            raise ValueError(f"race_prior sums to {prior.sum()!r}, expected 1")
        object.__setattr__(self, "race_prior", prior)
        _validate_conditionals("race_given_geo", self.race_given_geo)
        _validate_conditionals("race_given_surname", self.race_given_surname)

    def total(self) -> float:
        """Population total recovered from the geolocation counts."""
        if self.geo_counts is None:
            raise ValueError("factors carry no geolocation counts")
        return float(sum(self.geo_counts.values()))


@dataclass(frozen=True)
class VoterAdjustment:
    """Entrywise reweighting proportional to the probability of being a
    registered voter given race."""

    weight: np.ndarray

    def __post_init__(self):
        w = _as_race_vector(self.weight, name="adjustment weight")
        if np.any(w < 0):
            raise ValueError("adjustment weights must be nonnegative")
        if not np.any(w > 0):
            raise ValueError("adjustment weights are all zero")
        object.__setattr__(self, "weight", w)


def fit_factors(labeled: ContingencyTable) -> BisgFactors:
    """Fit exact factors from a race-labeled table.

    P(r|g) and P(r|s) are the normalized geolocation and surname margins;
    P(r) is the normalized race margin. Geolocations and surnames with zero
    mass are omitted from the factor maps.
    """
    total = labeled.total()
    if total <= 0:
        raise ValueError("cannot fit factors on a table with zero total")
    gr = labeled.margin("gr")
    sr = labeled.margin("sr")
    g_tot = gr.sum(axis=1)
    s_tot = sr.sum(axis=1)
    race_given_geo = {
        g: gr[i] / g_tot[i]
        for i, g in enumerate(labeled.labels.geolocations)
        if g_tot[i] > 0
    }
    race_given_surname = {
        s: sr[i] / s_tot[i]
        for i, s in enumerate(labeled.labels.surnames)
        if s_tot[i] > 0
    }
    geo_counts = {
        g: float(g_tot[i])
        for i, g in enumerate(labeled.labels.geolocations)
        if g_tot[i] > 0
    }
    surname_counts = {
        s: float(s_tot[i])
        for i, s in enumerate(labeled.labels.surnames)
        if s_tot[i] > 0
    }
    return BisgFactors(
        race_given_geo=race_given_geo,
        race_given_surname=race_given_surname,
        race_prior=labeled.margin("r") / total,
        geo_counts=geo_counts,
        surname_counts=surname_counts,
    )


def bisg_counts(factors: BisgFactors, support) -> tuple[PredictionTable, list]:
    """Count-scale predictions over a set of (surname, geolocation) cells.

    Each cell gets the product of the geolocation-by-race and
    surname-by-race count margins divided by the race totals. Races with a
    zero count total get a zero prediction.

    Parameters
    ----------
    factors : BisgFactors
        Must include `geo_counts` and `surname_counts`.
    support : iterable of (surname, geolocation)
        Cells to predict.

    Returns
    -------
    (PredictionTable, list of (surname, geolocation, reason))
        Cells whose surname or geolocation has no factor are skipped and
        listed in the rejects report.
    """
    if factors.geo_counts is None or factors.surname_counts is None:
        raise ValueError("bisg_counts requires geolocation and surname counts")
    race_totals = factors.race_prior * factors.total()
    live = race_totals > 0
    inv_totals = np.zeros(N_RACES)
    inv_totals[live] = 1.0 / race_totals[live]

    rejects = []
    keep = []
    for s, g in sorted(set(support)):
        if g not in factors.race_given_geo:
            rejects.append((s, g, "missing geolocation factor"))
        elif s not in factors.race_given_surname:
            rejects.append((s, g, "missing surname factor"))
        else:
            keep.append((s, g))
    if not keep:
        raise ValueError("no predictable cells in support")

    surnames = sorted({s for s, _ in keep})
    geos = sorted({g for _, g in keep})
    s_pos = {s: i for i, s in enumerate(surnames)}
    g_pos = {g: i for i, g in enumerate(geos)}
    x_sr = np.array(
        [factors.race_given_surname[s] * factors.surname_counts[s] for s in surnames]
    )
    x_gr = np.array([factors.race_given_geo[g] * factors.geo_counts[g] for g in geos])
    index = np.array([(s_pos[s], g_pos[g]) for s, g in keep], dtype=np.int64)
    values = x_gr[index[:, 1]] * x_sr[index[:, 0]] * inv_totals
    table = PredictionTable._from_sorted_arrays(AxisLabels(surnames, geos), index, values)
    return table, rejects


def posterior(race_given_geo, race_given_surname, race_prior, weight=None) -> np.ndarray:
    """Normalized product P(r|g) * P(r|s) / P(r), optionally reweighted.

    Races with a zero prior are excluded rather than producing 0/0. The
    output is invariant to positive rescaling of any input, since the
    normalization absorbs scale.
    """
    rg = np.asarray(race_given_geo, dtype=np.float64)
    rs = np.asarray(race_given_surname, dtype=np.float64)
    prior = np.asarray(race_prior, dtype=np.float64)
    num = np.zeros(N_RACES)
    live = prior > 0
    num[live] = rg[live] * rs[live] / prior[live]
    if weight is not None:
        num = num * np.asarray(weight, dtype=np.float64)
    s = num.sum()
    if s <= 0:
        raise ValueError("no admissible race for cell")
    return num / s


def bisg_probability(
    factors: BisgFactors,
    surname: str,
    geolocation: str,
    adjustment: Optional[VoterAdjustment] = None,
) -> np.ndarray:
    """Posterior race distribution for one (surname, geolocation) pair.

    With an adjustment, the unnormalized posterior is multiplied entrywise
    by the adjustment weight before renormalizing, which restricts the
    prediction to the registered-voter population.
    """
    rg = factors.race_given_geo.get(geolocation)
    rs = factors.race_given_surname.get(surname)
    if rg is None:
        raise MissingFactorError(f"label not in factors: geolocation {geolocation!r}")
    if rs is None:
        raise MissingFactorError(f"label not in factors: surname {surname!r}")
    weight = adjustment.weight if adjustment is not None else None
    return posterior(rg, rs, factors.race_prior, weight=weight)


def voter_adjustment(cps_race_given_voter, census_race_prior_18plus) -> VoterAdjustment:
    """Entrywise ratio of the voter race distribution to the census prior.

    Both inputs must be probability vectors (sum 1 within 1e-6). Races that
    are zero in both get weight 0; a voter race unsupported by the census
    prior is an error.
    """
    cps = _as_race_vector(cps_race_given_voter, name="cps_race_given_voter")
    prior = _as_race_vector(census_race_prior_18plus, name="census_race_prior_18plus")
    for name, v in (("cps distribution", cps), ("census prior", prior)):
        if np.any(v < 0):
            raise ValueError(f"{name} has negative entries")
        if abs(v.sum() - 1.0) > 1e-6:
            raise ValueError(f"{name} sums to {v.sum()!r}, expected 1")
    bad = (cps > 0) & (prior == 0)
    if np.any(bad):
        idx = int(np.nonzero(bad)[0][0])
        raise ValueError(f"unsupported race in voter population (index {idx})")
    weight = np.zeros(N_RACES)
    live = prior > 0
    weight[live] = cps[live] / prior[live]
    return VoterAdjustment(weight)


def baseline_geo_only(factors: BisgFactors, geolocation: str) -> np.ndarray:
    """The geolocation-only prediction P(r | g)."""
    rg = factors.race_given_geo.get(geolocation)
    if rg is None:
        raise MissingFactorError(f"label not in factors: geolocation {geolocation!r}")
    return rg.copy()


def baseline_surname_only(factors: BisgFactors, surname: str) -> np.ndarray:
    """The surname-only prediction P(r | s)."""
    rs = factors.race_given_surname.get(surname)
    if rs is None:
        raise MissingFactorError(f"label not in factors: surname {surname!r}")
    return rs.copy()


def weighted_counts(
    factors: BisgFactors,
    cell_totals: Mapping[tuple[str, str], float],
    adjustment: Optional[VoterAdjustment] = None,
    method: str = "bisg",
    surname_fallback: bool = True,
) -> tuple[PredictionTable, list]:
    """Weighted-estimator prediction table: cell total times p(r | s, g).

    Parameters
    ----------
    cell_totals : mapping (surname, geolocation) -> weight
        Number of people at each cell, typically x_{sg+} from a voter file.
    method : {"bisg", "geo-only", "surname-only"}
        Conditional used per cell.
    surname_fallback : bool
        When True, a surname missing from the factors falls back to the
        geolocation-only prediction and the cell is flagged in the rejects
        report; this keeps the estimator's total weight intact. Cells with
        a missing geolocation factor are always skipped and flagged.

    Returns
    -------
    (PredictionTable, list of (surname, geolocation, reason))
    """
    if method not in ("bisg", "geo-only", "surname-only"):
        raise ValueError(f"unknown method {method!r}")
    weight = adjustment.weight if adjustment is not None else None

    keys = []
    weights = []
    for (s, g), w in sorted(cell_totals.items()):
        if w < 0:
            raise ValueError(f"negative cell total at {(s, g)}")
        if w > 0:
            keys.append((s, g))
            weights.append(float(w))
    if not keys:
        raise ValueError("no predictable cells")

    surnames = sorted({s for s, _ in keys})
    geos = sorted({g for _, g in keys})
    rs, rs_ok = _factor_matrix(factors.race_given_surname, surnames)
    rg, rg_ok = _factor_matrix(factors.race_given_geo, geos)
    s_pos = {s: i for i, s in enumerate(surnames)}
    g_pos = {g: i for i, g in enumerate(geos)}
    s_code = np.array([s_pos[s] for s, _ in keys])
    g_code = np.array([g_pos[g] for _, g in keys])
    w_arr = np.array(weights)

    rejects = []
    n = len(keys)
    if method == "surname-only":
        ok = rs_ok[s_code]
        num = rs[s_code].copy()
        for i in np.nonzero(~ok)[0]:
            rejects.append((*keys[i], "missing surname factor"))
        if weight is not None:
            num *= weight
    elif method == "geo-only":
        ok = rg_ok[g_code]
        num = rg[g_code].copy()
        for i in np.nonzero(~ok)[0]:
            rejects.append((*keys[i], "missing geolocation factor"))
        if weight is not None:
            num *= weight
    else:
        has_g = rg_ok[g_code]
        has_s = rs_ok[s_code]
        prior = factors.race_prior
        live = prior > 0
        num = np.zeros((n, N_RACES))
        num[:, live] = rg[g_code][:, live] * rs[s_code][:, live] / prior[live]
        fallback = has_g & ~has_s
        num[fallback] = rg[g_code[fallback]]
        if weight is not None:
            num *= weight
        ok = has_g & (has_s | surname_fallback)
        for i in np.nonzero(~has_g)[0]:
            rejects.append((*keys[i], "missing geolocation factor"))
        for i in np.nonzero(fallback)[0]:
            if surname_fallback:
                rejects.append(
                    (*keys[i], "missing surname factor; used geolocation baseline")
                )
            else:
                rejects.append((*keys[i], "missing surname factor"))
    if not np.any(ok):
        raise ValueError("no predictable cells")

    sums = num.sum(axis=1)
    dead = ok & (sums <= 0)
    if np.any(dead):
        raise ValueError(f"no admissible race for cell {keys[int(np.nonzero(dead)[0][0])]}")

    rejects.sort()
    kept = np.nonzero(ok)[0]
    kept_keys = [keys[i] for i in kept]
    out_surnames = sorted({s for s, _ in kept_keys})
    out_geos = sorted({g for _, g in kept_keys})
    os_pos = {s: i for i, s in enumerate(out_surnames)}
    og_pos = {g: i for i, g in enumerate(out_geos)}
    index = np.array([(os_pos[s], og_pos[g]) for s, g in kept_keys], dtype=np.int64)
    values = (w_arr[kept] / sums[kept])[:, None] * num[kept]
    table = PredictionTable._from_sorted_arrays(
        AxisLabels(out_surnames, out_geos), index, values
    )
    return table, rejects


def _factor_matrix(factor_map, labels):
    """Stack per-label factor vectors; the mask flags labels with a factor."""
    out = np.zeros((len(labels), N_RACES))
    ok = np.zeros(len(labels), dtype=bool)
    for i, label in enumerate(labels):
        vec = factor_map.get(label)
        if vec is not None:
            out[i] = vec
            ok[i] = True
    return out, ok
