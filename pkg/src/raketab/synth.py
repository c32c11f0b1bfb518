"""
synthetic populations with a tunable violation of the conditional
independence of surname and geolocation given race.

Each race draws a surname distribution and a geolocation distribution; a
dependence knob mixes the independent product of the two with a
race-specific diagonal pairing of surnames onto geolocations. At zero the
table factorizes exactly, so independence-based prediction reproduces it;
at one, each race's mass sits entirely on its own diagonal. All random
draws happen in a fixed order independent of the knob, so tables generated
from the same seed share their underlying factors across dependence
levels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .table import AxisLabels, N_RACES, ContingencyTable, _as_race_vector
from .bisg import BisgFactors, fit_factors


@dataclass(frozen=True)
class SynthConfig:
    n_s: int
    n_g: int
    race_mix: np.ndarray
    dependence: float
    total_population: float
    seed: int
    multinomial: bool = False

    def __post_init__(self):
        mix = _as_race_vector(self.race_mix, name="race_mix")
        if np.any(mix < 0) or abs(mix.sum() - 1.0) > 1e-9:
            raise ValueError("race_mix must be a probability vector")
        object.__setattr__(self, "race_mix", mix)
        if self.n_s < 2 or self.n_g < 2:
            raise ValueError("need at least 2 surnames and 2 geolocations")
        if not 0.0 <= self.dependence <= 1.0:
            raise ValueError("dependence must lie in [0, 1]")
        if self.total_population < 1:
            raise ValueError("total_population must be at least 1")


def _labels(prefix, n):
    # surnames are uppercase to match the canonical on-disk convention
    width = max(3, len(str(n - 1)))
    return [f"{prefix}{i:0{width}d}" for i in range(n)]


def generate(config: SynthConfig) -> ContingencyTable:
    """Generate a synthetic three-way table.

    Per race r the cell mass is proportional to

        race_mix[r] * P(s|r) * ((1 - d) * P(g|r) + d * [g == pair_r(s)])

    where d is the dependence knob and pair_r maps surname i to geolocation
    (i + r) mod n_g. At d = 0 the table has exact product form within each
    race. Counts are expected values (real numbers) unless `multinomial`
    is set, in which case they are a seeded multinomial draw of the total
    population. Deterministic per seed.
    """
    n_s, n_g = config.n_s, config.n_g
    rng = np.random.default_rng(config.seed)
    # one surname and one geolocation distribution per race, always drawn
    # in the same order so the factors are stable across dependence levels
    p_s = rng.dirichlet(np.ones(n_s), size=N_RACES)
    p_g = rng.dirichlet(np.ones(n_g), size=N_RACES)

    d = config.dependence
    probs = np.zeros((n_s, n_g, N_RACES))
    s_idx = np.arange(n_s)
    for r in range(N_RACES):
        share = config.race_mix[r]
        if share == 0:
            continue
        probs[:, :, r] = (1.0 - d) * share * np.outer(p_s[r], p_g[r])
        if d > 0:
            pair = (s_idx + r) % n_g
            probs[s_idx, pair, r] += d * share * p_s[r]

    if config.multinomial:
        total = int(config.total_population)
        flat = probs.ravel()
        draws = rng.multinomial(total, flat / flat.sum())
        cube = draws.reshape(probs.shape).astype(np.float64)
    else:
        cube = probs * config.total_population

    labels = AxisLabels(_labels("S", n_s), _labels("g", n_g))
    si, gi = np.nonzero(cube.sum(axis=2) > 0)
    index = np.column_stack([si, gi])
    return ContingencyTable._from_sorted_arrays(labels, index, cube[si, gi])


def split_factors_and_truth(table: ContingencyTable) -> tuple[BisgFactors, ContingencyTable]:
    """Self-fit factors plus the same table as ground truth.

    Fitting and testing on one labeled table makes every factor exact, so
    any downstream prediction error is attributable to the independence
    assumption alone.
    """
    return fit_factors(table), table
