"""
core data model: sparse three-way (surname x geolocation x race) tables.

Tables are stored sparsely by (surname, geolocation) cell with a dense
6-vector of race counts per cell. Counts are real-valued; absent cells are
exactly zero. Tables are immutable after construction, so they are safe to
share across threads.
"""

from __future__ import annotations

from enum import IntEnum
from typing import Iterable, Iterator, Mapping

import numpy as np

N_RACES = 6


class RaceCategory(IntEnum):
    """The six canonical race/ethnicity categories, in fixed order."""

    AIAN = 0
    API = 1
    BLACK = 2
    HISPANIC = 3
    WHITE = 4
    OTHER = 5


# lowercase names used in file headers and JSON keys, in category order
RACE_NAMES = ("aian", "api", "black", "hispanic", "white", "other")
# display labels used in reports
RACE_LABELS = ("AIAN", "API", "Black", "Hispanic", "White", "Other")

_AXES = ("s", "g", "r")


def _as_race_vector(values, name="values"):
    vec = np.asarray(values, dtype=np.float64)
    if vec.shape != (N_RACES,):
        raise ValueError(f"{name} must have length {N_RACES}, got shape {vec.shape}")
    return vec


class AxisLabels:
    """Ordered surname and geolocation labels, plus an optional region grouping.

    Labels are unique within each axis. `regions` maps a geolocation label to
    the name of a coarser geographic group used by region-level metrics.
    """

    __slots__ = ("surnames", "geolocations", "regions")

    def __init__(self, surnames, geolocations, regions=None):
        surnames = tuple(surnames)
        geolocations = tuple(geolocations)
        if len(surnames) < 1 or len(geolocations) < 1:
            raise ValueError("need at least one surname and one geolocation")
        if len(set(surnames)) != len(surnames):
            raise ValueError("duplicate surname labels")
        if len(set(geolocations)) != len(geolocations):
            raise ValueError("duplicate geolocation labels")
        self.surnames = surnames
        self.geolocations = geolocations
        self.regions = dict(regions) if regions else None

    @property
    def n_s(self):
        return len(self.surnames)

    @property
    def n_g(self):
        return len(self.geolocations)

    def __eq__(self, other):
        if not isinstance(other, AxisLabels):
            return NotImplemented
        return (
            self.surnames == other.surnames
            and self.geolocations == other.geolocations
        )

    def __repr__(self):
        return f"AxisLabels(n_s={self.n_s}, n_g={self.n_g})"


class ContingencyTable:
    """Sparse nonnegative three-way table of counts over (s, g, r).

    Cells are keyed by (surname index, geolocation index) and hold a dense
    6-vector of race counts. Counts may be fractional. Instances are
    immutable: the backing arrays are marked read-only.
    """

    def __init__(self, labels: AxisLabels, cells: Mapping[tuple[int, int], Iterable[float]]):
        keys = sorted(cells)
        index = np.array(keys, dtype=np.int64).reshape(len(keys), 2)
        values = np.asarray([cells[k] for k in keys], dtype=np.float64).reshape(
            len(keys), N_RACES
        )
        self._init_from_arrays(labels, index, values)

    def _init_from_arrays(self, labels, index, values):
        if len(index) and (
            index.min() < 0
            or index[:, 0].max() >= labels.n_s
            or index[:, 1].max() >= labels.n_g
        ):
            raise ValueError("cell index outside label ranges")
        if np.any(values < 0):
            bad = np.nonzero(np.any(values < 0, axis=1))[0][0]
            raise ValueError(f"negative count in cell {tuple(index[bad])}")
        self.labels = labels
        self._index = index
        self._values = values
        self._index.flags.writeable = False
        self._values.flags.writeable = False
        self._pos = None  # built lazily for cell lookups

    @classmethod
    def _from_sorted_arrays(cls, labels, index, values):
        """Internal fast path: index must already be unique and sorted."""
        table = cls.__new__(cls)
        table._init_from_arrays(
            labels,
            np.ascontiguousarray(index, dtype=np.int64),
            np.ascontiguousarray(values, dtype=np.float64),
        )
        return table

    @classmethod
    def from_label_cells(cls, cells: Mapping[tuple[str, str], Iterable[float]], regions=None):
        """Build a table from cells keyed by (surname, geolocation) strings.

        Axis labels are the sorted distinct strings that appear.
        """
        surnames = sorted({s for s, _ in cells})
        geos = sorted({g for _, g in cells})
        labels = AxisLabels(surnames, geos, regions=regions)
        s_pos = {s: i for i, s in enumerate(surnames)}
        g_pos = {g: i for i, g in enumerate(geos)}
        indexed = {(s_pos[s], g_pos[g]): v for (s, g), v in cells.items()}
        return cls(labels, indexed)

    # raw views ---------------------------------------------------------

    @property
    def cell_index(self) -> np.ndarray:
        """(n_cells, 2) array of (surname index, geolocation index) keys."""
        return self._index

    @property
    def cell_values(self) -> np.ndarray:
        """(n_cells, 6) array of race counts, aligned with `cell_index`."""
        return self._values

    @property
    def n_cells(self):
        return len(self._index)

    @property
    def cell_sums(self) -> np.ndarray:
        """Per-cell totals x_{sg+}, aligned with `cell_index`."""
        return self._values.sum(axis=1)

    def cell(self, surname: str, geolocation: str) -> np.ndarray:
        """Race 6-vector at a labeled cell; zeros if the cell is absent."""
        try:
            si = self.labels.surnames.index(surname)
            gi = self.labels.geolocations.index(geolocation)
        except ValueError:
            return np.zeros(N_RACES)
        if self._pos is None:
            self._pos = {tuple(k): i for i, k in enumerate(self._index.tolist())}
        pos = self._pos.get((si, gi))
        if pos is None:
            return np.zeros(N_RACES)
        return self._values[pos].copy()

    def support(self) -> list[tuple[str, str]]:
        """Labeled (surname, geolocation) keys of stored cells, sorted."""
        surs, geos = self.labels.surnames, self.labels.geolocations
        return [(surs[si], geos[gi]) for si, gi in self._index]

    def cell_codes(self) -> np.ndarray:
        """Flat codes s_idx * n_g + g_idx per cell, ascending (index is sorted)."""
        return self._index[:, 0] * self.labels.n_g + self._index[:, 1]

    def items(self) -> Iterator[tuple[tuple[str, str], np.ndarray]]:
        surs, geos = self.labels.surnames, self.labels.geolocations
        for (si, gi), vec in zip(self._index, self._values):
            yield (surs[si], geos[gi]), vec

    # aggregates --------------------------------------------------------

    def total(self) -> float:
        return float(self._values.sum())

    def margin(self, axes) -> np.ndarray:
        """Sum the table down to the retained axes.

        Parameters
        ----------
        axes : iterable of {"s", "g", "r"}
            Nonempty subset of axes to retain, e.g. "gr" or {"r"}.

        Returns
        -------
        numpy array
            Dense array over the retained axes in (s, g, r) order:
            "r" gives a 6-vector, "gr" an (n_g, 6) array, "sg" an
            (n_s, n_g) array, and so on. Summing the result over all of
            its axes equals ``total()``.
        """
        keep = tuple(a for a in _AXES if a in set(axes))
        if not keep or not set(axes) <= set(_AXES):
            raise ValueError(f"axes must be a nonempty subset of {_AXES}, got {axes!r}")
        n_s, n_g = self.labels.n_s, self.labels.n_g
        si, gi = self._index[:, 0], self._index[:, 1]
        if keep == ("s", "g", "r"):
            out = np.zeros((n_s, n_g, N_RACES))
            out[si, gi] = self._values
            return out
        if keep == ("s", "g"):
            out = np.zeros((n_s, n_g))
            out[si, gi] = self.cell_sums
            return out
        if keep == ("s", "r"):
            out = np.zeros((n_s, N_RACES))
            np.add.at(out, si, self._values)
            return out
        if keep == ("g", "r"):
            out = np.zeros((n_g, N_RACES))
            np.add.at(out, gi, self._values)
            return out
        if keep == ("s",):
            return np.bincount(si, weights=self.cell_sums, minlength=n_s)
        if keep == ("g",):
            return np.bincount(gi, weights=self.cell_sums, minlength=n_g)
        return self._values.sum(axis=0)  # ("r",)

    def conditionals(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-cell race conditionals p(r | s, g) for cells with positive mass.

        Returns (mask, probs) where mask flags cells with positive totals and
        probs has one normalized row per cell (rows of zero-sum cells are 0).
        """
        sums = self.cell_sums
        mask = sums > 0
        probs = np.zeros_like(self._values)
        probs[mask] = self._values[mask] / sums[mask, None]
        return mask, probs

    def __repr__(self):
        return (
            f"{type(self).__name__}(n_s={self.labels.n_s}, n_g={self.labels.n_g}, "
            f"cells={self.n_cells}, total={self.total():.6g})"
        )


class PredictionTable(ContingencyTable):
    """A table of predicted counts m_{sgr}; same layout as ContingencyTable."""


class MarginSet:
    """Raking targets: a race-margin 6-vector and per-cell (s, g) totals.

    When both families are given they must be consistent: the race targets
    and the cell targets sum to the same grand total (relative tolerance
    1e-9). Either family may be absent (race None, or an empty cell map)
    for partial target sets, e.g. when only measuring margin gaps.
    """

    __slots__ = ("race", "cell")

    def __init__(self, race, cell: Mapping[tuple[str, str], float]):
        self.race = None if race is None else _as_race_vector(race, name="race margin")
        self.cell = {(str(s), str(g)): float(w) for (s, g), w in cell.items()}
        if self.race is not None and np.any(self.race < 0):
            raise ValueError("negative race-margin target")
        if any(w < 0 for w in self.cell.values()):
            raise ValueError("negative cell-margin target")
        if self.race is not None and self.cell:
            race_total = float(self.race.sum())
            cell_total = sum(self.cell.values())
            scale = max(race_total, cell_total, 1e-300)
            if abs(race_total - cell_total) > 1e-9 * scale:
                raise ValueError(
                    "inconsistent targets: race margin sums to "
                    f"{race_total!r} but cell margins sum to {cell_total!r}"
                )

    @classmethod
    def from_table(cls, table: ContingencyTable) -> "MarginSet":
        """Targets equal to a table's own race and cell margins."""
        cell = {key: float(vec.sum()) for key, vec in table.items()}
        return cls(table.margin("r"), cell)

    def __repr__(self):
        return f"MarginSet(race={self.race}, cells={len(self.cell)})"


def build_table(records) -> ContingencyTable:
    """Accumulate (surname, geolocation, race-weight-vector) records.

    Parameters
    ----------
    records : iterable of (str, str, length-6 array-like)
        Each record adds its nonnegative weight vector to the cell for its
        (surname, geolocation) pair. Axis labels of the result are the
        sorted distinct strings encountered.

    Raises
    ------
    ValueError
        On an empty record list, an empty surname/geolocation string, or a
        negative weight (the message names the offending record index).
    """
    cells: dict[tuple[str, str], np.ndarray] = {}
    n = 0
    for i, (surname, geo, weights) in enumerate(records):
        if not surname or not geo:
            raise ValueError(f"record {i}: empty surname or geolocation")
        vec = _as_race_vector(weights, name=f"record {i} weights")
        if np.any(vec < 0):
            raise ValueError(f"record {i}: negative weight")
        key = (surname, geo)
        if key in cells:
            cells[key] = cells[key] + vec
        else:
            cells[key] = vec
        n += 1
    if n == 0:
        raise ValueError("empty table")
    return ContingencyTable.from_label_cells(cells)


def conditional_race(cell_values) -> np.ndarray:
    """Normalize a race count vector to conditional probabilities.

    The input must be nonnegative with a positive sum; the output sums
    to 1 (within 1e-12).
    """
    vec = np.asarray(cell_values, dtype=np.float64)
    if np.any(vec < 0):
        raise ValueError("negative count in cell")
    s = vec.sum()
    if s <= 0:
        raise ValueError("empty cell conditional")
    return vec / s
