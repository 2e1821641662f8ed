"""
Dataset model with per-cell missingness and per-row observed/missing index maps
"""
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from envelope_em.errors import AllMissingColumn, AllMissingRow, ShapeMismatch


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class MissPattern:
    """Observed and missing coordinates of one row in the stacked (x, y) vector"""
    obs_idx: Tuple[int, ...]
    mis_idx: Tuple[int, ...]

    @classmethod
    def from_mask(cls, observed: Sequence[bool]) -> "MissPattern":
        observed = np.asarray(observed, dtype=bool)
        return cls(
            obs_idx=tuple(int(i) for i in np.flatnonzero(observed)),
            mis_idx=tuple(int(i) for i in np.flatnonzero(~observed)),
        )

    @property
    def dim(self) -> int:
        return len(self.obs_idx) + len(self.mis_idx)

    @property
    def is_complete(self) -> bool:
        return not self.mis_idx

    @property
    def mask(self) -> np.ndarray:
        observed = np.zeros(self.dim, dtype=bool)
        observed[list(self.obs_idx)] = True
        return observed

    def gather(self, values: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Split a stacked vector (or rows of them) into observed and missing parts."""
        values = np.asarray(values, dtype=float)
        return values[..., list(self.obs_idx)], values[..., list(self.mis_idx)]

    def scatter(self, obs_values: np.ndarray, mis_values: np.ndarray) -> np.ndarray:
        """Inverse of gather."""
        obs_values = np.asarray(obs_values, dtype=float)
        mis_values = np.asarray(mis_values, dtype=float)
        shape = obs_values.shape[:-1] + (self.dim,)
        out = np.empty(shape)
        out[..., list(self.obs_idx)] = obs_values
        out[..., list(self.mis_idx)] = mis_values
        return out


@dataclass(frozen=True)
class PatternGroup:
    pattern: MissPattern
    rows: Tuple[int, ...]


@dataclass(frozen=True)
class PatternTable:
    """Distinct missingness patterns with their member rows, in first-occurrence order"""
    groups: Tuple[PatternGroup, ...]

    def __len__(self):
        return len(self.groups)

    def __iter__(self):
        return iter(self.groups)


@dataclass(frozen=True)
class ObservedDataset:
    """
    n rows of p predictors and r responses. Missing cells hold NaN in `x`/`y`
    and False in the matching `*_observed` mask.
    """
    x: np.ndarray
    y: np.ndarray
    x_observed: np.ndarray
    y_observed: np.ndarray
    predictor_names: Tuple[str, ...] = ()
    response_names: Tuple[str, ...] = ()
    _patterns: Dict[str, PatternTable] = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        x = np.array(self.x, dtype=float, copy=True)
        y = np.array(self.y, dtype=float, copy=True)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        if y.ndim == 1:
            y = y.reshape(-1, 1)
        x_obs = np.array(self.x_observed, dtype=bool, copy=True).reshape(x.shape)
        y_obs = np.array(self.y_observed, dtype=bool, copy=True).reshape(y.shape)
        if x.shape[0] != y.shape[0]:
            raise ShapeMismatch(f"x has {x.shape[0]} rows but y has {y.shape[0]}")

        x[~x_obs] = np.nan
        y[~y_obs] = np.nan
        if not (np.all(np.isfinite(x[x_obs])) and np.all(np.isfinite(y[y_obs]))):
            raise ValueError("observed cells must be finite")

        predictor_names = tuple(self.predictor_names) or tuple(f"x{j + 1}" for j in range(x.shape[1]))
        response_names = tuple(self.response_names) or tuple(f"y{k + 1}" for k in range(y.shape[1]))
        if len(predictor_names) != x.shape[1] or len(response_names) != y.shape[1]:
            raise ShapeMismatch("column names do not match the data shape")

        n = x.shape[0]
        if n:
            names = predictor_names + response_names
            observed = np.hstack([x_obs, y_obs])
            empty_columns = [names[j] for j in np.flatnonzero(~observed.any(axis=0))]
            if empty_columns:
                raise AllMissingColumn(f"column(s) with every value missing: {', '.join(empty_columns)}")
            empty_rows = np.flatnonzero(~observed.any(axis=1))
            if empty_rows.size:
                raise AllMissingRow(f"row {int(empty_rows[0]) + 1} has every value missing")

        object.__setattr__(self, "x", _frozen(x))
        object.__setattr__(self, "y", _frozen(y))
        object.__setattr__(self, "x_observed", _frozen(x_obs))
        object.__setattr__(self, "y_observed", _frozen(y_obs))
        object.__setattr__(self, "predictor_names", predictor_names)
        object.__setattr__(self, "response_names", response_names)

    @classmethod
    def from_arrays(cls, x, y, x_observed=None, y_observed=None,
                    predictor_names: Sequence[str] = (), response_names: Sequence[str] = ()):
        """Build a dataset; masks default to "observed wherever the value is not NaN"."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        if y.ndim == 1:
            y = y.reshape(-1, 1)
        if x_observed is None:
            x_observed = ~np.isnan(x)
        if y_observed is None:
            y_observed = ~np.isnan(y)
        return cls(x=x, y=y, x_observed=x_observed, y_observed=y_observed,
                   predictor_names=tuple(predictor_names), response_names=tuple(response_names))

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def r(self) -> int:
        return self.y.shape[1]

    @property
    def joint(self) -> np.ndarray:
        """Stacked (x, y) values, predictors first; NaN where missing."""
        return np.hstack([self.x, self.y])

    @property
    def joint_observed(self) -> np.ndarray:
        return np.hstack([self.x_observed, self.y_observed])

    @property
    def complete_rows(self) -> np.ndarray:
        return self.joint_observed.all(axis=1)

    @property
    def is_complete(self) -> bool:
        return bool(self.complete_rows.all())

    def missing_rates(self) -> Dict[str, float]:
        names = self.predictor_names + self.response_names
        rates = 1.0 - self.joint_observed.mean(axis=0) if self.n else np.zeros(len(names))
        return {name: float(rate) for name, rate in zip(names, rates)}

    def subset(self, rows: Sequence[int]) -> "ObservedDataset":
        """Rows in the given order (repeats allowed, as in a bootstrap resample)."""
        rows = np.asarray(rows, dtype=int)
        return ObservedDataset(
            x=self.x[rows], y=self.y[rows],
            x_observed=self.x_observed[rows], y_observed=self.y_observed[rows],
            predictor_names=self.predictor_names, response_names=self.response_names,
        )

    def complete_case(self) -> "ObservedDataset":
        return self.subset(np.flatnonzero(self.complete_rows))

    def patterns(self) -> PatternTable:
        """Pattern table, computed once per dataset."""
        table = self._patterns.get("table")
        if table is None:
            table = group_patterns(self)
            self._patterns["table"] = table
        return table

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "p": self.p,
            "r": self.r,
            "predictors": list(self.predictor_names),
            "responses": list(self.response_names),
            "missing_rates": self.missing_rates(),
            "complete_rows": int(self.complete_rows.sum()),
        }


def pattern_of(row: int, ds: ObservedDataset) -> MissPattern:
    """Observed/missing coordinates of one row, predictors before responses."""
    observed = np.concatenate([ds.x_observed[row], ds.y_observed[row]])
    return MissPattern.from_mask(observed)


def group_patterns(ds: ObservedDataset) -> PatternTable:
    """Partition rows by identical masks, patterns ordered by first occurrence."""
    members: Dict[bytes, List[int]] = {}
    order: List[bytes] = []
    observed = ds.joint_observed
    for row in range(ds.n):
        key = observed[row].tobytes()
        if key not in members:
            members[key] = []
            order.append(key)
        members[key].append(row)
    groups = []
    for key in order:
        rows = members[key]
        groups.append(PatternGroup(pattern=pattern_of(rows[0], ds), rows=tuple(rows)))
    return PatternTable(groups=tuple(groups))

