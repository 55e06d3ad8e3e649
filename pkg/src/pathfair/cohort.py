"""Role-typed cohorts, CSV ingestion and trajectory preprocessing.

A :class:`Cohort` holds one row per analysis unit with columns split into
roles: confounders ``z``, binary exposure ``x``, mediator blocks ``w`` and
``v`` and outcome ``y``.  Non-role columns ride along in ``extra`` so that
filters and conditional summaries can reference them.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import pandas as pd


class CohortError(ValueError):
    pass


def _default_names(prefix: str, d: int) -> tuple[str, ...]:
    return tuple(f"{prefix}{i}" for i in range(d))


@dataclass(frozen=True, eq=False)
class Cohort:
    z: np.ndarray
    x: np.ndarray
    w: np.ndarray
    v: np.ndarray
    y: np.ndarray
    weights: np.ndarray | None = None
    z_names: tuple[str, ...] = ()
    w_names: tuple[str, ...] = ()
    v_names: tuple[str, ...] = ()
    x_name: str = "x"
    y_name: str = "y"
    extra: Mapping[str, np.ndarray] = field(default_factory=dict)
    meta: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        set_ = object.__setattr__
        z = np.asarray(self.z, float)
        if z.ndim == 1:
            z = z[:, None]
        w = np.asarray(self.w, float).reshape(len(z), -1)
        v = np.asarray(self.v, float).reshape(len(z), -1)
        x = np.asarray(self.x)
        y = np.asarray(self.y, float).reshape(-1)
        n = z.shape[0]
        if not (len(x) == len(w) == len(v) == len(y) == n):
            raise CohortError("role arrays have mismatched lengths")
        if not np.all(np.isin(x, (0, 1))):
            raise CohortError("exposure x must be binary 0/1")
        for name, arr in (("z", z), ("w", w), ("v", v), ("y", y)):
            if not np.all(np.isfinite(arr)):
                raise CohortError(f"non-finite entries in role {name}")
        set_(self, "z", z)
        set_(self, "w", w)
        set_(self, "v", v)
        set_(self, "x", x.astype(np.int64))
        set_(self, "y", y)
        if self.weights is not None:
            wt = np.asarray(self.weights, float).reshape(-1)
            if len(wt) != n or np.any(wt < 0) or not np.all(np.isfinite(wt)):
                raise CohortError("weights must be finite, non-negative, one per row")
            set_(self, "weights", wt)
        set_(self, "z_names", tuple(self.z_names) or _default_names("z", z.shape[1]))
        set_(self, "w_names", tuple(self.w_names) or _default_names("w", w.shape[1]))
        set_(self, "v_names", tuple(self.v_names) or _default_names("v", v.shape[1]))
        set_(self, "extra", {k: np.asarray(a) for k, a in dict(self.extra).items()})
        for arr in (self.z, self.w, self.v, self.x, self.y):
            arr.setflags(write=False)

    @property
    def n(self) -> int:
        return int(self.y.shape[0])

    def __len__(self) -> int:
        return self.n

    def take(self, idx) -> "Cohort":
        idx = np.asarray(idx)
        return Cohort(
            z=self.z[idx], x=self.x[idx], w=self.w[idx], v=self.v[idx], y=self.y[idx],
            weights=None if self.weights is None else self.weights[idx],
            z_names=self.z_names, w_names=self.w_names, v_names=self.v_names,
            x_name=self.x_name, y_name=self.y_name,
            extra={k: a[idx] for k, a in self.extra.items()},
        )

    def row_weights(self) -> np.ndarray:
        return np.ones(self.n) if self.weights is None else self.weights

    def column(self, name: str) -> np.ndarray:
        for names, block in ((self.z_names, self.z), (self.w_names, self.w), (self.v_names, self.v)):
            if name in names:
                return block[:, names.index(name)]
        if name == self.x_name:
            return self.x.astype(float)
        if name == self.y_name:
            return self.y
        if name in self.extra:
            return np.asarray(self.extra[name], float)
        raise CohortError(f"unknown column {name!r}")

    @property
    def columns(self) -> list[str]:
        return [*self.z_names, self.x_name, *self.w_names, *self.v_names, self.y_name, *self.extra]

    def to_frame(self) -> pd.DataFrame:
        data: dict[str, np.ndarray] = {}
        for names, block in ((self.z_names, self.z),):
            data.update({nm: block[:, i] for i, nm in enumerate(names)})
        data[self.x_name] = self.x
        data.update({nm: self.w[:, i] for i, nm in enumerate(self.w_names)})
        data.update({nm: self.v[:, i] for i, nm in enumerate(self.v_names)})
        data[self.y_name] = self.y
        data.update(self.extra)
        if self.weights is not None:
            data["_weight"] = self.weights
        return pd.DataFrame(data)

    def schema(self) -> "RoleSchema":
        return RoleSchema(
            x=self.x_name, y=self.y_name, z=list(self.z_names), w=list(self.w_names),
            v=list(self.v_names), extra=list(self.extra),
        )

    def identical(self, other: "Cohort") -> bool:
        """Byte-level equality of every role array and the column naming."""
        same = (
            self.columns == other.columns
            and all(
                a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()
                for a, b in zip((self.z, self.x, self.w, self.v, self.y), (other.z, other.x, other.w, other.v, other.y))
            )
        )
        if not same:
            return False
        if (self.weights is None) != (other.weights is None):
            return False
        if self.weights is not None and self.weights.tobytes() != other.weights.tobytes():
            return False
        return all(
            np.asarray(self.extra[k]).tobytes() == np.asarray(other.extra[k]).tobytes() for k in self.extra
        )


# ---------------------------------------------------------------------------
# schema + CSV


@dataclass
class RoleSchema:
    x: str
    y: str
    z: list[str]
    w: list[str]
    v: list[str]
    x0_label: str | None = None
    x1_label: str | None = None
    delta: dict[str, str] | None = None  # {"spo2": col, "sao2": col, "name": "delta"}
    extra: list[str] = field(default_factory=list)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RoleSchema":
        known = {"x", "y", "z", "w", "v", "x0_label", "x1_label", "delta", "extra"}
        unknown = set(d) - known
        if unknown:
            raise CohortError(f"unknown schema fields: {sorted(unknown)}")
        return cls(
            x=d["x"], y=d["y"], z=list(d.get("z", [])), w=list(d.get("w", [])), v=list(d.get("v", [])),
            x0_label=d.get("x0_label"), x1_label=d.get("x1_label"), delta=d.get("delta"),
            extra=list(d.get("extra", [])),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "x": self.x, "y": self.y, "z": list(self.z), "w": list(self.w), "v": list(self.v),
            "x0_label": self.x0_label, "x1_label": self.x1_label, "delta": self.delta,
            "extra": list(self.extra),
        }

    @property
    def delta_name(self) -> str | None:
        return None if self.delta is None else self.delta.get("name", "delta")

    def validate(self, available: Sequence[str]) -> None:
        problems = []
        roles = [[self.x], [self.y], self.z, self.w, self.v, self.extra]
        flat = [c for r in roles for c in r]
        if len(flat) != len(set(flat)):
            problems.append("role column lists overlap")
        if not self.z or not self.w or not (self.v or self.delta):
            problems.append("z, w and v roles must each name at least one column")
        if (self.x0_label is None) != (self.x1_label is None):
            problems.append("x0_label and x1_label must be given together")
        needed = [c for c in flat if c != self.delta_name]
        if self.delta is not None:
            needed += [self.delta["spo2"], self.delta["sao2"]]
        missing = sorted({c for c in needed if c not in available})
        if missing:
            problems.append(f"columns not present: {missing}")
        if problems:
            raise CohortError("; ".join(problems))


def _numeric(series: pd.Series) -> np.ndarray:
    """Parse to float; unparseable cells become NaN.

    ``astype(float)`` round-trips ``repr`` output exactly, which the fast
    parser behind ``pd.to_numeric`` does not, so it is tried first.
    """
    try:
        return series.astype(float).to_numpy()
    except (TypeError, ValueError):
        return np.array([_to_float(v) for v in series], dtype=float)


def _to_float(v) -> float:
    try:
        return float(v)
    except (TypeError, ValueError):
        return math.nan


def from_frame(df: pd.DataFrame, schema: RoleSchema) -> Cohort:
    """Type a raw frame by ``schema``; rows missing a required field are dropped."""
    schema.validate(list(df.columns))
    raw_x = df[schema.x]
    if schema.x0_label is not None:
        labels = raw_x.astype(str).str.strip()
        x = np.full(len(df), np.nan)
        x[(labels == str(schema.x0_label)).to_numpy()] = 0.0
        x[(labels == str(schema.x1_label)).to_numpy()] = 1.0
        bad = raw_x.notna().to_numpy() & np.isnan(x)
        if bad.any():
            seen = sorted(set(labels[bad]))
            raise CohortError(f"exposure labels outside {{{schema.x0_label}, {schema.x1_label}}}: {seen}")
    else:
        x = _numeric(raw_x)
        if np.any(~np.isnan(x) & ~np.isin(x, (0.0, 1.0))):
            raise CohortError("exposure column is not binary 0/1")

    cols: dict[str, np.ndarray] = {c: _numeric(df[c]) for c in [*schema.z, *schema.w, *schema.v, schema.y]}
    v_names = list(schema.v)
    if schema.delta is not None:
        name = schema.delta_name
        cols[name] = _numeric(df[schema.delta["spo2"]]) - _numeric(df[schema.delta["sao2"]])
        if name not in v_names:
            v_names.append(name)
    required = {c: cols[c] for c in [*schema.z, *schema.w, *v_names, schema.y]}
    required[schema.x] = x
    keep = np.ones(len(df), bool)
    dropped_by: dict[str, int] = {}
    for c, a in required.items():
        miss = np.isnan(a)
        dropped_by[c] = int(miss.sum())
        keep &= ~miss
    if not keep.any():
        raise CohortError("cohort is empty after dropping rows with missing required fields")

    def block(names):
        return np.column_stack([cols[c][keep] for c in names]) if names else np.zeros((int(keep.sum()), 0))

    extra = {c: _numeric(df[c])[keep] for c in schema.extra}
    return Cohort(
        z=block(schema.z), x=x[keep].astype(np.int64), w=block(schema.w), v=block(v_names), y=cols[schema.y][keep],
        z_names=tuple(schema.z), w_names=tuple(schema.w), v_names=tuple(v_names),
        x_name=schema.x, y_name=schema.y, extra=extra,
        meta={"rows_read": int(len(df)), "dropped": int((~keep).sum()), "missing_by_column": dropped_by},
    )


def load_csv(path: str | Path, schema: RoleSchema) -> Cohort:
    df = pd.read_csv(path, dtype=str, keep_default_na=True)
    return from_frame(df, schema)


def write_csv(cohort: Cohort, path: str | Path) -> None:
    """Write with ``repr`` floats so that :func:`load_csv` reads the same bits back."""
    frame = cohort.to_frame()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(frame.columns)
        ints = {cohort.x_name}
        for row in zip(*(frame[c].to_numpy() for c in frame.columns)):
            writer.writerow(
                [str(int(val)) if c in ints else repr(float(val)) for c, val in zip(frame.columns, row)]
            )


# ---------------------------------------------------------------------------
# trajectories


@dataclass(frozen=True)
class EventSeries:
    """Readings of one channel for one stay; ``times`` are minutes before the anchor."""

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, float).reshape(-1)
        v = np.asarray(self.values, float).reshape(-1)
        if t.shape != v.shape:
            raise CohortError("times and values must have equal length")
        if np.any(t < 0) or not np.all(np.isfinite(t)) or not np.all(np.isfinite(v)):
            raise CohortError("event times must be finite and >= 0, values finite")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return len(self.times)


def ewa_aggregate(series: EventSeries, gamma: float = 0.01) -> float:
    """Exponentially weighted average, weights exp(-gamma * minutes_before)."""
    if len(series) == 0:
        raise CohortError("cannot aggregate an empty series")
    if gamma < 0:
        raise CohortError("gamma must be non-negative")
    # shift by the most recent reading; the common factor cancels
    wts = np.exp(-gamma * (series.times - series.times.min()))
    return float(np.sum(wts * series.values) / np.sum(wts))


def match_discrepancy(spo2: EventSeries, sao2: EventSeries, window_minutes: float = 5.0) -> EventSeries:
    """Pair SpO2 readings with a later SaO2 reading and return SpO2 - SaO2.

    An SpO2 reading at ``t`` minutes before the anchor pairs with the earliest
    unused SaO2 reading ``s`` with ``t - window <= s < t``.  SpO2 readings are
    visited in chronological order, so earlier ones win contested SaO2 readings.
    """
    if window_minutes <= 0:
        raise CohortError("window must be positive")
    used = np.zeros(len(sao2), bool)
    out_t, out_v = [], []
    for i in np.argsort(-spo2.times, kind="stable"):
        t = spo2.times[i]
        ok = ~used & (sao2.times < t) & (sao2.times >= t - window_minutes)
        if not ok.any():
            continue
        cand = np.flatnonzero(ok)
        j = cand[np.argmax(sao2.times[cand])]
        used[j] = True
        out_t.append(t)
        out_v.append(spo2.values[i] - sao2.values[j])
    return EventSeries(np.asarray(out_t, float), np.asarray(out_v, float))


def aggregate_events(
    events: pd.DataFrame,
    gamma: float = 0.01,
    spo2_channel: str | None = "spo2",
    sao2_channel: str | None = "sao2",
    delta_channel: str = "delta",
    window_minutes: float = 5.0,
    value_ranges: Mapping[str, tuple[float, float]] | None = None,
    id_column: str = "stay_id",
    channel_column: str = "channel",
    time_column: str = "minutes_before",
    value_column: str = "value",
) -> pd.DataFrame:
    """Collapse long-format readings into one EWA value per (stay, channel).

    Readings outside ``value_ranges`` are discarded before aggregation.  When
    both oximetry channels are present a matched-discrepancy channel is added.
    """
    ranges = dict(value_ranges or {})
    ev = events[[id_column, channel_column, time_column, value_column]].copy()
    ev[time_column] = pd.to_numeric(ev[time_column], errors="coerce")
    ev[value_column] = pd.to_numeric(ev[value_column], errors="coerce")
    ev = ev.dropna()
    for ch, (lo, hi) in ranges.items():
        sel = ev[channel_column] == ch
        ev = ev[~sel | ev[value_column].between(lo, hi)]
    rows: dict[Any, dict[str, float]] = {}
    for (stay, ch), grp in ev.groupby([id_column, channel_column], sort=True):
        series = EventSeries(grp[time_column].to_numpy(), grp[value_column].to_numpy())
        rows.setdefault(stay, {})[ch] = ewa_aggregate(series, gamma)
    if spo2_channel and sao2_channel:
        for stay, grp in ev.groupby(id_column, sort=True):
            s1 = grp[grp[channel_column] == spo2_channel]
            s2 = grp[grp[channel_column] == sao2_channel]
            d = match_discrepancy(
                EventSeries(s1[time_column].to_numpy(), s1[value_column].to_numpy()),
                EventSeries(s2[time_column].to_numpy(), s2[value_column].to_numpy()),
                window_minutes,
            )
            rows.setdefault(stay, {})[delta_channel] = ewa_aggregate(d, gamma) if len(d) else math.nan
    out = pd.DataFrame.from_dict(rows, orient="index")
    out.index.name = id_column
    return out.reset_index()


# ---------------------------------------------------------------------------
# filters


@dataclass
class FilterRules:
    min_stay_hours: float | None = None
    stay_column: str = "stay_hours"
    required: list[str] = field(default_factory=list)
    ranges: dict[str, tuple[float, float]] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "FilterRules":
        return cls(
            min_stay_hours=d.get("min_stay_hours"),
            stay_column=d.get("stay_column", "stay_hours"),
            required=list(d.get("required", [])),
            ranges={k: (float(v[0]), float(v[1])) for k, v in d.get("ranges", {}).items()},
        )


def _rule_masks(getter, n: int, rules: FilterRules) -> list[tuple[str, np.ndarray]]:
    masks = []
    if rules.min_stay_hours is not None:
        stay = getter(rules.stay_column)
        masks.append((f"{rules.stay_column}>={rules.min_stay_hours}", stay >= rules.min_stay_hours))
    for col in rules.required:
        masks.append((f"{col} present", ~np.isnan(getter(col))))
    for col, (lo, hi) in rules.ranges.items():
        a = getter(col)
        masks.append((f"{col} in [{float(lo)}, {float(hi)}]", (a >= lo) & (a <= hi)))
    return masks


def _apply_rules(getter, n: int, rules: FilterRules) -> tuple[np.ndarray, dict[str, int]]:
    keep = np.ones(n, bool)
    report: dict[str, int] = {}
    for label, mask in _rule_masks(getter, n, rules):
        report[label] = int((keep & ~mask).sum())
        keep &= mask
    if not keep.any():
        raise CohortError(f"filter rules exclude every row: {report}")
    return keep, report


def filter_frame(df: pd.DataFrame, rules: FilterRules) -> tuple[pd.DataFrame, dict[str, int]]:
    def getter(c):
        if c not in df.columns:
            raise CohortError(f"filter references unknown column {c!r}")
        return _numeric(df[c])

    keep, report = _apply_rules(getter, len(df), rules)
    return df[keep].reset_index(drop=True), report


def filter_cohort(cohort: Cohort, rules: FilterRules) -> Cohort:
    """Apply rules in order; per-rule exclusion counts land in ``meta``."""
    keep, report = _apply_rules(cohort.column, cohort.n, rules)
    out = cohort.take(np.flatnonzero(keep))
    return Cohort(
        **{f.name: getattr(out, f.name) for f in out.__dataclass_fields__.values() if f.name != "meta"},
        meta={**dict(cohort.meta), "excluded": report, "kept": int(keep.sum())},
    )
