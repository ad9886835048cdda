"""Aligned multi-series panel container and its delimited-text file format.

Panels hold regularly spaced observations of several series on the working
(log) scale, optional exogenous forecast columns, and a dated schedule of
upper bounds (the price cap changes over time).  The on-disk format is long:
one row per (timestamp, series) with a header, nominal prices and any
exogenous columns.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from .exceptions import PanelLoadError
from .margins import PriceTransform, inverse_transform_price, transform_price

__all__ = ["PanelSchema", "TimeSeriesPanel", "load_panel", "save_panel"]


@dataclass(frozen=True)
class PanelSchema:
    """How to read a delimited panel file."""

    timestamp_col: str = "timestamp"
    series_col: str = "series_id"
    price_col: str = "price"
    exogenous: tuple[str, ...] = ()
    spacing_minutes: int = 30
    shift: float = 1001.0
    floor_price: float = -1000.0
    cap_schedule: tuple[tuple[str, float], ...] = (("1970-01-01", 14500.0),)
    cap_includes_shift: bool = True
    forward_exogenous: tuple[str, ...] | None = None  # None = all exogenous


@dataclass(eq=False)
class TimeSeriesPanel:
    """Aligned panel of working-scale values plus exogenous columns.

    ``values`` is (T, n_series); ``upper_y_schedule`` holds (effective
    timestamp, upper bound) pairs sorted by date.  ``forward_columns`` names
    the exogenous columns that are genuine forward forecasts and therefore
    legitimately readable at target time during simulation.
    """

    timestamps: np.ndarray
    series_ids: tuple[str, ...]
    values: np.ndarray
    transform: PriceTransform
    lower_y: float
    upper_y_schedule: tuple[tuple[np.datetime64, float], ...]
    exogenous: dict[str, np.ndarray] = field(default_factory=dict)
    forward_columns: tuple[str, ...] = ()

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype="datetime64[ns]")
        self.values = np.asarray(self.values, dtype=float)
        T = self.timestamps.size
        if self.values.shape != (T, len(self.series_ids)):
            raise PanelLoadError(
                f"values shape {self.values.shape} does not match "
                f"{T} timestamps x {len(self.series_ids)} series"
            )
        if T >= 2:
            gaps = np.diff(self.timestamps)
            if not np.all(gaps == gaps[0]):
                bad = int(np.nonzero(gaps != gaps[0])[0][0])
                raise PanelLoadError(
                    f"irregular spacing at {self.timestamps[bad + 1]}"
                )
            if gaps[0] <= np.timedelta64(0, "ns"):
                raise PanelLoadError("timestamps must be strictly increasing")
        if not np.isfinite(self.values).all():
            raise PanelLoadError("panel values contain non-finite entries")
        for name, col in self.exogenous.items():
            if np.asarray(col).shape != (T,):
                raise PanelLoadError(f"exogenous column {name!r} has wrong length")
        if not self.upper_y_schedule:
            raise PanelLoadError("upper_y_schedule must have at least one entry")

    @property
    def T(self) -> int:
        return self.timestamps.size

    @property
    def spacing(self) -> np.timedelta64:
        if self.T < 2:
            return np.timedelta64(30, "m")
        return self.timestamps[1] - self.timestamps[0]

    def timestamp_at(self, i: int) -> np.datetime64:
        """Timestamp of row i, extrapolating past the end for horizon steps."""
        if 0 <= i < self.T:
            return self.timestamps[i]
        return self.timestamps[0] + i * self.spacing

    def index_of(self, ts) -> int:
        ts = np.datetime64(ts)
        idx = int(np.searchsorted(self.timestamps, ts))
        if idx >= self.T or self.timestamps[idx] != ts:
            raise KeyError(f"timestamp {ts} not in panel")
        return idx

    def series_index(self, series_id: str) -> int:
        return self.series_ids.index(series_id)

    def upper_y_at(self, i: int) -> float:
        ts = self.timestamp_at(i)
        bound = self.upper_y_schedule[0][1]
        for effective, value in self.upper_y_schedule:
            if effective <= ts:
                bound = value
        return bound

    def bounds_at(self, i: int) -> tuple[float, float]:
        return self.lower_y, self.upper_y_at(i)

    def with_exogenous(self, columns: dict, forward: bool = True) -> "TimeSeriesPanel":
        exog = dict(self.exogenous)
        exog.update({k: np.asarray(v, dtype=float) for k, v in columns.items()})
        fwd = set(self.forward_columns)
        if forward:
            fwd.update(columns.keys())
        return replace(
            self, exogenous=exog, forward_columns=tuple(sorted(fwd))
        )


def load_panel(path, schema: PanelSchema = PanelSchema()) -> TimeSeriesPanel:
    """Read a long-format delimited panel file and pivot it to a panel.

    Prices are mapped to the working scale on load.  Gaps, duplicate keys
    and unparseable rows raise with the offending row or timestamp named.
    """
    try:
        df = pd.read_csv(path)
    except Exception as exc:
        raise PanelLoadError(f"cannot parse {path}: {exc}") from exc
    needed = [schema.timestamp_col, schema.series_col, schema.price_col]
    missing = [c for c in needed if c not in df.columns]
    if missing:
        raise PanelLoadError(f"missing required columns: {missing}")
    try:
        df[schema.timestamp_col] = pd.to_datetime(df[schema.timestamp_col])
    except Exception as exc:
        raise PanelLoadError(f"unparseable timestamps: {exc}") from exc
    bad_price = df.index[~np.isfinite(pd.to_numeric(df[schema.price_col],
                                                    errors="coerce"))]
    if len(bad_price):
        raise PanelLoadError(
            f"unparseable or missing prices at file rows {list(bad_price[:10] + 2)}"
        )

    dupes = df.duplicated(subset=[schema.timestamp_col, schema.series_col])
    if dupes.any():
        rows = list(df.index[dupes][:10] + 2)  # 1-based with header line
        raise PanelLoadError(f"duplicate (timestamp, series) keys at file rows {rows}")

    wide = df.pivot(
        index=schema.timestamp_col, columns=schema.series_col,
        values=schema.price_col,
    ).sort_index()
    if wide.isna().any().any():
        ts = wide.index[wide.isna().any(axis=1)][0]
        raise PanelLoadError(f"missing observation at {ts}")

    timestamps = wide.index.to_numpy(dtype="datetime64[ns]")
    spacing = np.timedelta64(schema.spacing_minutes, "m")
    if timestamps.size >= 2:
        gaps = np.diff(timestamps)
        off = gaps != spacing
        if off.any():
            k = int(np.nonzero(off)[0][0])
            if gaps[k] % spacing == 0 and gaps[k] > spacing:
                missing_ts = timestamps[k] + spacing
                raise PanelLoadError(f"gap in panel: missing {missing_ts}")
            raise PanelLoadError(
                f"irregular spacing between {timestamps[k]} and {timestamps[k + 1]}"
            )

    transform = PriceTransform(
        shift=schema.shift,
        lower_price=schema.floor_price,
        upper_price=schema.cap_schedule[-1][1],
        cap_includes_shift=schema.cap_includes_shift,
    )
    values = transform_price(wide.to_numpy(dtype=float), transform)

    exog_names = tuple(schema.exogenous) or tuple(
        c for c in df.columns if c not in needed
    )
    exogenous = {}
    for name in exog_names:
        if name not in df.columns:
            raise PanelLoadError(f"declared exogenous column {name!r} not in file")
        col = df.pivot(
            index=schema.timestamp_col, columns=schema.series_col, values=name
        ).sort_index()
        first = col.bfill(axis=1).iloc[:, 0]
        spread = (col.sub(first, axis=0).abs().max(skipna=True)).max()
        if np.isfinite(spread) and spread > 1e-9:
            raise PanelLoadError(
                f"exogenous column {name!r} differs across series at a timestamp"
            )
        if first.isna().any():
            ts = first.index[first.isna()][0]
            raise PanelLoadError(f"exogenous column {name!r} missing at {ts}")
        exogenous[name] = first.to_numpy(dtype=float)

    schedule = tuple(
        (np.datetime64(date), transform.y_for_cap(cap))
        for date, cap in schema.cap_schedule
    )
    forward = (
        exog_names if schema.forward_exogenous is None
        else tuple(schema.forward_exogenous)
    )
    return TimeSeriesPanel(
        timestamps=timestamps,
        series_ids=tuple(wide.columns),
        values=values,
        transform=transform,
        lower_y=transform.lower_y,
        upper_y_schedule=schedule,
        exogenous=exogenous,
        forward_columns=forward,
    )


def save_panel(panel: TimeSeriesPanel, path) -> None:
    """Write the long-format file ``load_panel`` reads (prices, not logs)."""
    frames = []
    for j, sid in enumerate(panel.series_ids):
        frame = pd.DataFrame(
            {
                "timestamp": panel.timestamps,
                "series_id": sid,
                "price": inverse_transform_price(panel.values[:, j],
                                                 panel.transform),
            }
        )
        for name, col in panel.exogenous.items():
            frame[name] = col
        frames.append(frame)
    out = pd.concat(frames, ignore_index=True)
    out.sort_values(["timestamp", "series_id"], inplace=True)
    out.to_csv(path, index=False)
