"""Preprocessing pipeline: resampling, cleaning, interpolation, splits, windows.

Stage order used by the toolkit:

    resample_5min -> remove_spikes -> remove_incomplete_days
        -> pchip_interpolate -> split_days -> fit/apply scaler -> build_windows

Spike removal runs on the resampled grid, before interpolation, so that
gaps opened by removed spikes count toward the incomplete-day rule.
Interpolation is strictly per-day; removed days are never bridged.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

from .data_model import (
    STEP,
    STEP_MINUTES,
    EventKind,
    PatientRecord,
    UniformSeries,
)
from .errors import (
    ContractError,
    DegenerateScaleError,
    EmptyDatasetError,
    InsufficientDataError,
    InterpolationError,
    ParseError,
)

CHANNELS = ("glucose", "cho", "insulin")

DEFAULT_SPIKE_THRESHOLD = 40.0  # mg/dL; far above physiological 5-min excursions
MAX_INTRADAY_GAP_MINUTES = 30
EDGE_COVERAGE_MINUTES = 60  # a retained day needs readings in its first and last hour


@dataclass(frozen=True)
class SplitSpec:
    """Chronological whole-day split fractions."""

    train_fraction: float = 0.50
    valid_fraction: float = 0.25
    test_fraction: float = 0.25
    seed: int = 0

    def __post_init__(self):
        total = self.train_fraction + self.valid_fraction + self.test_fraction
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {total}")


@dataclass(frozen=True)
class Scaler:
    """Per-channel population mean/std, fitted on training days only."""

    mean: np.ndarray  # shape (3,) in CHANNELS order
    std: np.ndarray   # shape (3,), all > 0

    @property
    def glucose_mean(self) -> float:
        return float(self.mean[0])

    @property
    def glucose_std(self) -> float:
        return float(self.std[0])


@dataclass(frozen=True)
class WindowConfig:
    """History length H and prediction horizon PH, in 5-minute steps."""

    history_steps: int = 36   # 3 hours
    horizon_steps: int = 6    # 30 minutes

    def __post_init__(self):
        if self.history_steps < 2:
            raise ValueError("history_steps must be >= 2")
        if self.horizon_steps < 2:
            raise ValueError("horizon_steps must be >= 2 (two-output target)")


@dataclass(frozen=True)
class SampleWindow:
    """One sample: H x 3 standardized history plus the two targets."""

    features: np.ndarray      # (H, 3): glucose, cho, insulin
    target_prev: float        # standardized glucose at t + PH - 1
    target_final: float       # standardized glucose at t + PH
    timestamp: datetime       # wall time of history end t
    day_index: int
    segment_id: int


def _floor_to_step(ts: datetime) -> datetime:
    minute = (ts.minute // STEP_MINUTES) * STEP_MINUTES
    return ts.replace(minute=minute, second=0, microsecond=0)


def resample_5min(record: PatientRecord) -> UniformSeries:
    """Snap events to the 5-minute grid: mean glucose, summed cho/insulin."""
    start = _floor_to_step(record.events[0].timestamp)
    end = record.events[-1].timestamp
    n = int((end - start) / STEP) + 1

    glucose_sum = np.zeros(n)
    glucose_cnt = np.zeros(n, dtype=int)
    cho = np.zeros(n)
    insulin = np.zeros(n)
    for e in record.events:
        slot = int((e.timestamp - start) / STEP)
        if e.kind == EventKind.GLUCOSE:
            glucose_sum[slot] += e.value
            glucose_cnt[slot] += 1
        elif e.kind == EventKind.CHO:
            cho[slot] += e.value
        else:
            insulin[slot] += e.value

    glucose = np.full(n, np.nan)
    present = glucose_cnt > 0
    glucose[present] = glucose_sum[present] / glucose_cnt[present]

    first_day = start.date().toordinal()
    day_index = np.array(
        [(start + i * STEP).date().toordinal() - first_day for i in range(n)], dtype=int)

    return UniformSeries(
        start=start,
        glucose=glucose,
        cho=cho,
        insulin=insulin,
        interpolated_mask=np.zeros(n, dtype=bool),
        day_index=day_index,
    )


def remove_spikes(series: UniformSeries, threshold: float = DEFAULT_SPIKE_THRESHOLD) -> UniformSeries:
    """Blank isolated readings that jump by more than `threshold` both ways.

    A reading goes missing when the deviations from its nearest present
    neighbors both exceed the threshold with opposite signs (a one-sided
    excursion that immediately reverts).  Single pass against the
    original values.
    """
    out = series.copy()
    present = np.flatnonzero(~np.isnan(series.glucose))
    g = series.glucose
    for j in range(1, len(present) - 1):
        i_prev, i, i_next = present[j - 1], present[j], present[j + 1]
        step_in = g[i] - g[i_prev]
        step_out = g[i_next] - g[i]
        if abs(step_in) > threshold and abs(step_out) > threshold and step_in * step_out < 0:
            out.glucose[i] = np.nan
    return out


def _day_slot_ranges(series: UniformSeries) -> dict[int, np.ndarray]:
    """Map each non-dropped day id to its slot indices."""
    days: dict[int, np.ndarray] = {}
    for day in series.retained_days():
        days[day] = np.flatnonzero(series.day_index == day)
    return days


def remove_incomplete_days(series: UniformSeries) -> UniformSeries:
    """Drop days with intraday glucose gaps > 30 min or bare first/last hours."""
    out = series.copy()
    gap_slots = MAX_INTRADAY_GAP_MINUTES // STEP_MINUTES
    edge_slots = EDGE_COVERAGE_MINUTES // STEP_MINUTES
    slots_per_day = 24 * 60 // STEP_MINUTES

    kept_any = False
    first_ordinal = series.start.date().toordinal()
    for day, slots in _day_slot_ranges(series).items():
        present = slots[~np.isnan(series.glucose[slots])]
        keep = len(present) >= 2
        if keep:
            # position within the calendar day, in slots since local midnight
            day_start = datetime.fromordinal(first_ordinal + day)
            pos = np.array([(series.slot_time(int(s)) - day_start) / STEP for s in present])
            keep = (
                pos[0] < edge_slots
                and pos[-1] >= slots_per_day - edge_slots
                and np.max(np.diff(pos)) <= gap_slots
            )
        if keep:
            kept_any = True
        else:
            out.glucose[slots] = np.nan
            out.day_index[slots] = -1
    if not kept_any:
        raise EmptyDatasetError("no complete days left after cleaning")
    return out


def pchip_slopes(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Fritsch-Carlson monotone Hermite slopes (harmonic-mean weights)."""
    n = len(x)
    if n < 2:
        raise ContractError("need at least two nodes")
    h = np.diff(x)
    delta = np.diff(y) / h
    d = np.zeros(n)
    if n == 2:
        d[:] = delta[0]
        return d

    for k in range(1, n - 1):
        if delta[k - 1] * delta[k] <= 0.0:
            d[k] = 0.0
        else:
            w1 = 2.0 * h[k] + h[k - 1]
            w2 = h[k] + 2.0 * h[k - 1]
            d[k] = (w1 + w2) / (w1 / delta[k - 1] + w2 / delta[k])

    d[0] = _edge_slope(h[0], h[1], delta[0], delta[1])
    d[-1] = _edge_slope(h[-1], h[-2], delta[-1], delta[-2])
    return d


def _edge_slope(h0: float, h1: float, d0: float, d1: float) -> float:
    """Shape-preserving one-sided three-point endpoint derivative."""
    slope = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1)
    if np.sign(slope) != np.sign(d0):
        return 0.0
    if np.sign(d0) != np.sign(d1) and abs(slope) > 3.0 * abs(d0):
        return 3.0 * d0
    return slope


def pchip_eval(x: np.ndarray, y: np.ndarray, d: np.ndarray, xq: np.ndarray) -> np.ndarray:
    """Evaluate the cubic Hermite interpolant at query points inside [x0, xn]."""
    idx = np.clip(np.searchsorted(x, xq, side="right") - 1, 0, len(x) - 2)
    h = x[idx + 1] - x[idx]
    u = (xq - x[idx]) / h
    h00 = (1.0 + 2.0 * u) * (1.0 - u) ** 2
    h10 = u * (1.0 - u) ** 2
    h01 = u * u * (3.0 - 2.0 * u)
    h11 = u * u * (u - 1.0)
    return h00 * y[idx] + h10 * h * d[idx] + h01 * y[idx + 1] + h11 * h * d[idx + 1]


def pchip_interpolate(series: UniformSeries) -> UniformSeries:
    """Fill missing glucose inside each retained day's covered span.

    No extrapolation: slots before a day's first present reading or after
    its last stay missing, and windows touching them are dropped later.
    """
    out = series.copy()
    for day, slots in _day_slot_ranges(series).items():
        values = series.glucose[slots]
        present = np.flatnonzero(~np.isnan(values))
        if len(present) < 2:
            raise InterpolationError(f"day {day}: fewer than 2 glucose readings")
        missing = np.flatnonzero(np.isnan(values))
        missing = missing[(missing > present[0]) & (missing < present[-1])]
        if len(missing) == 0:
            continue
        d = pchip_slopes(present.astype(float), values[present])
        filled = pchip_eval(present.astype(float), values[present], d, missing.astype(float))
        out.glucose[slots[missing]] = filled
        out.interpolated_mask[slots[missing]] = True
    return out


def split_days(series: UniformSeries, spec: SplitSpec = SplitSpec()) -> tuple[list[int], list[int], list[int]]:
    """Assign whole days chronologically: first 50% train, next 25% valid, rest test."""
    days = series.retained_days()
    if len(days) < 4:
        raise InsufficientDataError(f"need >= 4 retained days, have {len(days)}")
    n = len(days)
    n_train = int(np.floor(spec.train_fraction * n))
    n_valid = int(np.floor(spec.valid_fraction * n))
    train = days[:n_train]
    valid = days[n_train:n_train + n_valid]
    test = days[n_train + n_valid:]
    return train, valid, test


def fit_scaler(series: UniformSeries, train_days: list[int]) -> Scaler:
    """Population mean/std per channel over training-day slots."""
    if not train_days:
        raise ContractError("train day set is empty")
    mask = np.isin(series.day_index, train_days)
    mean = np.empty(3)
    std = np.empty(3)
    for c, name in enumerate(CHANNELS):
        values = getattr(series, name)[mask]
        values = values[~np.isnan(values)]
        mean[c] = np.mean(values)
        std[c] = np.std(values)  # population (ddof=0)
        if std[c] < 1e-12:
            raise DegenerateScaleError(f"channel {name} is constant on training days")
    return Scaler(mean=mean, std=std)


def apply_scaler(series: UniformSeries, scaler: Scaler) -> UniformSeries:
    """Standardize all channels; missing glucose stays missing."""
    out = series.copy()
    out.glucose = (out.glucose - scaler.mean[0]) / scaler.std[0]
    out.cho = (out.cho - scaler.mean[1]) / scaler.std[1]
    out.insulin = (out.insulin - scaler.mean[2]) / scaler.std[2]
    return out


def invert_scaler(values: np.ndarray | float, scaler: Scaler) -> np.ndarray | float:
    """Map standardized glucose back to mg/dL (exact right inverse)."""
    return values * scaler.std[0] + scaler.mean[0]


def build_windows(series: UniformSeries, config: WindowConfig,
                  day_set: list[int]) -> list[SampleWindow]:
    """Slide windows within each day's covered span; never straddle days.

    A window at history end t needs slots [t-H+1, t] and both target slots
    [t+PH-1, t+PH] present inside one day's contiguous covered span.
    Windows with consecutive prediction slots share a segment id.
    """
    H, PH = config.history_steps, config.horizon_steps
    windows: list[SampleWindow] = []
    segment = -1
    last_pred_slot = None
    for day in sorted(day_set):
        slots = np.flatnonzero(series.day_index == day)
        if len(slots) == 0:
            continue
        present = slots[~np.isnan(series.glucose[slots])]
        if len(present) == 0:
            continue
        lo, hi = int(present[0]), int(present[-1])
        for t in range(lo + H - 1, hi - PH + 1):
            pred_slot = t + PH
            if last_pred_slot is None or pred_slot != last_pred_slot + 1:
                segment += 1
            last_pred_slot = pred_slot
            feats = np.column_stack((
                series.glucose[t - H + 1:t + 1],
                series.cho[t - H + 1:t + 1],
                series.insulin[t - H + 1:t + 1],
            ))
            windows.append(SampleWindow(
                features=feats,
                target_prev=float(series.glucose[t + PH - 1]),
                target_final=float(series.glucose[t + PH]),
                timestamp=series.slot_time(t),
                day_index=day,
                segment_id=segment,
            ))
    return windows


@dataclass
class PreprocessedPatient:
    """Cleaned, interpolated series in physical units plus the day split."""

    patient_id: str
    series: UniformSeries
    train_days: list[int]
    valid_days: list[int]
    test_days: list[int]

    def split_of(self, day: int) -> str:
        if day in self.train_days:
            return "train"
        if day in self.valid_days:
            return "valid"
        if day in self.test_days:
            return "test"
        return "excluded"


def preprocess_record(record: PatientRecord, split: SplitSpec = SplitSpec(),
                      spike_threshold: float = DEFAULT_SPIKE_THRESHOLD) -> PreprocessedPatient:
    """Run the full cleaning pipeline on one patient record."""
    series = resample_5min(record)
    series = remove_spikes(series, spike_threshold)
    series = remove_incomplete_days(series)
    series = pchip_interpolate(series)
    train, valid, test = split_days(series, split)
    return PreprocessedPatient(record.patient_id, series, train, valid, test)


@dataclass
class WindowedPatient:
    """Standardized windows per split plus the scaler that produced them."""

    patient_id: str
    scaler: Scaler
    train: list[SampleWindow]
    valid: list[SampleWindow]
    test: list[SampleWindow]


def standardize_and_window(pre: PreprocessedPatient,
                           config: WindowConfig = WindowConfig()) -> WindowedPatient:
    """Fit the scaler on training days, standardize, and build all windows."""
    scaler = fit_scaler(pre.series, pre.train_days)
    scaled = apply_scaler(pre.series, scaler)
    return WindowedPatient(
        patient_id=pre.patient_id,
        scaler=scaler,
        train=build_windows(scaled, config, pre.train_days),
        valid=build_windows(scaled, config, pre.valid_days),
        test=build_windows(scaled, config, pre.test_days),
    )


_EXPORT_HEADER = ["datetime", "glucose", "cho", "insulin", "interpolated", "day_index", "split"]


def export_preprocessed_csv(pre: PreprocessedPatient, path: str | Path) -> None:
    """Write the per-slot preprocessed series (physical units) with split labels."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    s = pre.series
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(_EXPORT_HEADER)
        for i in range(len(s)):
            day = int(s.day_index[i])
            glucose = "" if np.isnan(s.glucose[i]) else repr(float(s.glucose[i]))
            writer.writerow([
                s.slot_time(i).isoformat(sep="T", timespec="seconds"),
                glucose,
                repr(float(s.cho[i])),
                repr(float(s.insulin[i])),
                int(s.interpolated_mask[i]),
                day,
                pre.split_of(day) if day >= 0 else "excluded",
            ])


def load_preprocessed_csv(path: str | Path, patient_id: str | None = None) -> PreprocessedPatient:
    """Reconstruct a PreprocessedPatient from its exported CSV."""
    path = Path(path)
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != _EXPORT_HEADER:
            raise ParseError(f"unexpected header {header!r}", line=1)
        for line, row in enumerate(reader, start=2):
            if len(row) != len(_EXPORT_HEADER):
                raise ParseError(f"expected {len(_EXPORT_HEADER)} fields", line=line)
            rows.append(row)
    if not rows:
        raise ParseError("no data rows", line=2)

    start = datetime.fromisoformat(rows[0][0])
    n = len(rows)
    glucose = np.full(n, np.nan)
    cho = np.zeros(n)
    insulin = np.zeros(n)
    interp = np.zeros(n, dtype=bool)
    day_index = np.zeros(n, dtype=int)
    split_by_day: dict[int, str] = {}
    for i, row in enumerate(rows):
        if row[1] != "":
            glucose[i] = float(row[1])
        cho[i] = float(row[2])
        insulin[i] = float(row[3])
        interp[i] = row[4] == "1"
        day_index[i] = int(row[5])
        if day_index[i] >= 0:
            split_by_day[int(day_index[i])] = row[6]

    series = UniformSeries(start=start, glucose=glucose, cho=cho, insulin=insulin,
                           interpolated_mask=interp, day_index=day_index)
    days = sorted(split_by_day)
    return PreprocessedPatient(
        patient_id=patient_id or path.stem,
        series=series,
        train_days=[d for d in days if split_by_day[d] == "train"],
        valid_days=[d for d in days if split_by_day[d] == "valid"],
        test_days=[d for d in days if split_by_day[d] == "test"],
    )
