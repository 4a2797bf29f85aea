"""Raw and grid-aligned patient data representations plus CSV ingestion.

The raw interchange format is a per-patient CSV with header
``datetime,type,value``: ISO-8601 timestamps (second resolution,
timezone-naive local clock), a channel name in {glucose, cho, insulin},
and a decimal value (mg/dL, grams, or units respectively).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from datetime import datetime, timedelta
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import EmptyInputError, ParseError, ValidationError

GLUCOSE_MAX_MGDL = 600.0  # CGM sensors saturate well below this engineering bound
STEP_MINUTES = 5
STEP = timedelta(minutes=STEP_MINUTES)


class EventKind(str, Enum):
    GLUCOSE = "glucose"
    CHO = "cho"
    INSULIN = "insulin"


class DiabetesType(str, Enum):
    TYPE1 = "type1"
    TYPE2 = "type2"
    SYNTHETIC = "synthetic"


@dataclass(frozen=True)
class RawEvent:
    """One timestamped observation: a glucose reading, a meal, or a bolus."""

    timestamp: datetime
    kind: EventKind
    value: float


@dataclass(frozen=True)
class PatientRecord:
    """All raw events for one monitored subject, sorted by timestamp."""

    patient_id: str
    diabetes_type: DiabetesType
    events: tuple[RawEvent, ...]
    warnings: tuple[str, ...] = ()

    def events_of(self, kind: EventKind) -> list[RawEvent]:
        return [e for e in self.events if e.kind == kind]


@dataclass
class UniformSeries:
    """Multichannel series on a 5-minute grid.

    ``glucose`` uses NaN for missing slots; ``cho`` and ``insulin`` are
    per-slot sums (0 when no event fell in the slot).  ``day_index`` holds
    a stable calendar-day identifier per slot, with -1 marking slots of
    days that were dropped during cleaning.
    """

    start: datetime
    glucose: np.ndarray
    cho: np.ndarray
    insulin: np.ndarray
    interpolated_mask: np.ndarray
    day_index: np.ndarray
    step_minutes: int = STEP_MINUTES

    def __post_init__(self):
        n = len(self.glucose)
        if not (len(self.cho) == len(self.insulin) == len(self.interpolated_mask) == len(self.day_index) == n):
            raise ValidationError("all channel sequences must have equal length")

    def __len__(self) -> int:
        return len(self.glucose)

    def slot_time(self, i: int) -> datetime:
        return self.start + i * STEP

    def retained_days(self) -> list[int]:
        """Sorted identifiers of days that survived cleaning."""
        days = np.unique(self.day_index)
        return [int(d) for d in days if d >= 0]

    def copy(self) -> "UniformSeries":
        return UniformSeries(
            start=self.start,
            glucose=self.glucose.copy(),
            cho=self.cho.copy(),
            insulin=self.insulin.copy(),
            interpolated_mask=self.interpolated_mask.copy(),
            day_index=self.day_index.copy(),
            step_minutes=self.step_minutes,
        )


_HEADER = ["datetime", "type", "value"]


def _parse_timestamp(text: str, line: int) -> datetime:
    try:
        ts = datetime.fromisoformat(text.strip())
    except ValueError:
        raise ParseError(f"bad datetime {text!r}", line=line) from None
    if ts.tzinfo is not None:
        ts = ts.replace(tzinfo=None)
    return ts


def ingest_csv(path: str | Path, patient_id: str | None = None,
               diabetes_type: DiabetesType = DiabetesType.SYNTHETIC) -> PatientRecord:
    """Read a raw patient CSV into a PatientRecord, sorting events by time."""
    path = Path(path)
    events: list[RawEvent] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyInputError(f"{path}: empty file") from None
        if [h.strip() for h in header] != _HEADER:
            raise ParseError(f"expected header {','.join(_HEADER)!r}, got {','.join(header)!r}", line=1)
        for line, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 3:
                raise ParseError(f"expected 3 fields, got {len(row)}", line=line)
            ts = _parse_timestamp(row[0], line)
            kind_text = row[1].strip()
            try:
                kind = EventKind(kind_text)
            except ValueError:
                raise ValidationError(f"line {line}: unknown event type {kind_text!r}") from None
            try:
                value = float(row[2])
            except ValueError:
                raise ParseError(f"bad value {row[2]!r}", line=line) from None
            events.append(RawEvent(ts, kind, value))
    if not events:
        raise EmptyInputError(f"{path}: no events")
    events.sort(key=lambda e: e.timestamp)
    return PatientRecord(
        patient_id=patient_id or path.stem,
        diabetes_type=diabetes_type,
        events=tuple(events),
    )


def export_csv(record: PatientRecord, path: str | Path) -> None:
    """Write a PatientRecord back to the raw CSV schema (values round-trip)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(_HEADER)
        for e in record.events:
            writer.writerow([e.timestamp.isoformat(sep="T", timespec="seconds"), e.kind.value, repr(e.value)])


def validate(record: PatientRecord) -> list[str]:
    """Return human-readable invariant violations; empty list means valid."""
    violations: list[str] = []
    if not record.events:
        violations.append("record has no events")
        return violations
    has_glucose = False
    prev_ts = None
    for i, e in enumerate(record.events):
        if prev_ts is not None and e.timestamp < prev_ts:
            violations.append(f"event {i}: timestamps not sorted")
        prev_ts = e.timestamp
        if not np.isfinite(e.value):
            violations.append(f"event {i}: non-finite value")
            continue
        if e.kind == EventKind.GLUCOSE:
            has_glucose = True
            if not (0.0 < e.value <= GLUCOSE_MAX_MGDL):
                violations.append(
                    f"event {i}: glucose {e.value} outside (0, {GLUCOSE_MAX_MGDL:g}] mg/dL")
        else:
            if e.value < 0.0:
                violations.append(f"event {i}: negative {e.kind.value} value {e.value}")
    if not has_glucose:
        violations.append("record has no glucose events")
    return violations
