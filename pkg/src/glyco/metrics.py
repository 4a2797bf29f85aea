"""Evaluation suite: RMSE, dRMSE, and the CG-EGA clinical-acceptability grids.

The point grid (P-EGA) scores each prediction against the reference value
with boundaries that relax when the reference glucose is changing fast:
falling glucose raises the upper A/B/D limits by 10 mg/dL (rate 1-2
mg/dL/min) or 20 mg/dL (faster), rising glucose lowers the lower limits
symmetrically.  The rate grid (R-EGA) scores the predicted rate of change
against the reference rate.  The combined CG-EGA maps the zone pair,
per glycemic region, to accurate prediction (AP), benign error (BE), or
erroneous prediction (EP): a prediction is an AP only when both grids
score A or B; it is benign when the point score stays A/B while the rate
score degrades to C/D; anything else is erroneous.

Zone labels use u/l prefixes for the upper/lower halves of C, D, and E
(upper = prediction above the reference diagonal).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

from .data_model import STEP_MINUTES
from .errors import ContractError, ParseError

P_ZONES = ("A", "B", "uC", "lC", "uD", "lD", "uE", "lE")
R_ZONES = ("A", "B", "uC", "lC", "uD", "lD", "uE", "lE")
REGIONS = ("hypo", "eu", "hyper")
LABELS = ("AP", "BE", "EP")

HYPO_MGDL = 70.0
HYPER_MGDL = 180.0


@dataclass
class PredictionTrace:
    """Aligned true/predicted glucose (mg/dL) on the 5-minute grid.

    Timestamps advance by exactly one step inside a segment; segment
    boundaries mark gaps where consecutive-step rates are undefined.
    """

    timestamps: list[datetime]
    y_true: np.ndarray
    y_pred: np.ndarray
    segment_ids: np.ndarray

    def __post_init__(self):
        n = len(self.timestamps)
        if not (len(self.y_true) == len(self.y_pred) == len(self.segment_ids) == n):
            raise ContractError("trace columns must have equal length")
        if n and not (np.all(np.isfinite(self.y_true)) and np.all(np.isfinite(self.y_pred))):
            raise ContractError("trace values must be finite")

    def __len__(self) -> int:
        return len(self.timestamps)

    def with_predictions(self, y_pred: np.ndarray) -> "PredictionTrace":
        return PredictionTrace(self.timestamps, self.y_true.copy(),
                               np.asarray(y_pred, dtype=float), self.segment_ids.copy())

    def segments(self) -> list[np.ndarray]:
        """Index arrays of the contiguous segments, in trace order."""
        if len(self) == 0:
            return []
        ids = self.segment_ids
        breaks = np.flatnonzero(ids[1:] != ids[:-1]) + 1
        return np.split(np.arange(len(ids)), breaks)


@dataclass(frozen=True)
class RatePoint:
    """Reference and predicted rate of change, in mg/dL per minute."""

    true_rate: float
    pred_rate: float


def rmse(trace: PredictionTrace) -> float:
    """Root-mean-squared prediction error in mg/dL."""
    if len(trace) == 0:
        raise ContractError("empty trace")
    return float(np.sqrt(np.mean((trace.y_true - trace.y_pred) ** 2)))


def _consecutive_pairs(trace: PredictionTrace) -> np.ndarray:
    """Indices i such that point i-1 is the same-segment predecessor of i."""
    if len(trace) < 2:
        return np.array([], dtype=int)
    same = trace.segment_ids[1:] == trace.segment_ids[:-1]
    return np.flatnonzero(same) + 1


def drmse(trace: PredictionTrace, per_minute: bool = False) -> float:
    """RMSE of the consecutive-step variations, in mg/dL per 5-minute step.

    Pass per_minute=True for the mg/dL-per-minute reading of the same
    quantity (divides by the step length).
    """
    idx = _consecutive_pairs(trace)
    if len(idx) == 0:
        raise ContractError("trace has no same-segment consecutive pair")
    dv_true = trace.y_true[idx] - trace.y_true[idx - 1]
    dv_pred = trace.y_pred[idx] - trace.y_pred[idx - 1]
    value = float(np.sqrt(np.mean((dv_true - dv_pred) ** 2)))
    return value / STEP_MINUTES if per_minute else value


def rate_of_change(trace: PredictionTrace) -> list[RatePoint]:
    """Per-point rates (mg/dL/min) for points with a same-segment predecessor."""
    idx = _consecutive_pairs(trace)
    true_rate = (trace.y_true[idx] - trace.y_true[idx - 1]) / STEP_MINUTES
    pred_rate = (trace.y_pred[idx] - trace.y_pred[idx - 1]) / STEP_MINUTES
    return [RatePoint(float(t), float(p)) for t, p in zip(true_rate, pred_rate)]


def _rate_mods(true_rate: float) -> tuple[float, float]:
    """Boundary relaxations (raise-upper, lower-lower) for the P-EGA."""
    mod_up = 0.0
    mod_down = 0.0
    if -2.0 <= true_rate <= -1.0:
        mod_up = 10.0
    elif true_rate < -2.0:
        mod_up = 20.0
    if 1.0 <= true_rate <= 2.0:
        mod_down = 10.0
    elif true_rate > 2.0:
        mod_down = 20.0
    return mod_up, mod_down


def p_ega(y_true: float, y_pred: float, true_rate: float) -> str:
    """Point-error grid zone for one prediction.

    Zones follow the published grid: A within 20% of reference (or both
    hypoglycemic), E for hypo/hyper confusion, C for overcorrection,
    D for failure to detect, B otherwise; all boundaries shifted by the
    rate-dependent relaxations.
    """
    up, down = _rate_mods(true_rate)
    if (y_true <= 70.0 and y_pred <= 70.0 + up) or \
            (0.8 * y_true - down <= y_pred <= 1.2 * y_true + up):
        return "A"
    if y_true <= 70.0 and y_pred >= 180.0 + up:
        return "uE"
    if y_true >= 180.0 and y_pred <= 70.0 - down:
        return "lE"
    if 70.0 <= y_true <= 290.0 and y_pred >= y_true + 110.0 + up:
        return "uC"
    if 130.0 <= y_true <= 180.0 and y_pred <= 1.4 * y_true - 182.0 - down:
        return "lC"
    if y_true <= 70.0 and y_pred < 180.0 + up:
        return "uD"
    if y_true >= 240.0 and 70.0 - down <= y_pred <= 180.0 - down:
        return "lD"
    return "B"


def r_ega(rates: RatePoint) -> str:
    """Rate-error grid zone for one (reference, predicted) rate pair.

    A contains rates within 1 mg/dL/min of the reference, widened to a
    factor-of-two wedge for fast reference rates; E flags opposite extreme
    directions; C overestimates change when the reference is stable; D
    misses a fast reference change with a near-flat prediction.
    """
    dt, dp = rates.true_rate, rates.pred_rate
    if abs(dp - dt) <= 1.0:
        return "A"
    if dt > 0.0 and 0.5 * dt <= dp <= 2.0 * dt:
        return "A"
    if dt < 0.0 and 2.0 * dt <= dp <= 0.5 * dt:
        return "A"
    if dp > 1.0 and dt < -1.0:
        return "uE"
    if dp < -1.0 and dt > 1.0:
        return "lE"
    if -1.0 <= dt <= 1.0 and dp > dt + 2.0:
        return "uC"
    if -1.0 <= dt <= 1.0 and dp < dt - 2.0:
        return "lC"
    if -1.0 <= dp <= 1.0 and dt < dp - 2.0:
        return "uD"
    if -1.0 <= dp <= 1.0 and dt > dp + 2.0:
        return "lD"
    return "B"


def glycemic_region(y_true: float) -> str:
    """hypo (<= 70), hyper (>= 180), or eu, judged on the reference value."""
    if y_true <= HYPO_MGDL:
        return "hypo"
    if y_true >= HYPER_MGDL:
        return "hyper"
    return "eu"


def _build_combination_matrix() -> dict[str, dict[tuple[str, str], str]]:
    """Region-specific (R-zone, P-zone) -> AP/BE/EP lookup tables."""
    good_p = {"A", "B"}
    benign_r = {"uC", "lC", "uD", "lD"}
    matrices: dict[str, dict[tuple[str, str], str]] = {}
    for region in REGIONS:
        table: dict[tuple[str, str], str] = {}
        for r_zone in R_ZONES:
            for p_zone in P_ZONES:
                if p_zone in good_p and r_zone in good_p:
                    label = "AP"
                elif p_zone in good_p and r_zone in benign_r:
                    label = "BE"
                else:
                    label = "EP"
                table[(r_zone, p_zone)] = label
        matrices[region] = table
    return matrices


COMBINATION_MATRIX = _build_combination_matrix()


def cg_ega_classify(p_zone: str, r_zone: str, region: str) -> str:
    """Combine the two grid zones into AP, BE, or EP for the given region."""
    try:
        return COMBINATION_MATRIX[region][(r_zone, p_zone)]
    except KeyError:
        raise ContractError(f"unknown zone/region combination ({p_zone}, {r_zone}, {region})") from None


@dataclass(frozen=True)
class ScoredPoint:
    """One CG-EGA-scored trace point (points with a same-segment predecessor)."""

    timestamp: datetime
    y_true: float
    y_pred: float
    true_rate: float
    pred_rate: float
    p_zone: str
    r_zone: str
    region: str
    label: str


def score_trace(trace: PredictionTrace) -> list[ScoredPoint]:
    """Classify every eligible trace point through both grids."""
    idx = _consecutive_pairs(trace)
    points = []
    for i in idx:
        true_rate = (trace.y_true[i] - trace.y_true[i - 1]) / STEP_MINUTES
        pred_rate = (trace.y_pred[i] - trace.y_pred[i - 1]) / STEP_MINUTES
        p_zone = p_ega(float(trace.y_true[i]), float(trace.y_pred[i]), true_rate)
        r_zone = r_ega(RatePoint(true_rate, pred_rate))
        region = glycemic_region(float(trace.y_true[i]))
        points.append(ScoredPoint(
            timestamp=trace.timestamps[i],
            y_true=float(trace.y_true[i]),
            y_pred=float(trace.y_pred[i]),
            true_rate=float(true_rate),
            pred_rate=float(pred_rate),
            p_zone=p_zone,
            r_zone=r_zone,
            region=region,
            label=cg_ega_classify(p_zone, r_zone, region),
        ))
    return points


@dataclass(frozen=True)
class RegionRates:
    """AP/BE/EP percentages over the scored points of one region."""

    ap: float
    be: float
    ep: float
    n: int


@dataclass(frozen=True)
class CgEgaReport:
    """Per-region and overall clinical acceptability plus accuracy metrics."""

    rmse: float
    drmse: float
    overall: RegionRates
    per_region: dict[str, RegionRates | None]  # None when a region has no points


def _rates(labels: list[str]) -> RegionRates:
    n = len(labels)
    counts = {lab: labels.count(lab) for lab in LABELS}
    return RegionRates(
        ap=100.0 * counts["AP"] / n,
        be=100.0 * counts["BE"] / n,
        ep=100.0 * counts["EP"] / n,
        n=n,
    )


def cg_ega_report(trace: PredictionTrace) -> CgEgaReport:
    """Aggregate the CG-EGA over a trace; attaches RMSE and dRMSE."""
    points = score_trace(trace)
    if not points:
        raise ContractError("trace has no scorable point (needs a rate)")
    per_region: dict[str, RegionRates | None] = {}
    for region in REGIONS:
        labels = [p.label for p in points if p.region == region]
        per_region[region] = _rates(labels) if labels else None
    return CgEgaReport(
        rmse=rmse(trace),
        drmse=drmse(trace),
        overall=_rates([p.label for p in points]),
        per_region=per_region,
    )


_TRACE_HEADER = ["datetime", "y_true", "y_pred", "segment_id"]


def trace_to_csv(trace: PredictionTrace, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(_TRACE_HEADER)
        for i in range(len(trace)):
            writer.writerow([
                trace.timestamps[i].isoformat(sep="T", timespec="seconds"),
                repr(float(trace.y_true[i])),
                repr(float(trace.y_pred[i])),
                int(trace.segment_ids[i]),
            ])


def trace_from_csv(path: str | Path) -> PredictionTrace:
    path = Path(path)
    timestamps, y_true, y_pred, segments = [], [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != _TRACE_HEADER:
            raise ParseError(f"unexpected trace header {header!r}", line=1)
        for line, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise ParseError("expected 4 fields", line=line)
            timestamps.append(datetime.fromisoformat(row[0]))
            y_true.append(float(row[1]))
            y_pred.append(float(row[2]))
            segments.append(int(row[3]))
    return PredictionTrace(timestamps, np.array(y_true), np.array(y_pred),
                           np.array(segments, dtype=int))


_SCATTER_HEADER = ["y_true", "y_pred", "true_rate", "pred_rate", "p_zone", "r_zone", "label"]


def scatter_to_csv(points: list[ScoredPoint], path: str | Path) -> None:
    """Per-point EGA export used for the P-EGA / R-EGA scatter plots."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(_SCATTER_HEADER)
        for p in points:
            writer.writerow([
                repr(p.y_true), repr(p.y_pred), repr(p.true_rate), repr(p.pred_rate),
                p.p_zone, p.r_zone, p.label,
            ])
