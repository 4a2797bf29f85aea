"""Causal smoothing of prediction traces.

Only predictions are smoothed; the reference series is untouched.  Smoothing
is applied per segment so day boundaries and gaps are never averaged across.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .metrics import PredictionTrace


@dataclass(frozen=True)
class SmoothingConfig:
    window: int = 3  # average over the last `window` predictions, incl. the current

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("smoothing window must be >= 1")


def moving_average(trace: PredictionTrace, config: SmoothingConfig = SmoothingConfig()) -> PredictionTrace:
    """Causal moving average with ramp-up at segment starts.

    The first predictions of a segment average over however much history
    exists, so the output trace keeps the input's length and timestamps.
    """
    w = config.window
    smoothed = trace.y_pred.astype(float).copy()
    if w > 1:
        for seg in trace.segments():
            values = trace.y_pred[seg]
            csum = np.cumsum(values)
            out = np.empty_like(csum)
            k = min(w, len(values))
            out[:k] = csum[:k] / np.arange(1, k + 1)
            if len(values) > w:
                out[w:] = (csum[w:] - csum[:-w]) / w
            smoothed[seg] = out
    return trace.with_predictions(smoothed)


def exponential(trace: PredictionTrace, coefficient: float = 0.5) -> PredictionTrace:
    """Exponential smoothing alternative behind the same interface.

    s_t = coefficient * p_t + (1 - coefficient) * s_{t-1}, restarted at each
    segment.  Kept for comparison; the moving average is the default.
    """
    if not (0.0 < coefficient <= 1.0):
        raise ValueError("coefficient must be in (0, 1]")
    smoothed = trace.y_pred.astype(float).copy()
    for seg in trace.segments():
        values = trace.y_pred[seg]
        out = np.empty_like(values, dtype=float)
        acc = values[0]
        out[0] = acc
        for i in range(1, len(values)):
            acc = coefficient * values[i] + (1.0 - coefficient) * acc
            out[i] = acc
        smoothed[seg] = out
    return trace.with_predictions(smoothed)
