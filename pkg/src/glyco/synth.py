"""Seeded synthetic diabetic-patient generator.

Produces PatientRecords with realistic-looking dynamics (circadian drift,
meal absorption, bolus action, AR(1) sensor noise) so the full pipeline and
its evaluation suite can run without access to clinical datasets.  All
randomness flows through a portable SplitMix64 generator so generation is
bit-identical across platforms and runs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from datetime import datetime, timedelta

import numpy as np

from .data_model import DiabetesType, EventKind, PatientRecord, RawEvent, STEP_MINUTES
from .preprocess import pchip_eval, pchip_slopes

_MASK64 = (1 << 64) - 1


class SplitMix64:
    """Portable 64-bit mixing PRNG (Steele/Lea/Vigna splitmix64 recurrence).

    state' = state + 0x9E3779B97F4A7C15 (mod 2^64)
    z = state'; z = (z ^ z>>30) * 0xBF58476D1CE4E5B9
    z = (z ^ z>>27) * 0x94D049BB133111EB; output z ^ z>>31
    """

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def uniform(self, low: float = 0.0, high: float = 1.0) -> float:
        u = (self.next_u64() >> 11) * 2.0 ** -53  # 53-bit mantissa in [0, 1)
        return low + (high - low) * u

    def randint(self, low: int, high: int) -> int:
        """Integer in [low, high] inclusive."""
        return low + self.next_u64() % (high - low + 1)

    def normal(self) -> float:
        """Standard normal via Box-Muller (one draw per pair, deterministic)."""
        u1 = max(self.uniform(), 2.0 ** -53)
        u2 = self.uniform()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def spawn(self, stream: int) -> "SplitMix64":
        """Derive an independent child generator for a numbered stream."""
        return SplitMix64(self.next_u64() ^ (0xD1B54A32D192ED03 * (stream + 1) & _MASK64))


@dataclass(frozen=True)
class SynthConfig:
    days: int = 14
    meals_min: int = 3
    meals_max: int = 4
    cho_min_g: float = 20.0
    cho_max_g: float = 90.0
    bolus_units_per_10g: float = 1.0
    baseline_mgdl: float = 130.0
    circadian_amplitude_mgdl: float = 12.0
    meal_peak_min: float = 45.0
    meal_width_min: float = 30.0
    insulin_peak_min: float = 75.0
    insulin_width_min: float = 50.0
    carb_rise_mgdl_per_g: float = 3.0
    insulin_drop_mgdl_per_unit: float = 32.0
    noise_std_mgdl: float = 12.0     # slow unlogged disturbances (stress, activity, ...)
    noise_ar_coeff: float = 0.85     # AR(1) coefficient at noise_resolution_min steps
    noise_resolution_min: int = 30   # disturbance nodes, interpolated to the 5-min grid
    jitter_std_mgdl: float = 1.0     # white per-sample sensor jitter
    seed: int = 0

    def __post_init__(self):
        if self.days < 4:
            raise ValueError("synthetic generation needs >= 4 days")
        if self.noise_std_mgdl < 0 or self.jitter_std_mgdl < 0:
            raise ValueError("noise levels must be >= 0")
        if self.noise_resolution_min < STEP_MINUTES:
            raise ValueError(f"noise_resolution_min must be >= {STEP_MINUTES}")
        for name in ("meal_peak_min", "meal_width_min", "insulin_peak_min", "insulin_width_min"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")


GLUCOSE_CLIP = (40.0, 400.0)
_START = datetime(2021, 3, 1, 0, 0, 0)
_MEAL_HOURS = (7.5, 12.5, 19.0, 16.0, 10.5)  # breakfast, lunch, dinner, snacks


def _gamma_kernel(tau_min: np.ndarray, peak: float, width: float) -> np.ndarray:
    """Gamma-shaped response normalized to peak 1 at tau = peak."""
    a = (peak / width) ** 2
    out = np.zeros_like(tau_min)
    pos = tau_min > 0
    t = tau_min[pos] / peak
    out[pos] = np.exp(a * (1.0 - t) + a * np.log(t))
    return out


def generate_patient(config: SynthConfig, patient_id: str = "synth-001") -> PatientRecord:
    """Simulate one patient; deterministic for a given config (incl. seed)."""
    rng = SplitMix64(config.seed)
    steps_per_day = 24 * 60 // STEP_MINUTES
    n = config.days * steps_per_day
    t_min = np.arange(n) * float(STEP_MINUTES)  # minutes since series start

    hours = (t_min / 60.0) % 24.0
    glucose = config.baseline_mgdl + config.circadian_amplitude_mgdl * np.sin(
        2.0 * np.pi * (hours - 1.0) / 24.0)

    meals: list[tuple[float, float]] = []   # (minute offset, grams)
    boluses: list[tuple[float, float]] = []  # (minute offset, units)
    for day in range(config.days):
        n_meals = rng.randint(config.meals_min, config.meals_max)
        for m in range(n_meals):
            base_h = _MEAL_HOURS[m % len(_MEAL_HOURS)]
            minute = day * 24 * 60 + base_h * 60 + rng.uniform(-45.0, 45.0)
            minute = min(max(minute, day * 24 * 60 + 1.0), (day + 1) * 24 * 60 - 1.0)
            grams = rng.uniform(config.cho_min_g, config.cho_max_g)
            meals.append((minute, grams))
            units = round(grams / 10.0 * config.bolus_units_per_10g, 1)
            if units > 0:
                boluses.append((minute, units))

    for minute, grams in meals:
        glucose += grams * config.carb_rise_mgdl_per_g * _gamma_kernel(
            t_min - minute, config.meal_peak_min, config.meal_width_min)
    for minute, units in boluses:
        glucose -= units * config.insulin_drop_mgdl_per_unit * _gamma_kernel(
            t_min - minute, config.insulin_peak_min, config.insulin_width_min)

    if config.noise_std_mgdl > 0:
        # slow disturbances: AR(1) at coarse nodes, monotone-cubic interpolated
        # onto the grid so the reference stays smooth at the 5-minute scale
        node_step = config.noise_resolution_min / STEP_MINUTES
        n_nodes = int(np.ceil((n - 1) / node_step)) + 2
        rho = config.noise_ar_coeff
        innov_scale = config.noise_std_mgdl * math.sqrt(1.0 - rho * rho)
        nodes = np.empty(n_nodes)
        prev = config.noise_std_mgdl * rng.normal()
        for i in range(n_nodes):
            prev = rho * prev + innov_scale * rng.normal()
            nodes[i] = prev
        node_x = np.arange(n_nodes) * node_step
        slopes = pchip_slopes(node_x, nodes)
        glucose += pchip_eval(node_x, nodes, slopes, np.arange(n, dtype=float))

    if config.jitter_std_mgdl > 0:
        jitter = np.array([rng.normal() for _ in range(n)])
        glucose += config.jitter_std_mgdl * jitter

    clipped = (glucose <= GLUCOSE_CLIP[0]) | (glucose >= GLUCOSE_CLIP[1])
    glucose = np.clip(glucose, *GLUCOSE_CLIP)

    warnings: tuple[str, ...] = ()
    pinned_frac = float(np.mean(clipped))
    if pinned_frac > 0.20:
        warnings = (f"glucose pinned at clip bounds {pinned_frac:.0%} of the time; "
                    "config produces out-of-range physiology",)

    events: list[RawEvent] = []
    for i in range(n):
        ts = _START + timedelta(minutes=float(t_min[i]))
        events.append(RawEvent(ts, EventKind.GLUCOSE, round(float(glucose[i]), 2)))
    for minute, grams in meals:
        ts = _START + timedelta(seconds=round(minute * 60))
        events.append(RawEvent(ts, EventKind.CHO, round(grams, 1)))
    for minute, units in boluses:
        ts = _START + timedelta(seconds=round(minute * 60))
        events.append(RawEvent(ts, EventKind.INSULIN, units))
    events.sort(key=lambda e: e.timestamp)

    return PatientRecord(
        patient_id=patient_id,
        diabetes_type=DiabetesType.SYNTHETIC,
        events=tuple(events),
        warnings=warnings,
    )


def generate_cohort(n: int, base: SynthConfig, seed: int | None = None) -> list[PatientRecord]:
    """Generate n patients with seeded per-patient parameter jitter."""
    if n < 1:
        raise ValueError("cohort size must be >= 1")
    master = SplitMix64(base.seed if seed is None else seed)
    cohort = []
    for i in range(n):
        jitter = master.spawn(i)
        cfg = replace(
            base,
            baseline_mgdl=base.baseline_mgdl + jitter.uniform(-20.0, 25.0),
            circadian_amplitude_mgdl=base.circadian_amplitude_mgdl * jitter.uniform(0.7, 1.4),
            carb_rise_mgdl_per_g=base.carb_rise_mgdl_per_g * jitter.uniform(0.8, 1.25),
            insulin_drop_mgdl_per_unit=base.insulin_drop_mgdl_per_unit * jitter.uniform(0.8, 1.25),
            noise_std_mgdl=base.noise_std_mgdl * jitter.uniform(0.75, 1.3),
            seed=jitter.next_u64(),
        )
        cohort.append(generate_patient(cfg, patient_id=f"synth-{i + 1:03d}"))
    return cohort
