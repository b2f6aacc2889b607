"""Synthetic live-bed scour generator.

Produces hourly (bed elevation, stage elevation, discharge) series for a
fictional bridge: discharge is a base flow plus triangular flood pulses,
flow depth follows a fixed rating relation y1 = RATING_COEFF · q^RATING_EXP,
the bed erodes along the time-dependent scour curve with known "true"
calibration values during floods, and refills exponentially toward the
reference level between them. Gaussian sensor noise is added per channel.

The generator doubles as a ground-truth oracle: because the erosion curve
is the same calibrated equation the trainer fits, recovery of the true
(p1, T_L) from generated data can be asserted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datapipe import TimeSeriesFrame
from .physics import BridgeAttributes, ConstrainedParams, spinn_hec18

RATING_COEFF = 0.2   # y1 [m] = 0.2 · q^0.4; spans roughly 0.5-4 m over
RATING_EXP = 0.4     # the 10-3000 m³/s flood range
REFILL_HOURS = 48.0  # e-folding time of bed refill between floods
EPOCH = np.datetime64("2020-01-01T00:00:00", "s")


@dataclass(frozen=True)
class FloodPulse:
    start_hour: int
    duration_hours: int
    peak_q: float  # absolute discharge at the pulse apex, m³/s


@dataclass
class SynthSpec:
    bridge: BridgeAttributes
    p1: float
    p2: float
    p3: float
    t_lag_hours: float
    floods: tuple
    base_q: float = 100.0
    noise_bed: float = 0.02       # m
    noise_stage: float = 0.02     # m
    noise_q: float = 2.0          # m³/s
    seed: int = 0

    def truth(self):
        return ConstrainedParams(p1=self.p1, p2=self.p2, p3=self.p3,
                                 t_l=self.t_lag_hours, alpha=None, beta=None)


def synthetic_bridge(bridge_id="S1", as_built=50.0):
    """A fictional pier with unit correction factors."""
    return BridgeAttributes(bridge_id=bridge_id, as_built_elevation=as_built,
                            channel_width=100.0, pier_width=1.5,
                            pier_length=10.0, attack_angle=0.0,
                            k1=1.0, k2=1.0, k3=1.0)


def default_spec(seed=0, hours=8400, spacing=300, duration=40, peak_q=800.0,
                 p1=0.5, t_lag_hours=24.0):
    """Canonical oracle configuration: evenly spaced identical floods."""
    floods = tuple(FloodPulse(start, duration, peak_q)
                   for start in range(150, hours - duration - 10, spacing))
    return SynthSpec(bridge=synthetic_bridge(), p1=p1, p2=1.0, p3=1.0,
                     t_lag_hours=t_lag_hours, floods=floods, seed=seed)


def rating_flow_depth(q):
    """Flow depth implied by discharge through the fixed rating relation."""
    return RATING_COEFF * np.asarray(q, dtype=np.float64) ** RATING_EXP


def discharge_series(spec, hours):
    """Base flow plus triangular pulses (rise to apex at mid-duration)."""
    t = np.arange(hours, dtype=np.float64)
    q = np.full(hours, spec.base_q)
    for pulse in spec.floods:
        apex = pulse.start_hour + pulse.duration_hours / 2.0
        half = pulse.duration_hours / 2.0
        tri = 1.0 - np.abs(t - apex) / half
        q += (pulse.peak_q - spec.base_q) * np.clip(tri, 0.0, None)
    return q


def generate(spec, hours):
    """Produce a TimeSeriesFrame of ``hours`` hourly records."""
    if hours < 1:
        raise ValueError("hours must be at least 1")
    rng = np.random.default_rng(spec.seed)
    q = discharge_series(spec, hours)
    y1 = rating_flow_depth(q)
    bridge = spec.bridge

    scour = np.zeros(hours)
    decay = np.exp(-1.0 / REFILL_HOURS)
    truth = spec.truth()
    in_flood = np.zeros(hours, dtype=bool)
    erosion_curve = np.zeros(hours)
    for pulse in spec.floods:
        lo = max(pulse.start_hour, 0)
        hi = min(pulse.start_hour + pulse.duration_hours + 1, hours)
        if lo >= hi:
            continue
        q_peak = pulse.peak_q
        y_eq = float(spinn_hec18(float(rating_flow_depth(q_peak)), q_peak,
                                 truth, bridge))
        in_flood[lo:hi] = True
        # erosion clock restarts at each pulse onset
        tau = np.arange(hi - lo, dtype=np.float64) + (lo - pulse.start_hour)
        erosion_curve[lo:hi] = y_eq * (1.0 - np.exp(-spec.p3 * tau
                                                    / spec.t_lag_hours))

    s = 0.0
    for h in range(hours):
        if in_flood[h]:
            s = max(s * decay, erosion_curve[h])
        else:
            s = s * decay
        scour[h] = s

    e_bed = bridge.as_built_elevation - scour
    e_stage = bridge.as_built_elevation + y1
    if spec.noise_bed:
        e_bed = e_bed + rng.normal(0.0, spec.noise_bed, hours)
    if spec.noise_stage:
        e_stage = e_stage + rng.normal(0.0, spec.noise_stage, hours)
    if spec.noise_q:
        q = np.maximum(q + rng.normal(0.0, spec.noise_q, hours), 1e-6)

    timestamps = EPOCH + np.arange(hours) * np.timedelta64(3600, "s")
    return TimeSeriesFrame(bridge.bridge_id, timestamps, e_bed, e_stage, q)
