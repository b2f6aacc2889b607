"""Calibrated empirical equations: export after training, episode
detection, and standalone episode prediction with overlapping-window
confidence intervals.

A calibrated record holds the constrained parameter values of one trained
equation. Prediction replays the equation over every sliding window that
overlaps a scouring episode; each calendar timestep inside an episode is
therefore predicted multiple times (once per covering window), and the
report carries the mean with a normal-approximation 95% interval
mean ± 1.96·s/sqrt(count) over those replicates.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .physics import ConstrainedParams, gtd_scour, scour_depth, spinn_hec18, td_scour

EQUATION_HEADER = ["bridge", "variant", "p1", "p2", "p3", "t_l_hours",
                   "alpha", "beta"]
_FIELDS = ("p1", "p2", "p3", "t_l_hours", "alpha", "beta")

# which parameter columns a variant populates; the rest serialize as N/A
_USED = {
    "hec18": ("p1", "p2"),
    "td": ("p1", "p2", "p3", "t_l_hours"),
    "gtd": ("p1", "t_l_hours", "alpha", "beta"),
}

MIN_EPISODE_HOURS = 2  # shorter positive runs are sensor jitter


@dataclass
class CalibratedEquation:
    bridge_id: str  # a bridge label, or "all" for pooled calibrations
    variant: str
    p1: float | None = None
    p2: float | None = None
    p3: float | None = None
    t_l_hours: float | None = None
    alpha: float | None = None
    beta: float | None = None

    def constrained(self):
        return ConstrainedParams(p1=self.p1, p2=self.p2, p3=self.p3,
                                 t_l=self.t_l_hours, alpha=self.alpha,
                                 beta=self.beta)


def export_equation(result, bridge_id):
    """Build the calibrated record from a finished training run."""
    if result.latents is None:
        raise ValueError("pure runs calibrate no equation")
    variant = {"spinn_hec18": "hec18", "spinn_td": "td",
               "spinn_gtd": "gtd"}[result.variant]
    values = dict(result.latents)
    values["t_l_hours"] = values.pop("t_l")
    kwargs = {f: (float(values[f]) if f in _USED[variant] else None)
              for f in _FIELDS}
    return CalibratedEquation(bridge_id=bridge_id, variant=variant, **kwargs)


def write_equations(path, equations):
    """Serialize records in the calibration-table layout (N/A for absent)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(EQUATION_HEADER)
        for eq in equations:
            row = [eq.bridge_id, eq.variant]
            for name in _FIELDS:
                value = getattr(eq, name)
                row.append("N/A" if value is None else repr(float(value)))
            writer.writerow(row)


def read_equations(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != EQUATION_HEADER:
            raise ValueError(f"{path}: expected header {','.join(EQUATION_HEADER)}")
        out = []
        for row in reader:
            if not row:
                continue
            fields = {}
            for name, cell in zip(_FIELDS, row[2:]):
                fields[name] = None if cell == "N/A" else float(cell)
            out.append(CalibratedEquation(bridge_id=row[0], variant=row[1],
                                          **fields))
    return out


def detect_episodes(frame, e_ref_mode, bridge=None, min_hours=MIN_EPISODE_HOURS):
    """Maximal contiguous runs of positive scour depth, as index ranges.

    The reference level is the as-built bed elevation, or the bed
    elevation at the first observed timestep for the dynamic mode. Runs
    shorter than ``min_hours`` are discarded; NaNs break runs.
    """
    if e_ref_mode == "as_built":
        if bridge is None:
            raise ValueError("as_built episode detection needs bridge attributes")
        e_ref = bridge.as_built_elevation
    elif e_ref_mode == "first_step":
        finite = np.nonzero(~np.isnan(frame.e_bed))[0]
        if len(finite) == 0:
            return []
        e_ref = float(frame.e_bed[finite[0]])
    else:
        raise ValueError(f"unknown e_ref_mode {e_ref_mode!r}")
    depth = scour_depth(e_ref, frame.e_bed)
    with np.errstate(invalid="ignore"):
        positive = depth > 0.0
    episodes = []
    i = 0
    n = len(positive)
    while i < n:
        if not positive[i]:
            i += 1
            continue
        j = i
        while j < n and positive[j]:
            j += 1
        if j - i >= min_hours:
            episodes.append((i, j))
        i = j
    return episodes


@dataclass
class EpisodePrediction:
    """Aggregated per-timestep equation predictions inside episodes."""

    timestamps: np.ndarray  # datetime64[s]
    indices: np.ndarray     # positions in the source frame
    mean: np.ndarray        # m
    lo95: np.ndarray        # m
    hi95: np.ndarray        # m
    count: np.ndarray       # overlapping predictions per timestep


def _window_prediction(eq, pair, bridge):
    params = eq.constrained()
    m_out = len(pair.y1_out)
    t = np.arange(m_out, dtype=np.float64)
    y1 = np.maximum(pair.y1_out, 1e-3 * (1 + 1e-9))
    q = np.maximum(pair.q_out, 0.0)
    if eq.variant == "hec18":
        return np.asarray(spinn_hec18(y1, q, params, bridge))
    if eq.variant == "td":
        return np.asarray(td_scour(t, float(y1[-1]), float(q[-1]), params,
                                   bridge))
    return np.asarray(gtd_scour(t, float(y1[-1]), float(q[-1]), params))


def cee_predict(eq, pairs, episodes, frame, m_in, bridge=None):
    """Replay the equation over windows that overlap scouring episodes.

    ``pairs`` are sliding windows over ``frame`` (matching reference
    mode); predictions land on the calendar timesteps of each window's
    output span, restricted to timesteps inside an episode. Returns the
    per-timestep aggregation; empty when nothing overlaps.
    """
    if not episodes:
        return EpisodePrediction(np.array([], dtype="datetime64[s]"),
                                 np.array([], dtype=int), np.array([]),
                                 np.array([]), np.array([]),
                                 np.array([], dtype=int))
    in_episode = np.zeros(len(frame), dtype=bool)
    for lo, hi in episodes:
        in_episode[lo:hi] = True

    index_of = {int(ts.astype("int64")): i
                for i, ts in enumerate(frame.timestamps)}
    sums = {}
    sq_sums = {}
    counts = {}
    for pair in pairs:
        start_idx = index_of.get(int(pair.start.astype("int64")))
        if start_idx is None:
            continue
        out_lo = start_idx + m_in
        m_out = len(pair.y1_out)
        steps = np.arange(out_lo, out_lo + m_out)
        keep = (steps < len(frame)) & in_episode[np.clip(steps, 0,
                                                         len(frame) - 1)]
        if not keep.any():
            continue
        values = _window_prediction(eq, pair, bridge)
        for idx, v in zip(steps[keep], values[keep]):
            idx = int(idx)
            sums[idx] = sums.get(idx, 0.0) + float(v)
            sq_sums[idx] = sq_sums.get(idx, 0.0) + float(v) ** 2
            counts[idx] = counts.get(idx, 0) + 1

    if not counts:
        return EpisodePrediction(np.array([], dtype="datetime64[s]"),
                                 np.array([], dtype=int), np.array([]),
                                 np.array([]), np.array([]),
                                 np.array([], dtype=int))
    order = sorted(counts)
    idx = np.array(order, dtype=int)
    count = np.array([counts[i] for i in order], dtype=int)
    mean = np.array([sums[i] / counts[i] for i in order])
    # unbiased sample variance over the overlapping replicates
    var = np.array([max(sq_sums[i] - counts[i] * (sums[i] / counts[i]) ** 2, 0.0)
                    / (counts[i] - 1) if counts[i] > 1 else 0.0
                    for i in order])
    half = 1.96 * np.sqrt(var) / np.sqrt(count)
    return EpisodePrediction(timestamps=frame.timestamps[idx], indices=idx,
                             mean=mean, lo95=mean - half, hi95=mean + half,
                             count=count)


def episode_rmse(prediction, observed_scour, window):
    """RMSE of the mean prediction against observed scour over [start, end).

    ``observed_scour`` is aligned with the source frame; ``window`` is an
    index range. Raises when the prediction does not overlap the window.
    """
    lo, hi = window
    keep = (prediction.indices >= lo) & (prediction.indices < hi)
    if not keep.any():
        raise ValueError("prediction does not overlap the requested window")
    pred = prediction.mean[keep]
    obs = np.asarray(observed_scour)[prediction.indices[keep]]
    return float(np.sqrt(np.mean((pred - obs) ** 2)))
