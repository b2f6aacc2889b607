"""Sensor ingestion, cleaning, windowing, splitting, and feature scaling.

The pipeline order is fixed: ingest -> aggregate_hourly -> remove_outliers
-> smooth -> impute_linear -> synchronize -> make_windows -> split ->
fit_scaler/scale. Missing values are NaN throughout; windows never cross a
NaN gap. Input features handed to the forecasters are (scour depth, flow
depth, discharge) derived from a per-window reference elevation; targets
and physics covariates stay in physical units.

Input CSV schema: header ``timestamp,e_bed_m,e_stage_m,q_m3s``, ISO-8601
timestamps, ``.`` decimal separator, empty field = missing.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, replace
from datetime import datetime

import numpy as np

from .physics import flow_depth, scour_depth

CSV_HEADER = ["timestamp", "e_bed_m", "e_stage_m", "q_m3s"]
FEATURES = ("e_bed", "e_stage", "q")
E_REF_MODES = ("as_built", "first_step")

HOUR = np.timedelta64(1, "h")


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass
class TimeSeriesFrame:
    """Timestamped sensor record for one bridge; NaN marks missing values."""

    bridge_id: str
    timestamps: np.ndarray  # datetime64[s], strictly increasing
    e_bed: np.ndarray       # m
    e_stage: np.ndarray     # m
    q: np.ndarray           # m³/s

    def __len__(self):
        return len(self.timestamps)

    def copy(self):
        return TimeSeriesFrame(self.bridge_id, self.timestamps.copy(),
                               self.e_bed.copy(), self.e_stage.copy(),
                               self.q.copy())


@dataclass
class SequencePair:
    """One training sample: input window features plus raw target covariates.

    ``x`` holds (scour depth, flow depth, discharge) over the input window;
    after scaling it is standardized, while ``y`` (target scour depth) and
    the output-window covariates ``y1_out``/``q_out`` stay in meters and
    m³/s because the physics equations are dimensional.
    """

    x: np.ndarray       # [m_in, 3]
    y: np.ndarray       # [m_out] scour depth, m
    e_ref: float        # m
    y1_out: np.ndarray  # [m_out] flow depth, m
    q_out: np.ndarray   # [m_out] discharge, m³/s
    start: np.datetime64


@dataclass(frozen=True)
class SplitSpec:
    test_fraction: float = 0.20
    train_val_ratio: tuple = (3, 1)
    shuffle_seed: int = 0


@dataclass
class Scaler:
    """Per-feature standardizer fitted on training inputs only."""

    mean: np.ndarray
    std: np.ndarray

    def apply(self, x):
        return (x - self.mean) / self.std

    def invert(self, x):
        return x * self.std + self.mean


def _parse_timestamp(text, lineno):
    try:
        dt = datetime.fromisoformat(text)
    except ValueError:
        raise DataError(f"line {lineno}: bad timestamp {text!r}") from None
    return np.datetime64(dt.replace(tzinfo=None), "s")


def _parse_value(text, column, lineno):
    text = text.strip()
    if text == "":
        return np.nan
    try:
        return float(text)
    except ValueError:
        raise DataError(f"line {lineno}: bad {column} value {text!r}") from None


def ingest(path, bridge_id=None):
    """Parse a sensor CSV into a TimeSeriesFrame, keeping missing as NaN."""
    timestamps, e_bed, e_stage, q = [], [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file")
        if [h.strip() for h in header] != CSV_HEADER:
            missing = [c for c in CSV_HEADER if c not in header]
            raise DataError(f"{path}: bad header; missing column(s) "
                            f"{', '.join(missing) if missing else header}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise DataError(f"line {lineno}: expected 4 fields, got {len(row)}")
            ts = _parse_timestamp(row[0], lineno)
            if timestamps and ts <= timestamps[-1]:
                raise DataError(f"line {lineno}: timestamp {row[0]} not strictly "
                                "increasing")
            timestamps.append(ts)
            e_bed.append(_parse_value(row[1], "e_bed_m", lineno))
            e_stage.append(_parse_value(row[2], "e_stage_m", lineno))
            q.append(_parse_value(row[3], "q_m3s", lineno))
    if not timestamps:
        raise DataError(f"{path}: no data rows")
    if bridge_id is None:
        bridge_id = ""
    return TimeSeriesFrame(bridge_id, np.array(timestamps, dtype="datetime64[s]"),
                           np.array(e_bed), np.array(e_stage), np.array(q))


def write_frame(frame, path):
    """Emit a frame in the input CSV schema; NaN becomes an empty field."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for i in range(len(frame)):
            ts = str(frame.timestamps[i].astype("datetime64[s]"))
            row = [ts]
            for series in (frame.e_bed, frame.e_stage, frame.q):
                v = series[i]
                row.append("" if np.isnan(v) else repr(float(v)))
            writer.writerow(row)


def aggregate_hourly(frame):
    """Average samples into hour buckets on a contiguous hourly grid.

    Hours with no samples become NaN rows; already-hourly input passes
    through unchanged.
    """
    hours = frame.timestamps.astype("datetime64[h]")
    first, last = hours[0], hours[-1]
    n = int((last - first) / HOUR) + 1
    idx = ((hours - first) / HOUR).astype(int)
    out = {}
    for name in FEATURES:
        series = getattr(frame, name)
        sums = np.zeros(n)
        counts = np.zeros(n)
        ok = ~np.isnan(series)
        np.add.at(sums, idx[ok], series[ok])
        np.add.at(counts, idx[ok], 1.0)
        with np.errstate(invalid="ignore"):
            out[name] = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    grid = first.astype("datetime64[s]") + np.arange(n) * np.timedelta64(3600, "s")
    return TimeSeriesFrame(frame.bridge_id, grid, out["e_bed"], out["e_stage"],
                           out["q"])


def remove_outliers(frame, window_hours=25, k=5.0):
    """Null values far from a centered rolling median.

    A point is dropped when its distance to the window median exceeds
    k · 1.4826 · MAD. Positions without a full window (series edges, or a
    series shorter than the window) are left unchanged.
    """
    out = frame.copy()
    n = len(frame)
    if n < window_hours:
        return out
    half = window_hours // 2
    for name in FEATURES:
        x = getattr(out, name)
        windows = np.lib.stride_tricks.sliding_window_view(x, window_hours)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)  # all-NaN windows
            med = np.nanmedian(windows, axis=1)
            mad = np.nanmedian(np.abs(windows - med[:, None]), axis=1)
        center = x[half:half + len(med)]
        with np.errstate(invalid="ignore"):
            bad = np.abs(center - med) > k * 1.4826 * mad
        bad &= ~np.isnan(center)
        x[half:half + len(med)] = np.where(bad, np.nan, center)
    return out


def smooth(frame, window_hours=5):
    """Centered moving average that ignores NaNs; NaN positions stay NaN.

    Windows shrink near the series edges.
    """
    out = frame.copy()
    kernel = np.ones(window_hours)
    for name in FEATURES:
        x = getattr(out, name)
        nan = np.isnan(x)
        sums = np.convolve(np.where(nan, 0.0, x), kernel, mode="same")
        counts = np.convolve((~nan).astype(float), kernel, mode="same")
        with np.errstate(invalid="ignore"):
            smoothed = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
        smoothed[nan] = np.nan
        setattr(out, name, smoothed)
    return out


def impute_linear(frame, max_gap_hours=6):
    """Fill interior NaN runs of length <= max_gap_hours by interpolation.

    Longer gaps and leading/trailing NaNs are left alone; they become
    window boundaries downstream.
    """
    out = frame.copy()
    for name in FEATURES:
        x = getattr(out, name)
        isnan = np.isnan(x)
        if not isnan.any() or isnan.all():
            continue
        i = 0
        n = len(x)
        while i < n:
            if not isnan[i]:
                i += 1
                continue
            j = i
            while j < n and isnan[j]:
                j += 1
            # [i, j) is a NaN run; fill only interior runs within the cap
            if i > 0 and j < n and (j - i) <= max_gap_hours:
                lo, hi = x[i - 1], x[j]
                steps = j - i + 1
                x[i:j] = lo + (hi - lo) * np.arange(1, steps) / steps
            i = j
    return out


def synchronize(frame):
    """Enumerate maximal contiguous spans where all three features exist.

    Returns a list of half-open index ranges (start, end).
    """
    usable = ~(np.isnan(frame.e_bed) | np.isnan(frame.e_stage) | np.isnan(frame.q))
    spans = []
    i = 0
    n = len(frame)
    while i < n:
        if not usable[i]:
            i += 1
            continue
        j = i
        while j < n and usable[j]:
            j += 1
        spans.append((i, j))
        i = j
    return spans


def clean(frame, window_hours=25, k=5.0, smooth_hours=5, max_gap_hours=6):
    """Standard cleaning chain: aggregate, de-spike, smooth, impute."""
    frame = aggregate_hourly(frame)
    frame = remove_outliers(frame, window_hours=window_hours, k=k)
    frame = smooth(frame, window_hours=smooth_hours)
    frame = impute_linear(frame, max_gap_hours=max_gap_hours)
    return frame


def make_windows(frame, spans, m_in, m_out, e_ref_mode, bridge):
    """Slice stride-1 sliding windows out of the gap-free spans.

    ``e_ref_mode`` picks the reference elevation: the bridge's as-built bed
    elevation, or the bed elevation at each window's first timestep
    (dynamic). Features are (scour depth, flow depth, discharge) against
    that reference; a span of length N yields max(0, N - (m_in+m_out) + 1)
    windows.
    """
    if e_ref_mode not in E_REF_MODES:
        raise ValueError(f"unknown e_ref_mode {e_ref_mode!r}")
    length = m_in + m_out
    pairs = []
    for lo, hi in spans:
        n = hi - lo
        if n < length:
            continue
        for s in range(lo, hi - length + 1):
            if e_ref_mode == "as_built":
                e_ref = float(bridge.as_built_elevation)
            else:
                e_ref = float(frame.e_bed[s])
            bed = frame.e_bed[s:s + length]
            stage = frame.e_stage[s:s + length]
            qq = frame.q[s:s + length]
            y_s = scour_depth(e_ref, bed)
            y1 = flow_depth(stage, e_ref)
            x = np.stack([y_s[:m_in], y1[:m_in], qq[:m_in]], axis=1)
            pairs.append(SequencePair(
                x=x,
                y=y_s[m_in:].copy(),
                e_ref=e_ref,
                y1_out=y1[m_in:].copy(),
                q_out=qq[m_in:].copy(),
                start=frame.timestamps[s],
            ))
    return pairs


def split(pairs, spec):
    """Temporal test split plus a seeded random train/validation split.

    The last floor(test_fraction·n) windows by start timestamp form the
    test set; the remainder is shuffled with the spec seed and divided
    train:val per the configured ratio.
    """
    n = len(pairs)
    if n < 5:
        raise DataError(f"need at least 5 sequences to split, got {n}")
    ordered = sorted(range(n), key=lambda i: (pairs[i].start.astype("int64"), i))
    n_test = int(spec.test_fraction * n)
    head, test_idx = ordered[:n - n_test], ordered[n - n_test:]
    rng = np.random.default_rng(spec.shuffle_seed)
    perm = rng.permutation(len(head))
    r_train, r_val = spec.train_val_ratio
    n_train = len(head) * r_train // (r_train + r_val)
    train_idx = [head[i] for i in perm[:n_train]]
    val_idx = [head[i] for i in perm[n_train:]]
    return ([pairs[i] for i in train_idx],
            [pairs[i] for i in val_idx],
            [pairs[i] for i in test_idx])


def fit_scaler(train_pairs):
    """Fit per-feature mean/std on training inputs only."""
    if not train_pairs:
        raise DataError("cannot fit a scaler on an empty training set")
    stacked = np.concatenate([p.x for p in train_pairs], axis=0)
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)
    if np.any(std <= 0):
        dead = [FEATURES[i] for i in np.nonzero(std <= 0)[0]]
        raise DataError(f"zero-variance feature(s): {', '.join(dead)}")
    return Scaler(mean=mean, std=std)


def scale_pairs(scaler, pairs):
    """Return copies of the pairs with standardized inputs; targets stay raw."""
    return [replace(p, x=scaler.apply(p.x)) for p in pairs]


def write_sequence_manifest(path, rows):
    """Sequence-count manifest: one row per (bridge, split) with its range."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bridge", "split", "start", "end", "n_sequences"])
        for r in rows:
            writer.writerow(r)


def manifest_rows(bridge_id, train, val, test):
    """Table rows summarizing a split, mirroring the train/test layout."""
    def _range(groups):
        starts = [p.start for group in groups for p in group]
        if not starts:
            return "", "", 0
        return (str(min(starts).astype("datetime64[s]")),
                str(max(starts).astype("datetime64[s]")),
                sum(len(g) for g in groups))

    rows = []
    s, e, n = _range([train, val])
    rows.append([bridge_id, "train_val", s, e, n])
    s, e, n = _range([test])
    rows.append([bridge_id, "test", s, e, n])
    return rows
