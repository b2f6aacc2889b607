"""Hydraulic equations for pier scour, latent calibration variables, and
the scouring-episode mask.

All equations are written against plain arithmetic operators plus the
dual-mode ``exp``/``tanh``/``sigmoid``/``clamp`` helpers from ``autodiff``,
so the same code path serves three callers: scalar evaluation (standalone
prediction), vectorized numpy evaluation (episode replay), and autodiff
tensors (training, where the latent variables carry gradients).

Units are SI throughout: elevations and depths in meters, discharge in
m³/s, velocity in m/s, time in hours.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import DomainError, Parameter, Tensor

GRAVITY = 9.81  # m/s²
EPS_FLOW_DEPTH = 1e-3  # m; below sensor resolution, guards 1/y1 terms
EPS_TIME_LAG = 1e-6  # h; T_L sits in a denominator
P2_FLOOR = 1e-3  # lower clamp for the flow-area ratio

VARIANTS = ("hec18", "td", "gtd")

# Raw value whose tanh is 0.99. Used as the default start for the area
# ratio p2 and the decay rate p3: a zero start is useless for both (p2
# would sit in the clamp's dead zone with no gradient, and p1·p3 = 0 is a
# stationary point of the time-dependent loss), while a saturated start
# keeps them near their physical default of 1 and lets the optimizer move
# them only under strong evidence.
RAW_NEAR_ONE = float(np.arctanh(0.99))

ATTRS_HEADER = ["id", "as_built_elevation_m", "channel_width_m", "pier_width_m",
                "pier_length_m", "attack_angle_deg", "k1", "k2", "k3"]


@dataclass(frozen=True)
class BridgeAttributes:
    """Static pier/channel record for one bridge."""

    bridge_id: str
    as_built_elevation: float  # m
    channel_width: float       # m
    pier_width: float          # m
    pier_length: float         # m
    attack_angle: float        # degrees
    k1: float                  # pier nose shape correction
    k2: float                  # attack angle correction
    k3: float                  # bed condition correction
    g: float = GRAVITY

    def __post_init__(self):
        if self.pier_width <= 0 or self.channel_width <= 0:
            raise ValueError(f"bridge {self.bridge_id}: pier and channel width "
                             "must be positive")
        if self.k1 * self.k2 * self.k3 <= 0:
            raise ValueError(f"bridge {self.bridge_id}: correction factors must "
                             "have positive product")

    @property
    def correction(self):
        return self.k1 * self.k2 * self.k3


def load_bridge_attributes(path):
    """Read the bridge attribute table; returns id -> BridgeAttributes."""
    out = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ATTRS_HEADER:
            raise ValueError(f"bridge attribute file {path}: expected header "
                             f"{','.join(ATTRS_HEADER)}")
        for row in reader:
            if not row:
                continue
            out[row[0]] = BridgeAttributes(
                bridge_id=row[0],
                as_built_elevation=float(row[1]),
                channel_width=float(row[2]),
                pier_width=float(row[3]),
                pier_length=float(row[4]),
                attack_angle=float(row[5]),
                k1=float(row[6]), k2=float(row[7]), k3=float(row[8]),
            )
    return out


def write_bridge_attributes(path, attrs):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ATTRS_HEADER)
        for a in attrs:
            writer.writerow([a.bridge_id, repr(a.as_built_elevation),
                             repr(a.channel_width), repr(a.pier_width),
                             repr(a.pier_length), repr(a.attack_angle),
                             repr(a.k1), repr(a.k2), repr(a.k3)])


class ConstrainedParams(NamedTuple):
    """Calibration values after the constraint transforms."""

    p1: object
    p2: object
    p3: object
    t_l: object
    alpha: object
    beta: object


@dataclass
class LatentParams:
    """Raw, unconstrained calibration variables.

    Fields may be floats (standalone evaluation) or scalar autodiff tensors
    (training). ``constrain`` maps them to their physical ranges.
    """

    variant: str
    m_in: int
    m_out: int
    raw_p1: object = 0.0
    raw_p2: object = RAW_NEAR_ONE
    raw_p3: object = RAW_NEAR_ONE
    raw_tl: object = 0.0
    raw_alpha: object = 0.0
    raw_beta: object = 0.0
    p1_unbounded: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown equation variant {self.variant!r}")

    @classmethod
    def trainable(cls, variant, m_in, m_out, p1_unbounded=False):
        """Build latent variables as gradient-carrying tensors.

        Returns (params, parameter list); only the fields the variant
        actually uses become trainable.
        """
        used = {
            "hec18": ("raw_p1", "raw_p2"),
            "td": ("raw_p1", "raw_p2", "raw_p3", "raw_tl"),
            "gtd": ("raw_p1", "raw_tl", "raw_alpha", "raw_beta"),
        }[variant]
        params = cls(variant=variant, m_in=m_in, m_out=m_out,
                     p1_unbounded=p1_unbounded)
        plist = []
        for name in used:
            t = Tensor(getattr(params, name), requires_grad=True)
            setattr(params, name, t)
            plist.append(Parameter(f"latent.{name}", t))
        return params, plist


def _value(x):
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x)


def constrain(params):
    """Map raw calibration variables to their admissible ranges.

    p1, p2, p3 pass through tanh (p1 optionally left raw); T_L is a
    sigmoid scaled to [0, 2·(m_in + m_out)] hours; alpha and beta stay
    unconstrained. p2 is clamped to [P2_FLOOR, 1] before use as a
    flow-area ratio, and is fixed at 1 for the site-agnostic variant,
    where it is not separately identifiable from p1.
    """
    p1 = params.raw_p1 if params.p1_unbounded else ad.tanh(params.raw_p1)
    if params.variant == "gtd":
        p2 = 1.0
    else:
        p2 = ad.clamp(ad.tanh(params.raw_p2), P2_FLOOR, 1.0)
    p3 = ad.tanh(params.raw_p3)
    t_l = (2.0 * (params.m_in + params.m_out)) * ad.sigmoid(params.raw_tl)
    return ConstrainedParams(p1=p1, p2=p2, p3=p3, t_l=t_l,
                             alpha=params.raw_alpha, beta=params.raw_beta)


def _constrained(params):
    if isinstance(params, ConstrainedParams):
        return params
    return constrain(params)


def flow_depth(e_stage, e_ref):
    """Flow depth upstream of the pier: stage elevation minus reference."""
    return e_stage - e_ref


def scour_depth(e_ref, e_bed):
    """Scour depth below the reference level; negative while filling."""
    return e_ref - e_bed


def velocity(q, p2, channel_width, y1):
    """Mean approach velocity V = q / (p2 · L · y1) in m/s."""
    if float(np.min(_value(p2))) <= 0:
        raise DomainError("velocity", "flow-area ratio p2 must be positive")
    if channel_width <= 0:
        raise DomainError("velocity", "channel width must be positive")
    if float(np.min(_value(y1))) <= EPS_FLOW_DEPTH:
        raise DomainError("velocity", f"degenerate flow depth (<= {EPS_FLOW_DEPTH} m)")
    return q / (p2 * channel_width * y1)


def hec18_max_scour(y1, v, bridge):
    """HEC-18 equilibrium pier-scour depth in meters.

    y_s = 2.0 · a · K1·K2·K3 · (y1/a)^0.35 · Fr^0.43 with the pier Froude
    number Fr = V / sqrt(g·y1).
    """
    if float(np.min(_value(y1))) <= 0:
        raise DomainError("hec18_max_scour", "flow depth must be positive")
    if float(np.min(_value(v))) < 0:
        raise DomainError("hec18_max_scour", "velocity must be nonnegative")
    froude = v / (bridge.g * y1) ** 0.5
    return (2.0 * bridge.pier_width * bridge.correction
            * (y1 / bridge.pier_width) ** 0.35 * froude ** 0.43)


def spinn_hec18(y1, q, params, bridge):
    """Calibrated HEC-18 with discharge substituted for velocity (meters).

    p1 · 2.0 · K1·K2·K3 · a^0.65 / (g^0.215 · L^0.43 · y1^0.295) · (q/p2)^0.43.
    Algebraically identical to p1 · hec18_max_scour(y1, velocity(q, p2, L, y1)).
    """
    c = _constrained(params)
    if float(np.min(_value(y1))) <= EPS_FLOW_DEPTH:
        raise DomainError("spinn_hec18", f"degenerate flow depth (<= {EPS_FLOW_DEPTH} m)")
    if float(np.min(_value(q))) < 0:
        raise DomainError("spinn_hec18", "discharge must be nonnegative")
    coeff = (2.0 * bridge.correction * bridge.pier_width ** 0.65
             / (bridge.g ** 0.215 * bridge.channel_width ** 0.43))
    return c.p1 * coeff * y1 ** -0.295 * (q / c.p2) ** 0.43


def _outer(col, row):
    """Outer product that tolerates scalars, numpy arrays, and tensors."""
    cv, rv = _value(col), _value(row)
    if cv.ndim == 0 or rv.ndim == 0:
        return col * row
    if isinstance(col, Tensor) or isinstance(row, Tensor):
        return ad.multiply(ad.reshape(col, (cv.size, 1)),
                           ad.reshape(row, (1, rv.size)))
    return np.outer(cv, rv)


def td_scour(t, y1_max, q_max, params, bridge):
    """Time-dependent scour at output step t (hours into the window).

    Equilibrium depth from the calibrated HEC-18 form evaluated at the
    window's peak-flow covariates, approached exponentially:
    y(t) = y_eq · (1 − e^(−p3·t / T_L)).
    """
    c = _constrained(params)
    if float(np.min(_value(c.t_l))) <= EPS_TIME_LAG:
        raise DomainError("td_scour", "time lag T_L must be positive")
    equilibrium = spinn_hec18(y1_max, q_max, c, bridge)
    decay = 1.0 - ad.exp(-(c.p3 / c.t_l) * t)
    return _outer(equilibrium, decay)


def _pow_var(base, exponent):
    # base**e with a possibly gradient-carrying exponent: exp(e·ln base)
    if isinstance(exponent, Tensor):
        base_v = _value(base)
        if float(np.min(base_v)) <= 0:
            raise DomainError("power", "positive base required for a free exponent")
        return ad.exp(exponent * np.log(base_v))
    return base ** exponent


def gtd_scour(t, y1_max, q_max, params):
    """Site-agnostic time-dependent scour (meters).

    y(t) = p1 · y1_max^alpha · (q_max/p2)^beta · (1 − e^(−t / T_L)),
    with p2 fixed at 1 by the constraint transform.
    """
    c = _constrained(params)
    if float(np.min(_value(c.t_l))) <= EPS_TIME_LAG:
        raise DomainError("gtd_scour", "time lag T_L must be positive")
    y1v = _value(y1_max)
    alpha_int = (not isinstance(c.alpha, Tensor)
                 and float(np.asarray(c.alpha)) == int(np.asarray(c.alpha)))
    if float(np.min(y1v)) <= 0 and not alpha_int:
        raise DomainError("gtd_scour", "flow depth must be positive for a "
                                       "non-integer exponent")
    amp = c.p1 * _pow_var(y1_max, c.alpha) * _pow_var(q_max / c.p2, c.beta)
    decay = 1.0 - ad.exp((-1.0 / c.t_l) * t)
    return _outer(amp, decay)


def episode_mask(y_s):
    """Per-timestep scouring mask and per-sequence flag.

    mask is 1 where scour depth is positive; the flag is 1 iff any step in
    the sequence is positive (used to drop pure filling sequences from the
    physics loss). Accepts [T] or [B, T]; NaNs count as not scouring.
    """
    y = np.asarray(y_s, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        mask = (y > 0.0).astype(np.float64)
    flag = (mask.max(axis=-1) > 0).astype(np.float64) if y.size else np.float64(0)
    return mask, flag
