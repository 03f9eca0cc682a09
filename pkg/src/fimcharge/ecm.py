"""
First-order equivalent circuit battery model (OCV source, series R0, one R1||C1 pair).

The model is written in the identifiable parameterisation

    theta = [R0, 1/C1, 1/Q, 1/(R1*C1)]

    dz/dt  = theta3 * I
    dQc/dt = -theta4 * Qc + I
    V      = OCV(z) + theta2 * Qc + theta1 * I

All quantities are SI (s, A, C, V). Charging current is positive. Both state
equations are linear, so a zero-order-hold input is integrated exactly.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import signal

logger = logging.getLogger(__name__)

SECONDS_PER_HOUR = 3600.0

# Samsung INR-18650 20R, 1/20 C OCV fit (a0..a7)
TABLE1_OCV_COEFFS = (
    3.039475779,
    9.620312047,
    -77.31237098,
    327.446181,
    -763.3324119,
    988.408671,
    -662.9843922,
    179.301862,
)

THETA4_MAX = 1.0

_extrapolation_total = 0


class ModelError(ValueError):
    """Invalid numeric input to a model operation (non-finite value, dt <= 0...)."""


class ConfigError(ValueError):
    """Invalid scenario or run configuration.

    ``path`` names the offending field, e.g. ``"charge.v_max"``.
    """

    def __init__(self, message: str, path: str = ""):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


def extrapolation_count() -> int:
    """Number of OCV evaluations made outside the polynomial's fitted range."""
    return _extrapolation_total


def _note_extrapolation(n: int) -> None:
    global _extrapolation_total
    _extrapolation_total += n
    logger.debug("OCV evaluated outside its fitted range at %d point(s)", n)


@dataclass(frozen=True)
class ThetaVector:
    """Identifiable parameters: R0 [ohm], 1/C1 [1/F], 1/Q [1/C], 1/(R1 C1) [1/s]."""

    theta1: float
    theta2: float
    theta3: float
    theta4: float

    def __post_init__(self):
        for name, value in zip(("theta1", "theta2", "theta3", "theta4"), self.as_tuple()):
            if not math.isfinite(value) or value <= 0.0:
                raise ModelError(f"{name} must be finite and > 0, got {value!r}")
        if self.theta4 >= THETA4_MAX:
            raise ModelError(f"theta4 must be < {THETA4_MAX} 1/s, got {self.theta4!r}")

    @classmethod
    def from_physical(cls, r0: float, c1: float, q_coulomb: float, r1: float) -> "ThetaVector":
        return cls(r0, 1.0 / c1, 1.0 / q_coulomb, 1.0 / (r1 * c1))

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "ThetaVector":
        a, b, c, d = (float(v) for v in values)
        return cls(a, b, c, d)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.theta1, self.theta2, self.theta3, self.theta4)

    def as_array(self) -> np.ndarray:
        return np.array(self.as_tuple(), dtype=float)

    def replace(self, **changes: float) -> "ThetaVector":
        values = dict(zip(("theta1", "theta2", "theta3", "theta4"), self.as_tuple()))
        values.update(changes)
        return ThetaVector(**values)

    @property
    def r0(self) -> float:
        return self.theta1

    @property
    def c1(self) -> float:
        return 1.0 / self.theta2

    @property
    def capacity_c(self) -> float:
        return 1.0 / self.theta3

    @property
    def r1(self) -> float:
        return self.theta2 / self.theta4


@dataclass(frozen=True)
class EcmState:
    z: float
    qc: float = 0.0
    t: float = 0.0


@dataclass(frozen=True)
class OcvPolynomial:
    """7th-order OCV(z) fit; ``coeffs[k]`` multiplies z**k."""

    coeffs: tuple[float, ...] = TABLE1_OCV_COEFFS
    valid_range: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        coeffs = tuple(float(c) for c in self.coeffs)
        object.__setattr__(self, "coeffs", coeffs)
        object.__setattr__(self, "valid_range", tuple(float(v) for v in self.valid_range))
        if len(coeffs) != 8:
            raise ConfigError(f"expected 8 coefficients, got {len(coeffs)}", "ocv.coeffs")
        if not all(math.isfinite(c) for c in coeffs):
            raise ConfigError("coefficients must be finite", "ocv.coeffs")
        lo, hi = self.valid_range
        if not lo < hi:
            raise ConfigError("valid_range must satisfy lo < hi", "ocv.valid_range")
        for z in (lo, hi):
            v = _horner(coeffs, z)
            if not 2.0 <= v <= 5.0:
                raise ConfigError(f"OCV({z}) = {v:.4f} V outside the 2-5 V sanity band",
                                  "ocv.coeffs")

    @property
    def slope_coeffs(self) -> tuple[float, ...]:
        return tuple(k * a for k, a in enumerate(self.coeffs) if k > 0)


def _horner(coeffs: Sequence[float], z):
    acc = 0.0 * z
    for a in reversed(coeffs):
        acc = acc * z + a
    return acc


def _check_soc(ocv: OcvPolynomial, z):
    z_arr = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z_arr)):
        raise ModelError("SOC must be finite")
    lo, hi = ocv.valid_range
    n_out = int(np.count_nonzero((z_arr < lo) | (z_arr > hi)))
    if n_out:
        _note_extrapolation(n_out)


def ocv_eval(ocv: OcvPolynomial, z):
    """Open-circuit voltage at SOC ``z`` (scalar or array), Horner evaluation."""
    _check_soc(ocv, z)
    return _horner(ocv.coeffs, z if np.ndim(z) == 0 else np.asarray(z, dtype=float))


def ocv_slope(ocv: OcvPolynomial, z):
    """dOCV/dz at ``z``."""
    _check_soc(ocv, z)
    return _horner(ocv.slope_coeffs, z if np.ndim(z) == 0 else np.asarray(z, dtype=float))


def terminal_voltage(theta: ThetaVector, state: EcmState, i: float, ocv: OcvPolynomial) -> float:
    return ocv_eval(ocv, state.z) + theta.theta2 * state.qc + theta.theta1 * i


def rc_factors(theta4: float, dt: float) -> tuple[float, float]:
    """Exact ZOH discretisation of dQc/dt = -theta4 Qc + I: (decay, input gain)."""
    decay = math.exp(-theta4 * dt)
    gain = -math.expm1(-theta4 * dt) / theta4
    return decay, gain


def step(theta: ThetaVector, state: EcmState, i: float, dt: float) -> EcmState:
    if not dt > 0.0:
        raise ModelError(f"dt must be > 0, got {dt!r}")
    decay, gain = rc_factors(theta.theta4, dt)
    return EcmState(
        z=state.z + theta.theta3 * i * dt,
        qc=state.qc * decay + i * gain,
        t=state.t + dt,
    )


@dataclass(frozen=True)
class CurrentProfile:
    """Piecewise-constant current: ``values[k]`` is held on [k*dt_seg, (k+1)*dt_seg)."""

    dt_seg: float
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float).reshape(-1)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        if not self.dt_seg > 0.0:
            raise ModelError(f"dt_seg must be > 0, got {self.dt_seg!r}")
        if values.size == 0:
            raise ModelError("profile has no segments")

    @classmethod
    def constant(cls, current: float, duration: float, dt_seg: float) -> "CurrentProfile":
        n = int(round(duration / dt_seg))
        return cls(dt_seg, np.full(n, float(current)))

    @property
    def duration(self) -> float:
        return self.dt_seg * self.values.size

    def __add__(self, other: "CurrentProfile") -> "CurrentProfile":
        if other.dt_seg != self.dt_seg or other.values.size != self.values.size:
            raise ModelError("profiles must share the segment grid")
        return CurrentProfile(self.dt_seg, self.values + other.values)

    def scaled(self, factor: float) -> "CurrentProfile":
        return CurrentProfile(self.dt_seg, self.values * factor)

    def check_bounds(self, i_min: float, i_max: float) -> None:
        if np.any(self.values < i_min) or np.any(self.values > i_max):
            raise ModelError(f"profile current outside [{i_min}, {i_max}] A")


def substeps(dt_outer: float, dt_inner: float) -> int:
    """Integer ratio dt_outer/dt_inner, or raise if it is not (close to) integral."""
    ratio = dt_outer / dt_inner
    n = int(round(ratio))
    if n < 1 or abs(ratio - n) > 1e-9 * max(1.0, ratio):
        raise ConfigError(f"{dt_inner} s does not divide {dt_outer} s")
    return n


@dataclass(frozen=True)
class ScenarioConfig:
    nominal_theta: ThetaVector
    true_theta: ThetaVector
    ocv: OcvPolynomial = field(default_factory=OcvPolynomial)
    q_nominal_c: float = 7200.0
    t_f: float = 1800.0
    dt_sim: float = 1.0
    i_min: float = -6.0
    i_max: float = 6.0
    v_max: float = 4.3
    sigma_v: float = 0.005
    z0: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("q_nominal_c", "t_f", "dt_sim"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0.0):
                raise ConfigError(f"must be finite and > 0, got {value!r}", name)
        if not self.i_min < 0.0 < self.i_max:
            raise ConfigError("need i_min < 0 < i_max", "i_min/i_max")
        if not self.sigma_v >= 0.0:
            raise ConfigError("must be >= 0", "sigma_v")
        if not 0.0 <= self.z0 < 1.0:
            raise ConfigError("must satisfy 0 <= z0 < 1", "z0")
        v_full = ocv_eval(self.ocv, 1.0)
        if not self.v_max > v_full:
            raise ConfigError(f"v_max must exceed OCV(1) = {v_full:.4f} V", "v_max")
        substeps(self.t_f, self.dt_sim)

    @property
    def n_steps(self) -> int:
        return substeps(self.t_f, self.dt_sim)

    @property
    def t_grid(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt_sim

    def initial_state(self) -> EcmState:
        return EcmState(z=self.z0, qc=0.0, t=0.0)

    def replace(self, **changes) -> "ScenarioConfig":
        from dataclasses import replace

        return replace(self, **changes)


def profile_on_grid(profile: CurrentProfile, dt_sim: float, n_steps: int) -> np.ndarray:
    """Per-integration-step currents for the first ``n_steps`` steps of ``profile``."""
    per_seg = substeps(profile.dt_seg, dt_sim)
    if profile.values.size * per_seg < n_steps:
        raise ConfigError(
            f"profile covers {profile.duration} s, shorter than the {n_steps * dt_sim} s horizon",
            "profile",
        )
    return np.repeat(profile.values, per_seg)[:n_steps]


def rollout(theta: ThetaVector, currents: np.ndarray, dt: float, z0: float = 0.0, qc0: float = 0.0):
    """States on the step grid for per-step currents (last axis is time).

    Returns ``(z, qc)`` with one more sample than ``currents`` along the last axis.
    Works on stacked batches, e.g. a GA population of shape (P, N).
    """
    currents = np.asarray(currents, dtype=float)
    pad = [(0, 0)] * (currents.ndim - 1)
    charge = np.concatenate([np.zeros(currents.shape[:-1] + (1,)), np.cumsum(currents, axis=-1) * dt],
                            axis=-1)
    z = z0 + theta.theta3 * charge
    decay, gain = rc_factors(theta.theta4, dt)
    # qc[k] = decay*qc[k-1] + gain*i[k-1]
    zi = np.full(currents.shape[:-1] + (1,), float(qc0))
    qc, _ = signal.lfilter([0.0, gain], [1.0, -decay], np.pad(currents, pad + [(0, 1)]), axis=-1,
                           zi=zi)
    return z, qc


def held_currents(currents: np.ndarray) -> np.ndarray:
    """Append the last current so voltages can be read at the final grid point too."""
    currents = np.asarray(currents, dtype=float)
    return np.concatenate([currents, currents[..., -1:]], axis=-1)


def voltage_on_grid(theta: ThetaVector, ocv: OcvPolynomial, z, qc, currents_held) -> np.ndarray:
    return ocv_eval(ocv, z) + theta.theta2 * qc + theta.theta1 * currents_held


@dataclass(frozen=True)
class Trajectory:
    t: np.ndarray
    i: np.ndarray
    z: np.ndarray
    qc: np.ndarray
    v: np.ndarray

    CSV_HEADER = ("t", "i", "z", "qc", "v")

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.CSV_HEADER)
            for row in zip(self.t, self.i, self.z, self.qc, self.v):
                writer.writerow([repr(float(x)) for x in row])


def simulate(theta: ThetaVector, profile: CurrentProfile, cfg: ScenarioConfig) -> Trajectory:
    """Roll the model out over [0, t_f] on the dt_sim grid.

    Voltage at grid point k uses the state at t_k and the current of the step
    starting at t_k; at t_f the last current is held.
    """
    currents = profile_on_grid(profile, cfg.dt_sim, cfg.n_steps)
    z, qc = rollout(theta, currents, cfg.dt_sim, z0=cfg.z0)
    i_held = held_currents(currents)
    v = voltage_on_grid(theta, cfg.ocv, z, qc, i_held)
    return Trajectory(t=cfg.t_grid, i=i_held, z=z, qc=qc, v=v)


def voltage_caps(currents: np.ndarray, dt_seg: float, dt_sim: float, theta: ThetaVector,
                 ocv: OcvPolynomial, v_limit: float, i_min: float, i_max: float,
                 z_start=0.0, qc_start=0.0, check_end: bool = True, iters: int = 12):
    """Cap segment currents so that V <= v_limit at every dt_sim grid point.

    ``currents`` has shape (P, n_seg). Segments are processed in time order so
    each cap sees the already-capped history. Within a segment the grid points
    are the n substep starts; ``check_end`` adds the segment end (with the same
    current held) for the last segment. The cap is the root of the worst-case
    excess in the current, found by Newton's method inside a bracket whose lower
    end stays feasible.

    Returns ``(capped, caps)``; ``caps`` are the per-segment maxima given the capped history.
    """
    currents = np.atleast_2d(np.asarray(currents, dtype=float))
    p, n_seg = currents.shape
    n = substeps(dt_seg, dt_sim)
    s = np.arange(n + 1) * dt_sim
    decay = np.exp(-theta.theta4 * s)
    gain = -np.expm1(-theta.theta4 * s) / theta.theta4
    rows = np.arange(p)
    out = currents.copy()
    caps = np.empty_like(currents)
    z = np.broadcast_to(np.asarray(z_start, dtype=float), (p,)).copy()
    qc = np.broadcast_to(np.asarray(qc_start, dtype=float), (p,)).copy()

    def excess(cur, upto):
        zs = z[:, None] + theta.theta3 * cur[:, None] * s[None, :upto]
        v = (_horner(ocv.coeffs, zs)
             + theta.theta2 * (qc[:, None] * decay[None, :upto] + cur[:, None] * gain[None, :upto]))
        k = np.argmax(v, axis=1)
        alpha = _horner(ocv.slope_coeffs, zs[rows, k])
        dv = alpha * theta.theta3 * s[k] + theta.theta2 * gain[k] + theta.theta1
        return v[rows, k] + theta.theta1 * cur - v_limit, dv

    for j in range(n_seg):
        upto = n + 1 if (check_end and j == n_seg - 1) else n
        lo = np.full(p, float(i_min))
        hi = np.full(p, float(i_max))
        f_hi, d_hi = excess(hi, upto)
        x, f, d = hi.copy(), f_hi, d_hi
        active = f_hi > 0
        for _ in range(iters):
            if not np.any(active):
                break
            step = np.divide(f, d, out=np.full_like(f, np.inf), where=d > 0)
            nxt = x - step
            nxt = np.where((nxt > lo) & (nxt < hi), nxt, 0.5 * (lo + hi))
            x = np.where(active, nxt, x)
            f, d = excess(x, upto)
            feasible = f <= 0
            lo = np.where(active & feasible, x, lo)
            hi = np.where(active & ~feasible, x, hi)
            active = active & (np.abs(f) > 1e-12)
        # Newton usually approaches the root from the infeasible side
        trial = x - 1e-9
        f_trial, _ = excess(trial, upto)
        lo = np.where(f_trial <= 0, np.maximum(lo, trial), lo)
        cap = np.where(f_hi <= 0, float(i_max), lo)
        caps[:, j] = cap
        out[:, j] = np.minimum(out[:, j], cap)
        cur = out[:, j]
        z = z + theta.theta3 * cur * dt_seg
        qc = qc * decay[n] + cur * gain[n]
    return out, caps
