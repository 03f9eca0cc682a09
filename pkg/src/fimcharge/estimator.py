"""Bounded re-fit of the model parameters to the voltage measurements seen so far."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .ecm import ConfigError, ModelError, ScenarioConfig, ThetaVector, ocv_eval, ocv_slope, rc_factors
from .sensitivity import filter_matrices


@dataclass(frozen=True)
class EstimatorConfig:
    bounds_lo: ThetaVector
    bounds_hi: ThetaVector
    update_period: int = 1
    window: int | None = None
    fixed_mask: tuple[bool, bool, bool, bool] = (False, False, False, True)
    tol: float = 1e-10
    max_evals: int = 200
    restarts: int = 0
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.bounds_lo.as_array(), self.bounds_hi.as_array()
        if not np.all(lo < hi):
            raise ConfigError("bounds_lo must be < bounds_hi componentwise", "estimator.bounds")
        if self.update_period < 1:
            raise ConfigError("must be >= 1", "estimator.update_period")
        if self.window is not None and self.window < 1:
            raise ConfigError("must be >= 1 or null", "estimator.window")
        if len(self.fixed_mask) != 4:
            raise ConfigError("needs 4 entries", "estimator.fixed_mask")
        object.__setattr__(self, "fixed_mask", tuple(bool(m) for m in self.fixed_mask))

    @classmethod
    def around(cls, nominal: ThetaVector, rel: float = 0.5, **kwargs) -> "EstimatorConfig":
        """Box of +/- ``rel`` around ``nominal``."""
        a = nominal.as_array()
        return cls(ThetaVector.from_array(a * (1 - rel)), ThetaVector.from_array(a * (1 + rel)),
                   **kwargs)

    def contains(self, theta: ThetaVector) -> bool:
        a = theta.as_array()
        return bool(np.all(a >= self.bounds_lo.as_array()) and np.all(a <= self.bounds_hi.as_array()))


@dataclass
class MeasurementWindow:
    """Voltage samples and the currents that produced them.

    ``current[k]`` flowed over (t[k-1], t[k]] and is still flowing when
    ``v_meas[k]`` is read. Replay always starts from (z0, qc0) at t[0];
    residuals are counted from record ``fit_from`` on.
    """

    t: np.ndarray
    current: np.ndarray
    v_meas: np.ndarray
    z0: float = 0.0
    qc0: float = 0.0
    fit_from: int = 0

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.current = np.asarray(self.current, dtype=float)
        self.v_meas = np.asarray(self.v_meas, dtype=float)
        if not (self.t.shape == self.current.shape == self.v_meas.shape):
            raise ModelError("t, current and v_meas must have the same length")
        if self.t.size > 1 and not np.all(np.diff(self.t) > 0):
            raise ModelError("measurement times must be strictly increasing")

    def __len__(self) -> int:
        return self.t.size

    def last(self, n: int | None) -> "MeasurementWindow":
        if n is None or n >= len(self):
            return self
        return MeasurementWindow(self.t, self.current, self.v_meas, self.z0, self.qc0,
                                 fit_from=len(self) - n)


def replay(theta: ThetaVector, win: MeasurementWindow, ocv, with_sensitivities: bool = False):
    """Model voltage at every record time; optionally dV/dtheta at the same instants."""
    n = len(win)
    z = np.empty(n)
    qc = np.empty(n)
    charge = np.empty(n)
    x1 = np.empty(n)
    zk, qk, ck = win.z0, win.qc0, 0.0
    x = np.zeros(2)
    cache = {}
    for k in range(n):
        if k > 0:
            dt = win.t[k] - win.t[k - 1]
            i = win.current[k]
            if dt not in cache:
                cache[dt] = rc_factors(theta.theta4, dt), filter_matrices(theta.theta4, dt)
            (decay, gain), (ad, bd) = cache[dt]
            zk += theta.theta3 * i * dt
            qk = qk * decay + i * gain
            ck += i * dt
            x = ad @ x + bd * i
        z[k], qc[k], charge[k], x1[k] = zk, qk, ck, x[0]
    v = ocv_eval(ocv, z) + theta.theta2 * qc + theta.theta1 * win.current
    if not with_sensitivities:
        return v
    s = np.column_stack([win.current, qc, ocv_slope(ocv, z) * charge, -theta.theta2 * x1])
    return v, s


def voltage_residual_cost(theta_hat: ThetaVector, win: MeasurementWindow, cfg: ScenarioConfig) -> float:
    """Sum of squared voltage residuals over the fitted part of the window."""
    if len(win) == 0:
        raise ModelError("empty measurement window")
    r = (win.v_meas - replay(theta_hat, win, cfg.ocv))[win.fit_from:]
    return float(r @ r)


def update_parameters(prev_theta_hat: ThetaVector, win: MeasurementWindow, est: EstimatorConfig,
                      cfg: ScenarioConfig) -> ThetaVector:
    """Bounded least-squares refit of the free parameters, warm-started at ``prev_theta_hat``.

    Never returns a parameter set with a higher residual cost than the one it was given.
    """
    if len(win) == 0:
        return prev_theta_hat
    free = np.flatnonzero(~np.array(est.fixed_mask))
    if free.size == 0:
        return prev_theta_hat
    lo = est.bounds_lo.as_array()
    hi = est.bounds_hi.as_array()
    scale = 0.5 * (lo + hi)
    base = prev_theta_hat.as_array()

    lo_x, hi_x = lo[free] / scale[free], hi[free] / scale[free]

    def theta_of(x):
        full = base.copy()
        # x at an edge of the scaled box maps to the exact bound, not a rounded product
        val = np.clip(x * scale[free], lo[free], hi[free])
        full[free] = np.where(x <= lo_x, lo[free], np.where(x >= hi_x, hi[free], val))
        return ThetaVector.from_array(full)

    def residual(x):
        return (replay(theta_of(x), win, cfg.ocv) - win.v_meas)[win.fit_from:]

    def jac(x):
        _, s = replay(theta_of(x), win, cfg.ocv, with_sensitivities=True)
        return s[win.fit_from:, free] * scale[free]

    prev_cost = voltage_residual_cost(prev_theta_hat, win, cfg)
    if prev_cost == 0.0:
        return prev_theta_hat

    starts = [np.clip(base[free], lo[free], hi[free]) / scale[free]]
    rng = np.random.default_rng(est.seed)
    starts += [rng.uniform(lo[free], hi[free]) / scale[free] for _ in range(est.restarts)]
    best, best_cost = prev_theta_hat, prev_cost
    for x0 in starts:
        sol = optimize.least_squares(
            residual, x0, jac=jac, bounds=(lo_x, hi_x),
            method="trf", ftol=est.tol, xtol=1e-12, gtol=1e-12, max_nfev=est.max_evals,
        )
        # trf stays strictly interior; also try the point snapped onto bounds it nearly touches
        snapped = np.where(np.isclose(sol.x, lo_x, rtol=1e-7, atol=0), lo_x,
                           np.where(np.isclose(sol.x, hi_x, rtol=1e-7, atol=0), hi_x, sol.x))
        for x in (snapped, sol.x):
            cand = theta_of(x)
            cost = voltage_residual_cost(cand, win, cfg)
            if math.isfinite(cost) and cost < best_cost:
                best, best_cost = cand, cost
    return best
