"""Output sensitivities dV/dtheta and the Fisher information matrix they induce.

Under Gaussian white voltage noise of std ``sigma`` the information matrix is

    F = (1/sigma^2) * integral of S(t) S(t)^T dt,   S_j = dV/dtheta_j

with

    S1 = I
    S2 = Qc
    S3 = OCV'(z) * integral_0^t I
    S4 = theta2 * dQc/dtheta4

dQc/dtheta4 is the output of the filter -1/(s + theta4)^2 driven by I. It is
realised as a two-state controllable canonical system

    x1' = x2,   x2' = -theta4^2 x1 - 2 theta4 x2 + I,   dQc/dtheta4 = -x1

and, like the battery model, discretised exactly for piecewise-constant I.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import signal

from .ecm import (
    ConfigError,
    CurrentProfile,
    EcmState,
    ModelError,
    OcvPolynomial,
    ScenarioConfig,
    ThetaVector,
    held_currents,
    ocv_slope,
    profile_on_grid,
    rollout,
)


@dataclass(frozen=True)
class SensitivityState:
    charge_integral: float = 0.0
    x1: float = 0.0
    x2: float = 0.0
    t: float = 0.0


@dataclass(frozen=True)
class SensitivityVector:
    s1: float
    s2: float
    s3: float
    s4: float

    def as_array(self) -> np.ndarray:
        return np.array([self.s1, self.s2, self.s3, self.s4])


@dataclass(frozen=True)
class FimMatrix:
    m: np.ndarray
    sigma: float

    @property
    def det(self) -> float:
        return d_optimality(self)

    @property
    def log_det(self) -> float:
        return log_det(self.m)


def filter_matrices(theta4: float, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Exact ZOH (Ad, Bd) of the double-pole canonical filter, in closed form."""
    a, h = theta4, dt
    p = math.exp(-a * h)
    ad = p * np.array([[1.0 + a * h, h], [-a * a * h, 1.0 - a * h]])
    # 1 - e^{-ah}(1 + ah), written to avoid cancellation for small ah
    bd1 = (-math.expm1(-a * h) - a * h * p) / (a * a)
    bd = np.array([bd1, h * p])
    return ad, bd


def sensitivity_step(theta: ThetaVector, sstate: SensitivityState, ecm: EcmState, i: float,
                     dt: float) -> SensitivityState:
    if not dt > 0.0:
        raise ModelError(f"dt must be > 0, got {dt!r}")
    if not math.isclose(sstate.t, ecm.t, rel_tol=1e-12, abs_tol=1e-9):
        raise ModelError(f"sensitivity time {sstate.t} != model time {ecm.t}")
    ad, bd = filter_matrices(theta.theta4, dt)
    x = ad @ np.array([sstate.x1, sstate.x2]) + bd * i
    return SensitivityState(
        charge_integral=sstate.charge_integral + i * dt,
        x1=float(x[0]),
        x2=float(x[1]),
        t=sstate.t + dt,
    )


def sensitivities(theta: ThetaVector, sstate: SensitivityState, ecm: EcmState, i: float,
                  ocv: OcvPolynomial, z0: float) -> SensitivityVector:
    # z0 is implied by charge_integral (z - z0 = theta3 * integral); kept for the call contract
    if not math.isclose(sstate.t, ecm.t, rel_tol=1e-12, abs_tol=1e-9):
        raise ModelError(f"sensitivity time {sstate.t} != model time {ecm.t}")
    return SensitivityVector(
        s1=float(i),
        s2=float(ecm.qc),
        s3=float(ocv_slope(ocv, ecm.z) * sstate.charge_integral),
        s4=float(theta.theta2 * -sstate.x1),
    )


def filter_rollout(theta4: float, currents: np.ndarray, dt: float) -> np.ndarray:
    """x1 on the step grid (one more sample than ``currents``), batched on leading axes."""
    ad, bd = filter_matrices(theta4, dt)
    p = math.exp(-theta4 * dt)
    # x1 transfer: (bd1 z + ad12 bd2 - ad22 bd1) / (z - p)^2
    num = [0.0, bd[0], ad[0, 1] * bd[1] - ad[1, 1] * bd[0]]
    den = [1.0, -2.0 * p, p * p]
    currents = np.asarray(currents, dtype=float)
    pad = [(0, 0)] * (currents.ndim - 1) + [(0, 1)]
    return signal.lfilter(num, den, np.pad(currents, pad), axis=-1)


def sensitivity_grid(theta: ThetaVector, currents: np.ndarray, dt: float, ocv: OcvPolynomial,
                     z0: float = 0.0):
    """Sensitivities at every grid point of a rollout.

    Returns ``(S, z, qc)`` where ``S`` has shape ``currents.shape[:-1] + (N+1, 4)``;
    the sample at t_f uses the last current held.
    """
    currents = np.asarray(currents, dtype=float)
    z, qc = rollout(theta, currents, dt, z0=z0)
    # accumulated charge directly, not (z - z0)/theta3
    charge = np.concatenate(
        [np.zeros(currents.shape[:-1] + (1,)), np.cumsum(currents, axis=-1) * dt], axis=-1)
    x1 = filter_rollout(theta.theta4, currents, dt)
    s = np.stack(
        [
            held_currents(currents),
            qc,
            ocv_slope(ocv, z) * charge,
            -theta.theta2 * x1,
        ],
        axis=-1,
    )
    return s, z, qc


def fim_from_sensitivities(s: np.ndarray, dt: float, sigma: float) -> np.ndarray:
    """Left-endpoint quadrature over all but the final grid sample."""
    s = s[..., :-1, :]
    m = np.einsum("...ki,...kj->...ij", s, s) * (dt / sigma**2)
    return 0.5 * (m + np.swapaxes(m, -1, -2))


def assemble_fim(theta: ThetaVector, profile: CurrentProfile, cfg: ScenarioConfig) -> FimMatrix:
    if not cfg.sigma_v > 0.0:
        raise ConfigError("FIM needs sigma_v > 0", "sigma_v")
    currents = profile_on_grid(profile, cfg.dt_sim, cfg.n_steps)
    s, _, _ = sensitivity_grid(theta, currents, cfg.dt_sim, cfg.ocv, cfg.z0)
    return FimMatrix(fim_from_sensitivities(s, cfg.dt_sim, cfg.sigma_v), cfg.sigma_v)


def log_det(m: np.ndarray) -> float | np.ndarray:
    """log det via LU pivots; -inf for singular (or indefinite) matrices.

    Accepts a stack of matrices.
    """
    sign, logabs = np.linalg.slogdet(m)
    return np.where(sign > 0, logabs, -np.inf) if np.ndim(sign) else (
        float(logabs) if sign > 0 else -math.inf)


def d_optimality(fim: FimMatrix | np.ndarray) -> float:
    """det of the information matrix (LU-based); 0 for a singular matrix."""
    m = fim.m if isinstance(fim, FimMatrix) else np.asarray(fim)
    sign, logabs = np.linalg.slogdet(m)
    if sign == 0:
        return 0.0
    return float(sign * math.exp(logabs))
