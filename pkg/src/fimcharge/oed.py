"""Offline D-optimal charging design by genetic algorithm.

Decision variables are the ZOH segment currents over [0, t_f]. Current bounds
are enforced by clipping every gene, full charge at t_f and the voltage ceiling
by quadratic penalties on the log-det fitness. With ``GaConfig.repair`` on, each
new individual is also pushed onto the feasible set (voltage and SOC caps, then
a charge rebalance) before it is scored, and the repaired genes replace the
originals.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ecm import (
    ConfigError,
    CurrentProfile,
    ModelError,
    ScenarioConfig,
    ThetaVector,
    held_currents,
    simulate,
    substeps,
    voltage_caps,
    voltage_on_grid,
)
from .sensitivity import assemble_fim, d_optimality, fim_from_sensitivities, log_det, sensitivity_grid

logger = logging.getLogger(__name__)


class InfeasibleError(ValueError):
    pass


@dataclass(frozen=True)
class GaConfig:
    population: int = 50
    generations: int = 200
    crossover_rate: float = 0.9
    mutation_rate: float = 0.1
    mutation_sigma: float = 0.1
    elitism: int = 2
    tournament_size: int = 3
    seed: int = 0
    n_segments: int = 60
    repair: bool = True
    repair_rounds: int = 40
    v_margin: float = 1e-4

    def __post_init__(self):
        if self.population < 2:
            raise ConfigError("must be >= 2", "ga.population")
        if self.generations < 0:
            raise ConfigError("must be >= 0", "ga.generations")
        for name in ("crossover_rate", "mutation_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError("must be in [0, 1]", f"ga.{name}")
        if self.mutation_sigma < 0.0:
            raise ConfigError("must be >= 0", "ga.mutation_sigma")
        if not 0 <= self.elitism < self.population:
            raise ConfigError("must satisfy 0 <= elitism < population", "ga.elitism")
        if self.tournament_size < 1:
            raise ConfigError("must be >= 1", "ga.tournament_size")
        if self.n_segments < 1:
            raise ConfigError("must be >= 1", "ga.n_segments")


@dataclass(frozen=True)
class PenaltySpec:
    w_terminal: float = 1e6
    w_voltage: float = 1e4

    def __post_init__(self):
        if self.w_terminal < 0.0 or self.w_voltage < 0.0:
            raise ConfigError("penalty weights must be >= 0", "penalty")


@dataclass
class ReferenceTrajectory:
    """Offline design decoded on the dt_sim grid (``i_off[-1]`` repeats the last segment)."""

    t_grid: np.ndarray
    z_ref: np.ndarray
    i_off: np.ndarray
    fim_det: float
    nominal_theta: ThetaVector
    dt_seg: float
    fim_log_det: float = -math.inf
    converged: bool = True
    v_max_reached: float = math.nan
    fim_sigma: float = 0.005

    def profile(self) -> CurrentProfile:
        per_seg = substeps(self.dt_seg, float(self.t_grid[1] - self.t_grid[0]))
        return CurrentProfile(self.dt_seg, self.i_off[:-1][::per_seg])

    def check(self, cfg: ScenarioConfig, tol: float = 1e-3) -> list[str]:
        """Type-invariant violations, empty when the trajectory is valid for ``cfg``."""
        problems = []
        if not np.all(np.diff(self.t_grid) > 0):
            problems.append("t_grid not strictly increasing")
        if len(self.z_ref) != len(self.t_grid) or len(self.i_off) != len(self.t_grid):
            problems.append("z_ref/i_off length differs from t_grid")
        if not abs(self.t_grid[-1] - cfg.t_f) <= 1e-9 * cfg.t_f:
            problems.append(f"t_grid ends at {self.t_grid[-1]}, expected {cfg.t_f}")
        if abs(self.z_ref[-1] - 1.0) > tol:
            problems.append(f"|z_ref(t_f) - 1| = {abs(self.z_ref[-1] - 1.0):.3g} > {tol}")
        if np.any(self.i_off < cfg.i_min) or np.any(self.i_off > cfg.i_max):
            problems.append("i_off outside current bounds")
        if not np.all(np.isfinite(self.z_ref)):
            problems.append("non-finite z_ref")
        return problems

    def to_dict(self) -> dict:
        return {
            "t_grid": self.t_grid.tolist(),
            "z_ref": self.z_ref.tolist(),
            "i_off": self.i_off.tolist(),
            "fim_det": self.fim_det,
            "fim_log_det": self.fim_log_det,
            "nominal_theta": list(self.nominal_theta.as_tuple()),
            "dt_seg": self.dt_seg,
            "converged": self.converged,
            "v_max_reached": self.v_max_reached,
            "fim_sigma": self.fim_sigma,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ReferenceTrajectory":
        return cls(
            t_grid=np.asarray(d["t_grid"], dtype=float),
            z_ref=np.asarray(d["z_ref"], dtype=float),
            i_off=np.asarray(d["i_off"], dtype=float),
            fim_det=float(d["fim_det"]),
            nominal_theta=ThetaVector.from_array(d["nominal_theta"]),
            dt_seg=float(d["dt_seg"]),
            fim_log_det=float(d.get("fim_log_det", -math.inf)),
            converged=bool(d.get("converged", True)),
            v_max_reached=float(d.get("v_max_reached", math.nan)),
            fim_sigma=float(d.get("fim_sigma", 0.005)),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "ReferenceTrajectory":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_csv(self, path: str | Path) -> None:
        rows = ["t,z_ref,i_off"]
        rows += [f"{t!r},{z!r},{i!r}" for t, z, i in
                 zip(self.t_grid.tolist(), self.z_ref.tolist(), self.i_off.tolist())]
        Path(path).write_text("\n".join(rows) + "\n")


@dataclass
class OedResult:
    reference: ReferenceTrajectory
    best_genes: np.ndarray
    best_fitness_history: list[float] = field(default_factory=list)
    mean_fitness_history: list[float] = field(default_factory=list)


def baseline_profile(cfg: ScenarioConfig, dt_seg: float = 30.0) -> CurrentProfile:
    """Constant current that exactly fills the nominal capacity by t_f."""
    current = cfg.q_nominal_c * (1.0 - cfg.z0) / cfg.t_f
    if current > cfg.i_max:
        raise InfeasibleError(
            f"full charge in {cfg.t_f} s needs {current:.3g} A > i_max = {cfg.i_max} A")
    n = substeps(cfg.t_f, dt_seg)
    return CurrentProfile(dt_seg, np.full(n, min(current, cfg.i_max)))


def fitness_batch(genes: np.ndarray, dt_seg: float, cfg: ScenarioConfig, pen: PenaltySpec,
                  theta: ThetaVector | None = None) -> np.ndarray:
    """Penalised log det(FIM) for a stack of gene vectors, shape (P, n_segments)."""
    theta = cfg.nominal_theta if theta is None else theta
    genes = np.atleast_2d(np.asarray(genes, dtype=float))
    per_seg = substeps(dt_seg, cfg.dt_sim)
    currents = np.repeat(genes, per_seg, axis=-1)[:, : cfg.n_steps]
    if currents.shape[-1] < cfg.n_steps:
        raise ConfigError("individual shorter than the horizon", "ga.n_segments")
    s, z, qc = sensitivity_grid(theta, currents, cfg.dt_sim, cfg.ocv, cfg.z0)
    fim = fim_from_sensitivities(s, cfg.dt_sim, cfg.sigma_v)
    with np.errstate(invalid="ignore", over="ignore"):
        ld = log_det(fim)
        v = voltage_on_grid(theta, cfg.ocv, z, qc, held_currents(currents))
        over = np.maximum(v - cfg.v_max, 0.0)
        penalty = (pen.w_terminal * (z[:, -1] - 1.0) ** 2
                   + pen.w_voltage * np.sum(over**2, axis=-1) * cfg.dt_sim)
    out = ld - penalty
    return np.where(np.isfinite(penalty), out, -np.inf)


def fitness(individual: CurrentProfile, cfg: ScenarioConfig, pen: PenaltySpec) -> float:
    """log det(FIM at nominal theta) minus terminal-SOC and voltage penalties; higher is better."""
    try:
        return float(fitness_batch(individual.values[None, :], individual.dt_seg, cfg, pen)[0])
    except (FloatingPointError, ModelError):
        return -math.inf


def repair(genes: np.ndarray, dt_seg: float, cfg: ScenarioConfig, theta: ThetaVector | None = None,
           v_margin: float = 1e-4, rounds: int = 40, soc_tol: float = 1e-6) -> np.ndarray:
    """Move individuals toward c2/c4 feasibility.

    Alternates a voltage and SOC cap pass with a charge rebalance that spreads the
    terminal-SOC deficit (or surplus) over segments in proportion to their
    remaining room, until every |z(t_f) - 1| <= soc_tol or ``rounds`` run out.
    Bounds are never violated.
    """
    theta = cfg.nominal_theta if theta is None else theta
    genes = np.clip(np.atleast_2d(np.array(genes, dtype=float)), cfg.i_min, cfg.i_max)
    v_limit = cfg.v_max - v_margin
    target = (1.0 - cfg.z0) / theta.theta3
    genes, caps = voltage_caps(genes, dt_seg, cfg.dt_sim, theta, cfg.ocv, v_limit,
                               cfg.i_min, cfg.i_max, cfg.z0)
    genes = soc_cap(genes, dt_seg, target)
    # the caps claw back part of every fill; scale requests by the last observed yield
    gain = np.ones(genes.shape[0])
    for _ in range(rounds):
        missing = target - genes.sum(axis=1) * dt_seg
        if np.all(np.abs(missing) * theta.theta3 <= soc_tol):
            break
        # adding charge in segment j raises every later cumulative charge too
        slack = target - np.cumsum(genes, axis=1) * dt_seg
        soc_room = np.flip(np.minimum.accumulate(np.flip(slack, axis=1), axis=1), axis=1) / dt_seg
        room_up = np.maximum(np.minimum(caps - genes, soc_room), 0.0)
        room_down = genes - cfg.i_min
        room = np.where(missing[:, None] > 0, room_up, room_down)
        total = room.sum(axis=1) * dt_seg
        frac = np.divide(np.abs(missing) * gain, total, out=np.zeros_like(total), where=total > 0)
        frac = np.minimum(frac, 1.0)
        genes = genes + np.sign(missing)[:, None] * frac[:, None] * room
        genes, caps = voltage_caps(genes, dt_seg, cfg.dt_sim, theta, cfg.ocv, v_limit,
                                   cfg.i_min, cfg.i_max, cfg.z0)
        genes = soc_cap(genes, dt_seg, target)
        moved = np.sign(missing) * (missing - (target - genes.sum(axis=1) * dt_seg))
        asked = frac * total
        yield_ = np.divide(moved, asked, out=np.ones_like(asked), where=asked > 0)
        gain = np.clip(1.0 / np.maximum(yield_, 0.05), 1.0, 20.0)
    return genes


def soc_cap(genes: np.ndarray, dt_seg: float, target: float) -> np.ndarray:
    """Lower currents so the accumulated charge never passes ``target`` (z <= 1 throughout).

    z is monotone inside a segment, so segment ends are the only places to check.
    """
    genes = np.array(genes, dtype=float)
    charge = np.zeros(genes.shape[0])
    for j in range(genes.shape[1]):
        genes[:, j] = np.minimum(genes[:, j], (target - charge) / dt_seg)
        charge = charge + genes[:, j] * dt_seg
    return genes


def _tournament(rng: np.random.Generator, fit: np.ndarray, k: int) -> int:
    entrants = rng.integers(0, fit.size, size=k)
    return int(entrants[np.argmax(fit[entrants])])


def _offspring(parents: np.ndarray, fit: np.ndarray, rng: np.random.Generator, ga: GaConfig,
               lo: float, hi: float) -> np.ndarray:
    a = parents[_tournament(rng, fit, ga.tournament_size)]
    b = parents[_tournament(rng, fit, ga.tournament_size)]
    if rng.random() < ga.crossover_rate:
        child = np.where(rng.random(a.size) < 0.5, a, b)
    else:
        child = a.copy()
    mutate = rng.random(child.size) < ga.mutation_rate
    child = child + mutate * rng.normal(0.0, ga.mutation_sigma * (hi - lo), child.size)
    return np.clip(child, lo, hi)


def _finite_mean(fit: np.ndarray) -> float:
    finite = fit[np.isfinite(fit)]
    return float(finite.mean()) if finite.size else -math.inf


def _stream(seed: int, generation: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, generation, index])


def initial_population(cfg: ScenarioConfig, ga: GaConfig) -> np.ndarray:
    dt_seg = cfg.t_f / ga.n_segments
    pop = np.empty((ga.population, ga.n_segments))
    pop[0] = baseline_profile(cfg, dt_seg).values
    for idx in range(1, ga.population):
        pop[idx] = _stream(ga.seed, 0, idx).uniform(cfg.i_min, cfg.i_max, ga.n_segments)
    return pop


def evolve(pop: np.ndarray, cfg: ScenarioConfig, ga: GaConfig, pen: PenaltySpec,
           dt_seg: float) -> OedResult:
    """Run the generation loop from a given population."""
    pop = np.clip(np.array(pop, dtype=float), cfg.i_min, cfg.i_max)
    if ga.repair:
        pop = repair(pop, dt_seg, cfg, rounds=ga.repair_rounds, v_margin=ga.v_margin)
    best_hist, mean_hist = [], []
    fit = fitness_batch(pop, dt_seg, cfg, pen)
    for gen in range(1, ga.generations + 1):
        order = np.argsort(-fit, kind="stable")
        best_hist.append(float(fit[order[0]]))
        mean_hist.append(_finite_mean(fit))
        nxt = np.empty_like(pop)
        nxt[: ga.elitism] = pop[order[: ga.elitism]]
        for idx in range(ga.elitism, ga.population):
            nxt[idx] = _offspring(pop, fit, _stream(ga.seed, gen, idx), ga, cfg.i_min, cfg.i_max)
        if ga.repair and ga.population > ga.elitism:
            nxt[ga.elitism:] = repair(nxt[ga.elitism:], dt_seg, cfg, rounds=ga.repair_rounds,
                                      v_margin=ga.v_margin)
        pop = nxt
        fit = fitness_batch(pop, dt_seg, cfg, pen)
        if gen % 50 == 0:
            logger.info("generation %d: best fitness %.6g", gen, best_hist[-1])
    best = int(np.argsort(-fit, kind="stable")[0])
    best_hist.append(float(fit[best]))
    mean_hist.append(_finite_mean(fit))
    return OedResult(reference=None, best_genes=pop[best].copy(),  # type: ignore[arg-type]
                     best_fitness_history=best_hist, mean_fitness_history=mean_hist)


def decode(genes: np.ndarray, dt_seg: float, cfg: ScenarioConfig) -> ReferenceTrajectory:
    profile = CurrentProfile(dt_seg, genes)
    traj = simulate(cfg.nominal_theta, profile, cfg)
    fim = assemble_fim(cfg.nominal_theta, profile, cfg)
    z_end = float(traj.z[-1])
    return ReferenceTrajectory(
        t_grid=traj.t,
        z_ref=traj.z,
        i_off=traj.i,
        fim_det=d_optimality(fim),
        nominal_theta=cfg.nominal_theta,
        dt_seg=dt_seg,
        fim_log_det=fim.log_det,
        converged=abs(z_end - 1.0) <= 1e-2,
        v_max_reached=float(np.max(traj.v)),
        fim_sigma=cfg.sigma_v,
    )


def design(cfg: ScenarioConfig, ga: GaConfig, pen: PenaltySpec) -> OedResult:
    """Run the GA and decode the winner; the result keeps the fitness history."""
    dt_seg = cfg.t_f / ga.n_segments
    substeps(dt_seg, cfg.dt_sim)
    result = evolve(initial_population(cfg, ga), cfg, ga, pen, dt_seg)
    result.reference = decode(result.best_genes, dt_seg, cfg)
    if not result.reference.converged:
        logger.warning("OED did not converge: z(t_f) = %.4f", result.reference.z_ref[-1])
    return result


def run_oed(cfg: ScenarioConfig, ga: GaConfig, pen: PenaltySpec) -> ReferenceTrajectory:
    """Design the D-optimal charging current and decode it into a reference trajectory."""
    return design(cfg, ga, pen).reference
