"""Scenario files: one JSON document drives both the offline and the online phase.

Layout (every block and key optional, defaults in brackets)::

    {
      "battery": {
        "nominal": {"r0": 0.06, "c1": 1000.0, "q_ah": 2.0, "r1": 0.03},
        "true":    {... same keys, defaults to nominal ...}
      },
      "ocv":       {"coeffs": [a0..a7], "valid_range": [0, 1]},
      "charge":    {"t_f": 1800, "dt_sim": 1, "c_rate": 3.0 | "i_min"/"i_max",
                    "v_max": 4.3, "z0": 0.0},
      "noise":     {"sigma_v": 0.005, "seed": 0},
      "ga":        GaConfig fields,
      "penalty":   PenaltySpec fields,
      "mpc":       MpcConfig fields,
      "estimator": {"rel_bounds": 0.5 | "bounds_lo"/"bounds_hi": [4 thetas], ...}
    }

Capacities are given in A h and stored in coulombs. ``c_rate`` is relative to
the nominal capacity and gives symmetric bounds.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Any

from .ecm import SECONDS_PER_HOUR, ConfigError, OcvPolynomial, ScenarioConfig, ThetaVector
from .estimator import EstimatorConfig
from .mpc import MpcConfig
from .oed import GaConfig, PenaltySpec

BUNDLED = ("paper_s4",)

_BATTERY_KEYS = ("r0", "c1", "q_ah", "r1")
_NOMINAL = {"r0": 0.06, "c1": 1000.0, "q_ah": 2.0, "r1": 0.03}


@dataclass(frozen=True)
class RunConfig:
    scenario: ScenarioConfig
    ga: GaConfig = field(default_factory=GaConfig)
    penalty: PenaltySpec = field(default_factory=PenaltySpec)
    mpc: MpcConfig = field(default_factory=MpcConfig)
    estimator: EstimatorConfig | None = None

    def __post_init__(self):
        if self.estimator is None:
            object.__setattr__(self, "estimator", EstimatorConfig.around(self.scenario.nominal_theta))
        if not self.estimator.contains(self.scenario.nominal_theta):
            raise ConfigError("nominal theta lies outside the bounds", "estimator.bounds_lo")
        if self.mpc.dt_ctrl > self.scenario.t_f:
            raise ConfigError("control interval longer than the charge", "mpc.dt_ctrl")

    def with_seed(self, seed: int) -> "RunConfig":
        """Same run with the noise and GA seeds both set to ``seed``."""
        from dataclasses import replace

        return replace(self, scenario=self.scenario.replace(rng_seed=seed),
                       ga=replace(self.ga, seed=seed))

    @property
    def seeds(self) -> dict[str, int]:
        return {"noise": self.scenario.rng_seed, "ga": self.ga.seed, "estimator": self.estimator.seed}

    def digest(self) -> str:
        text = json.dumps(serialize(self), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()


def _number(value: Any, path: str, integer: bool = False) -> float | int:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"expected a number, got {value!r}", path)
    if integer:
        if isinstance(value, float) and not value.is_integer():
            raise ConfigError(f"expected an integer, got {value!r}", path)
        return int(value)
    if not math.isfinite(value):
        raise ConfigError(f"expected a finite number, got {value!r}", path)
    return float(value)


def _block(doc: dict, name: str, allowed, prefix: str = "") -> dict:
    path = f"{prefix}{name}"
    blk = doc.get(name, {})
    if not isinstance(blk, dict):
        raise ConfigError("expected an object", path)
    unknown = sorted(set(blk) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]!r}", f"{path}.{unknown[0]}")
    return blk


def _theta(blk: dict, path: str, base: dict) -> tuple[ThetaVector, dict]:
    vals = {k: _number(blk.get(k, base[k]), f"{path}.{k}") for k in _BATTERY_KEYS}
    for k, v in vals.items():
        if not v > 0:
            raise ConfigError(f"must be > 0, got {v!r}", f"{path}.{k}")
    try:
        theta = ThetaVector.from_physical(vals["r0"], vals["c1"], vals["q_ah"] * SECONDS_PER_HOUR,
                                          vals["r1"])
    except ValueError as exc:
        raise ConfigError(str(exc), f"{path}.r1") from None
    return theta, vals


def _dataclass_block(cls, blk: dict, path: str, ints=(), tuples=(), extra=None):
    kwargs = dict(extra or {})
    for f in fields(cls):
        if f.name not in blk:
            continue
        v = blk[f.name]
        p = f"{path}.{f.name}"
        if f.name in tuples:
            if not isinstance(v, list):
                raise ConfigError("expected a list", p)
            kwargs[f.name] = tuple(v)
        elif isinstance(f.default, bool):
            if not isinstance(v, bool):
                raise ConfigError(f"expected true/false, got {v!r}", p)
            kwargs[f.name] = v
        elif v is None and f.name == "window":  # null means the whole history
            kwargs[f.name] = None
        else:
            kwargs[f.name] = _number(v, p, integer=f.name in ints)
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(str(exc).split(": ", 1)[-1], exc.path if "." in exc.path else path) from None


_GA_INTS = ("population", "generations", "elitism", "tournament_size", "seed", "n_segments",
            "repair_rounds")


def parse_document(doc: dict) -> RunConfig:
    """Validate a scenario document and fill in defaults."""
    if not isinstance(doc, dict):
        raise ConfigError("scenario must be a JSON object", "<root>")
    top = ("battery", "ocv", "charge", "noise", "ga", "penalty", "mpc", "estimator")
    unknown = sorted(set(doc) - set(top))
    if unknown:
        raise ConfigError("unknown top-level block", unknown[0])

    bat = _block(doc, "battery", ("nominal", "true"))
    nominal, nom_vals = _theta(_block(bat, "nominal", _BATTERY_KEYS, "battery."), "battery.nominal",
                               _NOMINAL)
    true, _ = _theta(_block(bat, "true", _BATTERY_KEYS, "battery."), "battery.true", nom_vals)

    ocv_blk = _block(doc, "ocv", ("coeffs", "valid_range"))
    ocv_kw = {}
    for key in ("coeffs", "valid_range"):
        if key in ocv_blk:
            if not isinstance(ocv_blk[key], list):
                raise ConfigError("expected a list", f"ocv.{key}")
            ocv_kw[key] = tuple(_number(v, f"ocv.{key}[{n}]") for n, v in enumerate(ocv_blk[key]))
    ocv = OcvPolynomial(**ocv_kw)

    ch = _block(doc, "charge", ("t_f", "dt_sim", "c_rate", "i_min", "i_max", "v_max", "z0"))
    q_nom_c = nom_vals["q_ah"] * SECONDS_PER_HOUR
    if "c_rate" in ch:
        if "i_min" in ch or "i_max" in ch:
            raise ConfigError("give either c_rate or i_min/i_max, not both", "charge.c_rate")
        rate = _number(ch["c_rate"], "charge.c_rate")
        if not rate > 0:
            raise ConfigError("must be > 0", "charge.c_rate")
        i_max = rate * nom_vals["q_ah"]
        i_min = -i_max
    else:
        i_min = _number(ch.get("i_min", -6.0), "charge.i_min")
        i_max = _number(ch.get("i_max", 6.0), "charge.i_max")
    noise = _block(doc, "noise", ("sigma_v", "seed"))
    sc_kw = dict(
        nominal_theta=nominal,
        true_theta=true,
        ocv=ocv,
        q_nominal_c=q_nom_c,
        t_f=_number(ch.get("t_f", 1800.0), "charge.t_f"),
        dt_sim=_number(ch.get("dt_sim", 1.0), "charge.dt_sim"),
        i_min=i_min,
        i_max=i_max,
        v_max=_number(ch.get("v_max", 4.3), "charge.v_max"),
        z0=_number(ch.get("z0", 0.0), "charge.z0"),
        sigma_v=_number(noise.get("sigma_v", 0.005), "noise.sigma_v"),
        rng_seed=_number(noise.get("seed", 0), "noise.seed", integer=True),
    )
    try:
        scenario = ScenarioConfig(**sc_kw)
    except ConfigError as exc:
        where = {"sigma_v": "noise.sigma_v", "i_min/i_max": "charge.i_min"}.get(exc.path, f"charge.{exc.path}")
        raise ConfigError(str(exc).split(": ", 1)[-1], where) from None

    ga = _dataclass_block(GaConfig, _block(doc, "ga", [f.name for f in fields(GaConfig)]), "ga",
                          ints=_GA_INTS)
    pen = _dataclass_block(PenaltySpec, _block(doc, "penalty", [f.name for f in fields(PenaltySpec)]),
                           "penalty")
    mpc = _dataclass_block(MpcConfig, _block(doc, "mpc", [f.name for f in fields(MpcConfig)]), "mpc",
                           ints=("horizon_steps", "max_solver_iters"))

    est_keys = [f.name for f in fields(EstimatorConfig)] + ["rel_bounds"]
    eb = _block(doc, "estimator", est_keys)
    rel = 0.5
    if "rel_bounds" in eb:
        if "bounds_lo" in eb or "bounds_hi" in eb:
            raise ConfigError("give either rel_bounds or bounds_lo/bounds_hi", "estimator.rel_bounds")
        rel = _number(eb["rel_bounds"], "estimator.rel_bounds")
        if not 0 < rel < 1:
            raise ConfigError("must be in (0, 1)", "estimator.rel_bounds")
    bounds = {"bounds_lo": nominal.as_array() * (1 - rel), "bounds_hi": nominal.as_array() * (1 + rel)}
    for key in bounds:
        if key in eb:
            raw = eb[key]
            if not isinstance(raw, list) or len(raw) != 4:
                raise ConfigError("expected a list of 4 numbers", f"estimator.{key}")
            bounds[key] = [_number(v, f"estimator.{key}[{n}]") for n, v in enumerate(raw)]
        try:
            bounds[key] = ThetaVector.from_array(bounds[key])
        except ValueError as exc:
            raise ConfigError(str(exc), f"estimator.{key}") from None
    rest = {k: v for k, v in eb.items() if k not in ("rel_bounds", "bounds_lo", "bounds_hi")}
    mask = rest.get("fixed_mask")
    if mask is not None and not (isinstance(mask, list) and all(isinstance(m, bool) for m in mask)):
        raise ConfigError("expected a list of 4 booleans", "estimator.fixed_mask")
    if rest.get("window") is not None:
        _number(rest["window"], "estimator.window", integer=True)
    est = _dataclass_block(EstimatorConfig, rest, "estimator",
                           ints=("update_period", "window", "max_evals", "restarts", "seed"),
                           tuples=("fixed_mask",), extra=bounds)
    return RunConfig(scenario, ga, pen, mpc, est)


def _physical(theta: ThetaVector) -> dict:
    # 15 significant digits undo the 1-ulp drift of inverting the theta map
    raw = {"r0": theta.r0, "c1": theta.c1, "q_ah": theta.capacity_c / SECONDS_PER_HOUR, "r1": theta.r1}
    return {k: float(f"{v:.15g}") for k, v in raw.items()}


def serialize(run: RunConfig) -> dict:
    """Fully default-filled document; ``parse_document(serialize(r)) == r``."""
    sc = run.scenario
    est = asdict(run.estimator)
    est["bounds_lo"] = list(run.estimator.bounds_lo.as_tuple())
    est["bounds_hi"] = list(run.estimator.bounds_hi.as_tuple())
    est["fixed_mask"] = list(run.estimator.fixed_mask)
    return {
        "battery": {"nominal": _physical(sc.nominal_theta), "true": _physical(sc.true_theta)},
        "ocv": {"coeffs": list(sc.ocv.coeffs), "valid_range": list(sc.ocv.valid_range)},
        "charge": {"t_f": sc.t_f, "dt_sim": sc.dt_sim, "i_min": sc.i_min, "i_max": sc.i_max,
                   "v_max": sc.v_max, "z0": sc.z0},
        "noise": {"sigma_v": sc.sigma_v, "seed": sc.rng_seed},
        "ga": asdict(run.ga),
        "penalty": asdict(run.penalty),
        "mpc": asdict(run.mpc),
        "estimator": est,
    }


def resolve(path: str | Path) -> Path | Any:
    """A file path, or the name of a bundled scenario (``paper_s4``)."""
    p = Path(path)
    if p.exists():
        return p
    name = p.name.removesuffix(".scenario")
    if name in BUNDLED:
        return resources.files("fimcharge") / "data" / f"{name}.scenario"
    raise ConfigError(f"no such scenario file: {path}", "<file>")


def load_run_config(path: str | Path) -> RunConfig:
    src = resolve(path)
    try:
        doc = json.loads(src.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"not valid JSON ({exc.msg}, line {exc.lineno})", "<file>") from None
    return parse_document(doc)


def parse_scenario(path: str | Path) -> ScenarioConfig:
    return load_run_config(path).scenario
