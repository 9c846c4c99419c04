"""Scenario configuration: YAML schema, validation, deterministic hashing.

Unknown keys are rejected (drift protection); every section has working
defaults, so the empty config describes a valid 2x2 scenario.  The config
hash feeds run manifests and result caching.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

import yaml

from . import timing
from .ead import LatticeSpec, QueryRanges
from .energy import EVParams, ICEVParams
from .marl import MarlConfig
from .network import build_grid
from .sim import DemandConfig, KraussParams


class ConfigError(ValueError):
    pass


def _apply_section(cls, data: dict, section: str):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    return cls(**data)


@dataclass(frozen=True)
class NetworkConfig:
    rows: int = 2
    cols: int = 2
    link_length_m: float = 300.0
    speed_limit_mps: float = 13.9
    detection_range_m: float = 150.0


@dataclass(frozen=True)
class SignalConfig:
    t_cyc_base: float = 60.0
    t_min: float = 4.0
    t_switch: float = 3.0
    webster_window_s: float = 400.0
    saturation_flow_veh_s: float = 0.5
    fixed_greens: tuple = (12.0, 12.0, 12.0, 12.0)


@dataclass(frozen=True)
class SimSection:
    dt: float = 1.0
    max_drain_s: float = 1800.0
    collision_check: bool = True


@dataclass(frozen=True)
class EadConfig:
    dv: float = 0.5
    a_min: float = -3.0
    a_max: float = 2.0
    kappa: float = 0.1
    departure_distance_m: float = 50.0
    replan_threshold_s: float = 2.0
    max_failures: int = 3
    history_depth: int = 1
    powertrain: str = "icev"
    dataset_min: int = 10_000
    query_t_start: tuple = (2.0, 60.0)
    query_width: tuple = (8.0, 45.0)
    query_distance: tuple = (30.0, 150.0)


@dataclass
class ScenarioConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    krauss: KraussParams = field(default_factory=KraussParams)
    demand: dict = field(default_factory=dict)  # DemandConfig fields + cav range
    signal: SignalConfig = field(default_factory=SignalConfig)
    sim: SimSection = field(default_factory=SimSection)
    energy: dict = field(default_factory=dict)
    ead: EadConfig = field(default_factory=EadConfig)
    marl: MarlConfig = field(default_factory=MarlConfig)

    # -- construction -------------------------------------------------------
    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        known = {"network", "krauss", "demand", "signal", "sim", "energy",
                 "ead", "marl"}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown top-level sections: {sorted(unknown)}")
        cfg = cls()
        if "network" in data:
            cfg.network = _apply_section(NetworkConfig, data["network"], "network")
        if "krauss" in data:
            cfg.krauss = _apply_section(KraussParams, data["krauss"], "krauss")
        if "signal" in data:
            sig = dict(data["signal"])
            if "fixed_greens" in sig:
                sig["fixed_greens"] = tuple(sig["fixed_greens"])
            cfg.signal = _apply_section(SignalConfig, sig, "signal")
        if "sim" in data:
            cfg.sim = _apply_section(SimSection, data["sim"], "sim")
        if "ead" in data:
            ead = dict(data["ead"])
            for key in ("query_t_start", "query_width", "query_distance"):
                if key in ead:
                    ead[key] = tuple(ead[key])
            cfg.ead = _apply_section(EadConfig, ead, "ead")
        if "marl" in data:
            m = dict(data["marl"])
            if "hidden" in m:
                m["hidden"] = tuple(m["hidden"])
            cfg.marl = _apply_section(MarlConfig, m, "marl")
        if "energy" in data:
            e = data["energy"]
            unknown = set(e) - {"icev", "ev"}
            if unknown:
                raise ConfigError(f"unknown keys in [energy]: {sorted(unknown)}")
            cfg.energy = {k: dict(v) for k, v in e.items()}
            if "icev" in cfg.energy:
                _apply_section(ICEVParams, cfg.energy["icev"], "energy.icev")
            if "ev" in cfg.energy:
                _apply_section(EVParams, cfg.energy["ev"], "energy.ev")
        if "demand" in data:
            d = dict(data["demand"])
            known_demand = {"rate_veh_s", "turn_probs", "cav_fraction",
                            "ev_fraction", "duration_s", "modulation_amp",
                            "modulation_period_s"}
            unknown = set(d) - known_demand
            if unknown:
                raise ConfigError(f"unknown keys in [demand]: {sorted(unknown)}")
            cfg.demand = d
        cfg.validate()
        return cfg

    @classmethod
    def from_yaml(cls, path) -> "ScenarioConfig":
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
        if not isinstance(data, dict):
            raise ConfigError("config root must be a mapping")
        return cls.from_dict(data)

    # -- derived builders -----------------------------------------------------
    def validate(self) -> None:
        timing.validate_timing_config(self.signal.t_cyc_base, self.signal.t_min,
                                      self.signal.t_switch, self.sim.dt)
        self.build_network()
        self.demand_config()

    def build_network(self):
        n = self.network
        return build_grid(n.rows, n.cols, n.link_length_m, n.speed_limit_mps,
                          n.detection_range_m)

    def cav_fraction_spec(self):
        """Scalar, or (lo, hi) for random-per-episode training draws."""
        raw = self.demand.get("cav_fraction", 0.0)
        if isinstance(raw, (list, tuple)):
            if len(raw) != 2 or not 0 <= raw[0] <= raw[1] <= 1:
                raise ConfigError("cav_fraction range must be [lo, hi] in [0,1]")
            return tuple(float(x) for x in raw)
        return float(raw)

    def demand_config(self, cav_fraction: float | None = None) -> DemandConfig:
        d = self.demand
        turn = d.get("turn_probs", {"left": 0.2, "straight": 0.6, "right": 0.2})
        if isinstance(turn, dict):
            unknown = set(turn) - {"left", "straight", "right"}
            if unknown:
                raise ConfigError(f"unknown turn_probs keys: {sorted(unknown)}")
            turn = (turn.get("left", 0.0), turn.get("straight", 0.0),
                    turn.get("right", 0.0))
        if cav_fraction is None:
            spec = self.cav_fraction_spec()
            cav_fraction = spec if isinstance(spec, float) else spec[0]
        rate = d.get("rate_veh_s", 0.08)
        if isinstance(rate, (list, tuple)):
            rate = [float(r) for r in rate]
        return DemandConfig(
            rate=rate,
            turn_probs=tuple(turn),
            cav_fraction=cav_fraction,
            ev_fraction=float(d.get("ev_fraction", 0.0)),
            duration_s=float(d.get("duration_s", 1800.0)),
            modulation_amp=float(d.get("modulation_amp", 0.0)),
            modulation_period_s=float(d.get("modulation_period_s", 900.0)),
        )

    def icev_params(self) -> ICEVParams:
        return ICEVParams(**self.energy.get("icev", {}))

    def ev_params(self) -> EVParams:
        return EVParams(**self.energy.get("ev", {}))

    def lattice_spec(self) -> LatticeSpec:
        e = self.ead
        return LatticeSpec(dt=self.sim.dt, dv=e.dv, a_min=e.a_min, a_max=e.a_max,
                           v_max=self.network.speed_limit_mps, kappa=e.kappa,
                           departure_distance=e.departure_distance_m)

    def query_ranges(self) -> QueryRanges:
        e = self.ead
        return QueryRanges(t_start=e.query_t_start, width=e.query_width,
                           distance=e.query_distance,
                           v0=(0.0, self.network.speed_limit_mps))

    # -- identity -------------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "network": asdict(self.network),
            "krauss": asdict(self.krauss),
            "demand": dict(self.demand),
            "signal": asdict(self.signal),
            "sim": asdict(self.sim),
            "energy": {k: dict(v) for k, v in self.energy.items()},
            "ead": asdict(self.ead),
            "marl": asdict(self.marl),
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]
