"""Per-step vehicle energy models and gasoline-equivalent conversion.

Both powertrains report energy as gasoline-equivalent joules so fleet
metrics and planner edge costs share one unit.  The equivalence is
1 kWh = 3.6 MJ = 0.112 L of gasoline, which makes electrical joules and
gasoline-equivalent joules numerically identical and gives
``J_PER_LITER`` = 3.6e6 / 0.112 for liquid fuel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GRAVITY = 9.81  # m/s^2
AIR_DENSITY = 1.225  # kg/m^3
KWH_TO_LITERS = 0.112  # gasoline-equivalent liters per kWh
J_PER_LITER = 3.6e6 / KWH_TO_LITERS  # gasoline energy density under the same equivalence
J_PER_KWH = 3.6e6


@dataclass(frozen=True)
class ICEVParams:
    """Combustion powertrain: polynomial fuel rate over traction power.

    fuel [L/s] = idle_rate + speed_coef*v + power_coef*max(0, P_traction)
    The rate never drops below ``idle_rate`` (engine idling floor).
    """

    mass: float = 1500.0  # kg
    drag_coef: float = 0.32
    frontal_area: float = 2.2  # m^2
    rolling_res: float = 0.0125
    idle_rate: float = 2.5e-4  # L/s
    speed_coef: float = 5.0e-6  # L/s per m/s (engine friction with speed)
    power_coef: float = 1.414e-7  # L/J of positive traction work (~22% efficiency)


@dataclass(frozen=True)
class EVParams:
    """Battery-electric powertrain with regenerative braking."""

    mass: float = 1700.0  # kg
    drag_coef: float = 0.30
    frontal_area: float = 2.3  # m^2
    rolling_res: float = 0.013
    drivetrain_eff: float = 0.85  # battery -> wheels, in (0, 1]
    regen_eff: float = 0.60  # wheels -> battery, in [0, 1)
    aux_power: float = 400.0  # W constant auxiliary load


def traction_power(v: float, a: float, params) -> float:
    """Longitudinal traction power in watts (signed).

    P = (m*a + 0.5*rho*Cd*A*v^2 + Crr*m*g) * v; zero at standstill.
    """
    drag = 0.5 * AIR_DENSITY * params.drag_coef * params.frontal_area * v * v
    rolling = params.rolling_res * params.mass * GRAVITY
    return (params.mass * a + drag + rolling) * v


def icev_fuel_rate(v: float, a: float, params: ICEVParams) -> float:
    """Fuel burn in L/s; clamped so braking never dips below idle."""
    p_trac = traction_power(v, a, params)
    return (params.idle_rate
            + params.speed_coef * v
            + params.power_coef * max(0.0, p_trac))


def ev_battery_power_w(v: float, a: float, params: EVParams) -> float:
    """Battery terminal power in watts, negative while regenerating."""
    p_trac = traction_power(v, a, params)
    if p_trac >= 0.0:
        return p_trac / params.drivetrain_eff + params.aux_power
    return params.regen_eff * p_trac + params.aux_power


def ev_battery_power(v: float, a: float, params: EVParams) -> float:
    """Battery terminal power in kW, negative while regenerating."""
    return ev_battery_power_w(v, a, params) / 1000.0


def gasoline_equivalent(kwh: float) -> float:
    """Electrical energy in kWh expressed as liters of gasoline."""
    return kwh * KWH_TO_LITERS


class PowertrainModel:
    """Energy-rate front end shared by the simulator and the planner."""

    def __init__(self, kind: str, params=None):
        if kind not in ("icev", "ev"):
            raise ValueError(f"unknown powertrain kind: {kind!r}")
        self.kind = kind
        if params is None:
            params = ICEVParams() if kind == "icev" else EVParams()
        self.params = params

    def energy_rate_w(self, v: float, a: float) -> float:
        """Gasoline-equivalent power draw in J/s (signed for EV regen)."""
        if self.kind == "icev":
            return icev_fuel_rate(v, a, self.params) * J_PER_LITER
        return ev_battery_power_w(v, a, self.params)

    def segment_energy_j(self, v0: float, v1: float, dt: float) -> float:
        """Energy over one step from speed v0 to v1, evaluated at midpoint."""
        a = (v1 - v0) / dt
        v_mid = 0.5 * (v0 + v1)
        return self.energy_rate_w(v_mid, a) * dt

    def segment_energy_grid(self, v0, v1, dt: float) -> np.ndarray:
        """Vectorized segment energies; identical arithmetic to the scalar path."""
        v0 = np.asarray(v0, dtype=float)
        v1 = np.asarray(v1, dtype=float)
        a = (v1 - v0) / dt
        v = 0.5 * (v0 + v1)
        p = self.params
        drag = 0.5 * AIR_DENSITY * p.drag_coef * p.frontal_area * v * v
        rolling = p.rolling_res * p.mass * GRAVITY
        p_trac = (p.mass * a + drag + rolling) * v
        if self.kind == "icev":
            rate = (p.idle_rate + p.speed_coef * v
                    + p.power_coef * np.maximum(0.0, p_trac)) * J_PER_LITER
        else:
            rate = np.where(p_trac >= 0.0,
                            p_trac / p.drivetrain_eff + p.aux_power,
                            p.regen_eff * p_trac + p.aux_power)
        return rate * dt

    def profile_energy_j(self, speeds, dt: float) -> float:
        """Signed energy along a per-step speed profile."""
        speeds = np.asarray(speeds, dtype=float)
        if speeds.size < 2:
            return 0.0
        return float(self.segment_energy_grid(speeds[:-1], speeds[1:], dt).sum())


PRESETS = {
    "icev-default": lambda: PowertrainModel("icev", ICEVParams()),
    "ev-default": lambda: PowertrainModel("ev", EVParams()),
}


def from_preset(name: str) -> PowertrainModel:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ValueError(f"unknown powertrain preset {name!r}; "
                         f"known: {sorted(PRESETS)}") from None


def accumulate(cumulative_j: float, rate_w: float, dt: float) -> float:
    """Advance a cumulative energy counter by one step of constant rate."""
    return cumulative_j + rate_w * dt


def joules_to_liters(joules: float) -> float:
    return joules / J_PER_LITER
