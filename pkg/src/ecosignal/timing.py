"""Signal timing: action-to-plan transformation, phase schedules, baselines.

A cycle runs four green phases separated by all-red switch intervals:

    [WE-left] sw [WE-straight] sw [NS-left] sw [NS-straight] sw

Green durations plus the four switch intervals partition the cycle
exactly; all rounding reconciles to that identity by largest remainder.
Right turns are not signalized (permitted whenever car-following allows).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import EAST, LEFT, NORTH, RIGHT, SOUTH, STRAIGHT, WEST

CYCLE_MIN = 30.0
CYCLE_MAX = 150.0
N_PHASES = 4
ACTION_DIM = 5
U_BOUND = 0.7

# phase index -> green (approach, movement) pairs
PHASE_MOVEMENTS = (
    frozenset({(WEST, LEFT), (EAST, LEFT)}),
    frozenset({(WEST, STRAIGHT), (EAST, STRAIGHT)}),
    frozenset({(NORTH, LEFT), (SOUTH, LEFT)}),
    frozenset({(NORTH, STRAIGHT), (SOUTH, STRAIGHT)}),
)

MOVEMENT_PHASE = {pair: j for j, pairs in enumerate(PHASE_MOVEMENTS)
                  for pair in pairs}


@dataclass(frozen=True)
class RawAction:
    """Policy output: cycle change ratio and four green-ratio logits.

    Values outside the action bounds are squashed in by construction.
    """

    u: float
    v: tuple

    def __init__(self, u: float, v):
        v = np.asarray(v, dtype=float)
        if v.shape != (N_PHASES,):
            raise ValueError(f"v must have {N_PHASES} entries")
        object.__setattr__(self, "u", float(np.clip(u, -U_BOUND, U_BOUND)))
        object.__setattr__(self, "v", tuple(np.clip(v, 0.0, 1.0)))


@dataclass(frozen=True)
class SPaTPlan:
    """One executable cycle: length, four greens, switch time, start."""

    t_cyc: float
    greens: tuple  # (WE-left, WE-straight, NS-left, NS-straight) seconds
    t_switch: float
    start_time: float

    def __post_init__(self):
        if len(self.greens) != N_PHASES:
            raise ValueError("need exactly four green durations")
        if min(self.greens) <= 0 or self.t_switch < 0:
            raise ValueError("green durations must be positive")
        total = sum(self.greens) + N_PHASES * self.t_switch
        if abs(total - self.t_cyc) > 1e-9:
            raise ValueError(
                f"cycle identity violated: greens+switches={total} != t_cyc={self.t_cyc}")
        if not CYCLE_MIN - 1e-9 <= self.t_cyc <= CYCLE_MAX + 1e-9:
            raise ValueError(f"t_cyc {self.t_cyc} outside [{CYCLE_MIN}, {CYCLE_MAX}]")

    @property
    def end_time(self) -> float:
        return self.start_time + self.t_cyc

    def to_dict(self) -> dict:
        return {"t_cyc": self.t_cyc, "greens": list(self.greens),
                "t_switch": self.t_switch, "start_time": self.start_time}

    @classmethod
    def from_dict(cls, d: dict) -> "SPaTPlan":
        return cls(d["t_cyc"], tuple(d["greens"]), d["t_switch"], d["start_time"])


def validate_timing_config(t_cyc_base: float, t_min: float, t_switch: float,
                           dt: float) -> None:
    """Startup guard: every clipped cycle must leave room for minimum greens."""
    if not CYCLE_MIN <= t_cyc_base <= CYCLE_MAX:
        raise ValueError(f"t_cyc_base must lie in [{CYCLE_MIN}, {CYCLE_MAX}]")
    if t_min <= 0 or t_switch < 0:
        raise ValueError("t_min must be positive and t_switch non-negative")
    if 4 * (t_min + t_switch) > CYCLE_MIN:
        raise ValueError(
            f"4*(t_min + t_switch) = {4 * (t_min + t_switch)} exceeds the "
            f"minimum cycle {CYCLE_MIN}; shrink t_min or t_switch")
    for name, val in (("t_min", t_min), ("t_switch", t_switch)):
        if abs(round(val / dt) * dt - val) > 1e-9:
            raise ValueError(f"{name} must be a multiple of dt={dt}")


def softmax(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    z = np.exp(x - np.max(x))
    return z / z.sum()


def _round_partition(values: np.ndarray, dt: float, target_units: int) -> np.ndarray:
    """Round `values` (seconds) to dt units summing exactly to target_units.

    Floors each entry then hands the remaining units to the largest
    fractional parts; ties go to the lower index.
    """
    units = np.floor(values / dt + 1e-9).astype(int)
    deficit = target_units - int(units.sum())
    if deficit < 0:
        raise ValueError("partition exceeds target; inputs inconsistent")
    remainders = values / dt - units
    order = np.lexsort((np.arange(len(values)), -remainders))
    for i in range(deficit):
        units[order[i % len(values)]] += 1
    return units


def transform_actions(actions, t_cyc_base: float, t_min: float,
                      t_switch: float, dt: float = 1.0,
                      start_time: float = 0.0) -> list[SPaTPlan]:
    """Turn raw agent actions into executable plans with a shared cycle.

    The shared cycle is the mean of the per-agent clipped proposals
    t_cyc_base*(1+u); each agent then splits the adjustable time
    t_cyc - 4*t_switch - 4*t_min across phases by softmax of its logits.
    Greens are rounded to whole steps with largest-remainder reconciliation
    so greens + switches equal the cycle exactly.
    """
    if not actions:
        raise ValueError("need at least one agent action")
    proposals = [float(np.clip(t_cyc_base * (1.0 + act.u), CYCLE_MIN, CYCLE_MAX))
                 for act in actions]
    t_cyc = float(np.mean(proposals))
    t_cyc = round(t_cyc / dt) * dt
    t_adj = t_cyc - 4.0 * t_switch - 4.0 * t_min
    if t_adj < 0:
        raise ValueError(
            f"t_adj < 0 for t_cyc={t_cyc}: timing config was not validated")
    green_units_target = int(round((t_cyc - 4.0 * t_switch) / dt))
    plans = []
    for act in actions:
        greens = t_min + t_adj * softmax(act.v)
        units = _round_partition(greens, dt, green_units_target)
        plans.append(SPaTPlan(t_cyc, tuple(u * dt for u in units),
                              t_switch, start_time))
    return plans


def phase_at(plan: SPaTPlan, t: float) -> tuple[int, float]:
    """Phase index (0,2,4,6 = greens; 1,3,5,7 = switches) and offset at t.

    The schedule repeats with period t_cyc; queries before start_time are
    rejected.
    """
    if t < plan.start_time - 1e-9:
        raise ValueError(f"query at t={t} precedes plan start {plan.start_time}")
    tau = (t - plan.start_time) % plan.t_cyc
    for j in range(N_PHASES):
        if tau < plan.greens[j]:
            return 2 * j, tau
        tau -= plan.greens[j]
        if tau < plan.t_switch:
            return 2 * j + 1, tau
        tau -= plan.t_switch
    # numerically at the cycle boundary
    return 0, 0.0


def active_movements(plan: SPaTPlan, t: float) -> frozenset:
    """Green (approach, movement) pairs at time t; empty during switches."""
    phase, _ = phase_at(plan, t)
    if phase % 2 == 1:
        return frozenset()
    return PHASE_MOVEMENTS[phase // 2]


def green_window_in_cycle(greens, t_switch: float, phase: int) -> tuple[float, float]:
    """Offset of a phase's green interval from its cycle start."""
    off = sum(greens[j] + t_switch for j in range(phase))
    return off, off + greens[phase]


def webster_plan(movement_counts, window_s: float, saturation_flow: float,
                 t_switch: float, t_min: float, dt: float = 1.0,
                 start_time: float = 0.0) -> SPaTPlan:
    """Delay-minimizing cycle from observed movement counts.

    `movement_counts[approach][movement]` are vehicles passed during the
    observation window for the 8 signalized movements (rights ignored).
    Cycle length follows C0 = (1.5*L + 5)/(1 - Y) with L = 4*t_switch and
    Y the sum of the four critical flow ratios, clipped to the legal
    cycle range; greens split proportional to the critical ratios with a
    t_min floor.
    """
    if window_s <= 0 or saturation_flow <= 0:
        raise ValueError("window and saturation flow must be positive")
    counts = np.asarray(movement_counts, dtype=float)
    if counts.shape != (4, 2) or (counts < 0).any():
        raise ValueError("movement_counts must be a non-negative (4, 2) array")

    ratios = np.empty(N_PHASES)
    for j, pairs in enumerate(PHASE_MOVEMENTS):
        crit = max(counts[d][m] for d, m in pairs) / window_s
        ratios[j] = crit / saturation_flow
    y_total = float(ratios.sum())
    if y_total >= 0.95:
        ratios *= 0.95 / y_total
        y_total = 0.95

    lost = 4.0 * t_switch
    if y_total == 0.0:
        t_cyc = CYCLE_MIN
        shares = np.full(N_PHASES, 0.25)
    else:
        c0 = (1.5 * lost + 5.0) / (1.0 - y_total)
        t_cyc = float(np.clip(c0, CYCLE_MIN, CYCLE_MAX))
        shares = ratios / y_total
    t_cyc = round(t_cyc / dt) * dt

    effective = t_cyc - lost
    greens = shares * effective
    # enforce the minimum green by water-filling the deficit from the rest
    for _ in range(N_PHASES):
        low = greens < t_min
        if not low.any():
            break
        fixed = float(t_min * low.sum())
        rest = ~low
        scale = (effective - fixed) / greens[rest].sum()
        greens = np.where(low, t_min, greens * scale)
    units = _round_partition(greens, dt, int(round(effective / dt)))
    return SPaTPlan(t_cyc, tuple(u * dt for u in units), t_switch, start_time)


def fixed_plan(greens, t_switch: float, t_min: float,
               start_time: float = 0.0) -> SPaTPlan:
    """Static plan passthrough with invariant checks."""
    greens = tuple(float(g) for g in greens)
    if len(greens) != N_PHASES:
        raise ValueError("need exactly four green durations")
    if min(greens) < t_min:
        raise ValueError(f"green below minimum {t_min}")
    t_cyc = sum(greens) + N_PHASES * t_switch
    return SPaTPlan(t_cyc, greens, t_switch, start_time)
