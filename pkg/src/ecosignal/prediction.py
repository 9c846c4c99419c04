"""Hybrid signal-phase prediction for approaching automated vehicles.

The next cycle's timing is unknown under adaptive control, so the
predicted plan blends the recorded (currently executing) phases with a
controller-driven estimate, weighted by how far the current cycle has
progressed:

    HPhase = floor((1 - beta)*RPhase + beta*PPhase),  beta = min(tau/t_cyc, 1)

applied elementwise to the cycle length and the four greens, then
reconciled by largest remainder so the cycle identity holds exactly.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from . import timing
from .network import RIGHT
from .timing import MOVEMENT_PHASE, SPaTPlan, _round_partition


_FLOOR_EPS = 1e-9  # blended durations are rationals with denominator <= 150;
# the epsilon only absorbs ulp-level float noise, never a real fraction


def blend(rphase, pphase, tau: float, t_cyc: float):
    """Eq-style elementwise blend of recorded and predicted durations."""
    if tau < 0 or t_cyc <= 0:
        raise ValueError("need tau >= 0 and t_cyc > 0")
    beta = min(tau / t_cyc, 1.0)
    mixed = (1.0 - beta) * np.asarray(rphase, dtype=float) \
        + beta * np.asarray(pphase, dtype=float)
    return np.floor(mixed + _FLOOR_EPS)


@dataclass(frozen=True)
class HybridSPaT:
    """Blended next-cycle shape: integer-second cycle and greens."""

    t_cyc: float
    greens: tuple
    t_switch: float
    beta: float

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")
        total = sum(self.greens) + 4 * self.t_switch
        if abs(total - self.t_cyc) > 1e-9:
            raise ValueError("hybrid plan violates the cycle identity")


def blend_plans(rplan: SPaTPlan, pplan: SPaTPlan, tau: float,
                t_cyc_current: float) -> HybridSPaT:
    """Blend whole plans and repair the greens to the floored cycle."""
    if abs(rplan.t_switch - pplan.t_switch) > 1e-9:
        raise ValueError("recorded and predicted plans disagree on t_switch")
    beta = min(tau / t_cyc_current, 1.0) if tau >= 0 else 0.0
    t_switch = rplan.t_switch
    mixed_cyc = (1.0 - beta) * rplan.t_cyc + beta * pplan.t_cyc
    mixed_greens = ((1.0 - beta) * np.asarray(rplan.greens)
                    + beta * np.asarray(pplan.greens))
    h_cyc = float(np.floor(mixed_cyc + _FLOOR_EPS))
    target_units = int(round(h_cyc - 4.0 * t_switch))
    units = _round_partition(mixed_greens, 1.0, target_units)
    return HybridSPaT(h_cyc, tuple(float(u) for u in units), t_switch, beta)


class PhaseHistory:
    """Ring buffer of executed plans per intersection (RPhase source).

    Depth 1 returns the latest plan; deeper buffers blend the stored
    shapes with an exponential average (newest weighted most).
    """

    def __init__(self, n_intersections: int, depth: int = 1, decay: float = 0.5):
        if depth < 1:
            raise ValueError("history depth must be >= 1")
        self._buffers = [deque(maxlen=depth) for _ in range(n_intersections)]
        self.decay = decay

    def record(self, inter: int, plan: SPaTPlan) -> None:
        self._buffers[inter].append(plan)

    def recorded_shape(self, inter: int) -> SPaTPlan:
        buf = self._buffers[inter]
        if not buf:
            raise RuntimeError(f"no executed plan recorded at intersection {inter}")
        if len(buf) == 1:
            return buf[-1]
        weights = np.array([self.decay ** i for i in range(len(buf))])
        weights /= weights.sum()
        plans = list(buf)[::-1]  # newest first
        cyc = sum(w * p.t_cyc for w, p in zip(weights, plans))
        greens = sum(w * np.asarray(p.greens) for w, p in zip(weights, plans))
        t_switch = plans[0].t_switch
        units = _round_partition(np.asarray(greens), 1.0,
                                 int(round(cyc - 4 * t_switch)))
        return SPaTPlan(float(round(cyc)), tuple(float(u) for u in units),
                        t_switch, plans[0].start_time)


class HybridPredictor:
    """Per-step blended next-cycle estimate plus passing-interval queries.

    The PPhase source is the active controller's `predict_plan_shapes`,
    evaluated deterministically from partial-cycle observations and cached
    once per simulation step.
    """

    def __init__(self, simulator, controller, history_depth: int = 1,
                 audit: list | None = None):
        self.sim = simulator
        self.controller = controller
        self.history = PhaseHistory(simulator.net.n_intersections, history_depth)
        self.audit = audit
        self._cache_t = None
        self._cached: dict[int, HybridSPaT] = {}
        self._pshapes = None

    def notify_installed(self, inter: int, plan: SPaTPlan) -> None:
        self.history.record(inter, plan)

    def _cycle_start(self, plan: SPaTPlan, t: float) -> float:
        k = max(0, int((t - plan.start_time) // plan.t_cyc))
        return plan.start_time + k * plan.t_cyc

    def hybrid(self, inter: int, t: float) -> HybridSPaT:
        if self._cache_t != t:
            self._cached.clear()
            self._pshapes = None
            self._cache_t = t
        if inter in self._cached:
            return self._cached[inter]
        if self._pshapes is None:
            self._pshapes = self.controller.predict_plan_shapes(self.sim, t)
        plan = self.sim.plans[inter]
        tau = t - self._cycle_start(plan, t)
        rplan = self.history.recorded_shape(inter)
        pplan = self._pshapes[inter]
        hyb = blend_plans(rplan, pplan, tau, plan.t_cyc)
        self._cached[inter] = hyb
        if self.audit is not None:
            self.audit.append({
                "t": t, "intersection": inter, "beta": hyb.beta,
                "r_tcyc": rplan.t_cyc, **{f"r_g{j+1}": rplan.greens[j] for j in range(4)},
                "p_tcyc": pplan.t_cyc, **{f"p_g{j+1}": pplan.greens[j] for j in range(4)},
                "h_tcyc": hyb.t_cyc, **{f"h_g{j+1}": hyb.greens[j] for j in range(4)},
            })
        return hyb

    def current_green_interval(self, inter: int, approach: int, movement: int,
                               t: float):
        """Exact green window of the executing cycle for a movement.

        Returns absolute (start, end); rights see the whole cycle.
        """
        plan = self.sim.plans[inter]
        start = self._cycle_start(plan, t)
        if movement == RIGHT:
            return start, start + plan.t_cyc
        phase = MOVEMENT_PHASE[(approach, movement)]
        off0, off1 = timing.green_window_in_cycle(plan.greens, plan.t_switch, phase)
        return start + off0, start + off1

    def passing_interval(self, inter: int, approach: int, movement: int,
                         t: float):
        """Predicted green window of the NEXT cycle, absolute seconds."""
        plan = self.sim.plans[inter]
        next_start = self._cycle_start(plan, t) + plan.t_cyc
        hyb = self.hybrid(inter, t)
        if movement == RIGHT:
            return next_start, next_start + hyb.t_cyc
        phase = MOVEMENT_PHASE[(approach, movement)]
        off0, off1 = timing.green_window_in_cycle(hyb.greens, hyb.t_switch, phase)
        return next_start + off0, next_start + off1
