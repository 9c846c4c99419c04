"""Episode orchestration: controllers, vehicle layers, and the run loop.

A controller owns signal plans: the RL controller decides jointly once per
common cycle from the 144-d per-intersection states; Webster replans each
intersection at its own cycle end from a rolling pass-count window; the
fixed controller never replans.  Each controller also supplies the
predicted next-cycle shapes that the hybrid SPaT predictor blends for
approaching CAVs.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import sensing, timing
from .ead import EadVehicleLayer, LatticeSpec, plan_gbtpa
from .energy import PowertrainModel
from .marl import Transition
from .prediction import HybridPredictor
from .sim import Simulator
from .timing import RawAction, SPaTPlan


class SignalController:
    """Interface; concrete controllers override what they need."""

    needs_recorders = False

    def start(self, sim: Simulator) -> None:
        raise NotImplementedError

    def on_step_begin(self, sim, recorders, collector) -> None:
        pass

    def on_step_end(self, sim, report) -> None:
        pass

    def predict_plan_shapes(self, sim, t: float) -> list[SPaTPlan]:
        raise NotImplementedError

    def install(self, sim, inter: int, plan: SPaTPlan) -> None:
        sim.install_plan(inter, plan)
        if getattr(self, "predictor", None) is not None:
            self.predictor.notify_installed(inter, plan)


class FixedController(SignalController):
    """One static plan everywhere, repeating forever."""

    def __init__(self, greens, t_switch: float, t_min: float):
        self.greens = tuple(greens)
        self.t_switch = t_switch
        self.t_min = t_min
        self.predictor = None

    def start(self, sim) -> None:
        for i in range(sim.net.n_intersections):
            self.install(sim, i, timing.fixed_plan(self.greens, self.t_switch,
                                                   self.t_min, start_time=0.0))

    def predict_plan_shapes(self, sim, t):
        return list(sim.plans)


class WebsterController(SignalController):
    """Per-intersection Webster replanning from a rolling count window."""

    def __init__(self, window_s: float = 400.0, saturation_flow: float = 0.5,
                 t_switch: float = 3.0, t_min: float = 4.0, dt: float = 1.0):
        self.window_s = window_s
        self.saturation_flow = saturation_flow
        self.t_switch = t_switch
        self.t_min = t_min
        self.dt = dt
        self._history: deque = deque()
        self.predictor = None

    def start(self, sim) -> None:
        for i in range(sim.net.n_intersections):
            self.install(sim, i, self._plan_for(sim, i, 0.0))

    def _counts(self, inter: int, now: float) -> np.ndarray:
        horizon = now - self.window_s
        counts = np.zeros((4, 2))
        for t, passes in self._history:
            if t >= horizon:
                counts += passes[inter, :, :2]
        return counts

    def _plan_for(self, sim, inter: int, now: float) -> SPaTPlan:
        window = max(self.dt, min(self.window_s, now))
        return timing.webster_plan(self._counts(inter, now), window,
                                   self.saturation_flow, self.t_switch,
                                   self.t_min, dt=self.dt, start_time=now)

    def on_step_begin(self, sim, recorders, collector) -> None:
        t = sim.t
        for i in range(sim.net.n_intersections):
            plan = sim.plans[i]
            if t >= plan.end_time - 1e-9:
                self.install(sim, i, self._plan_for(sim, i, t))

    def on_step_end(self, sim, report) -> None:
        self._history.append((report.t, report.passes.copy()))
        horizon = sim.t - self.window_s
        while self._history and self._history[0][0] < horizon:
            self._history.popleft()

    def predict_plan_shapes(self, sim, t):
        return [self._plan_for(sim, i, t) for i in range(sim.net.n_intersections)]


@dataclass
class TransitionCollector:
    transitions: list = field(default_factory=list)
    episode_reward: float = 0.0

    def add(self, tr: Transition) -> None:
        self.transitions.append(tr)
        self.episode_reward += tr.reward

    def mark_last_done(self) -> None:
        if self.transitions:
            self.transitions[-1].done = True


class RLCycleController(SignalController):
    """Common-cycle control by a shared policy, one joint decision per cycle.

    In sampling mode actions come from the stochastic policy (training);
    deterministic mode squashes the mean (evaluation/prediction).  States
    are the previous cycle's aggregated observations; the reward is the
    finished cycle's global pass/queue balance.
    """

    needs_recorders = True

    def __init__(self, policy, t_cyc_base: float, t_min: float, t_switch: float,
                 dt: float = 1.0, sample: bool = True, rng=None,
                 reward_normalize_by_agents: bool = False, omega: float = 12.0):
        self.policy = policy
        self.t_cyc_base = t_cyc_base
        self.t_min = t_min
        self.t_switch = t_switch
        self.dt = dt
        self.sample = sample
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.normalize = reward_normalize_by_agents
        self.omega = omega
        self.predictor = None
        self._pending = None  # (states, squashed action array, log_probs)
        self._deciding = True
        self.n_decisions = 0

    def _decide(self, states: np.ndarray, t: float):
        actions, log_probs = self.policy.act(states, rng=self.rng,
                                             deterministic=not self.sample)
        raw = [RawAction(a[0], a[1:]) for a in actions]
        plans = timing.transform_actions(raw, self.t_cyc_base, self.t_min,
                                         self.t_switch, dt=self.dt, start_time=t)
        return actions, log_probs, plans

    def start(self, sim) -> None:
        states = np.stack([sensing.empty_state_vector()
                           for _ in range(sim.net.n_intersections)])
        actions, log_probs, plans = self._decide(states, 0.0)
        for i, plan in enumerate(plans):
            self.install(sim, i, plan)
        self._pending = (states, actions, log_probs)
        self.n_decisions += 1

    def on_step_begin(self, sim, recorders, collector) -> None:
        t = sim.t
        plan = sim.plans[0]
        if t < plan.end_time - 1e-9:
            return
        # common cycle boundary: close the finished cycle
        finished = [rec.finish(plan.t_cyc, self.dt) for rec in recorders]
        states = np.stack([state for state, _ in finished])
        stats = [s for _, s in finished]
        reward = sensing.compute_global_reward(stats, self.omega, self.normalize)
        local = np.array([s.local_reward(self.omega) for s in stats])
        if self._pending is not None and collector is not None:
            ps, pa, plp = self._pending
            collector.add(Transition(ps, np.asarray(pa), np.asarray(plp),
                                     reward, states, False, local_rewards=local))
        if self._deciding and t < sim.demand.duration_s:
            actions, log_probs, plans = self._decide(states, t)
            for i, new_plan in enumerate(plans):
                self.install(sim, i, new_plan)
            self._pending = (states, actions, log_probs)
            self.n_decisions += 1
        else:
            if self._deciding and collector is not None:
                collector.mark_last_done()
            self._deciding = False
            self._pending = None
            # keep the last shape rolling so cycle bookkeeping stays exact
            for i in range(sim.net.n_intersections):
                old = sim.plans[i]
                self.install(sim, i, SPaTPlan(old.t_cyc, old.greens,
                                              old.t_switch, t))

    def predict_plan_shapes(self, sim, t):
        # deterministic pass on the partial-cycle states; recorders are fed
        # by the episode loop and reachable through the simulator hook
        recorders = getattr(sim, "_recorders", None)
        if recorders is None:
            return list(sim.plans)
        states = np.stack([rec.partial_state() for rec in recorders])
        actions, _ = self.policy.act(states, deterministic=True)
        raw = [RawAction(a[0], a[1:]) for a in actions]
        return timing.transform_actions(raw, self.t_cyc_base, self.t_min,
                                        self.t_switch, dt=self.dt, start_time=t)


@dataclass
class EpisodeResult:
    metrics: dict
    transitions: list
    episode_reward: float
    n_cycles: int
    seed: int
    created: int
    replan_events: int = 0
    plans_made: int = 0
    spat_log: list = field(default_factory=list)
    prediction_audit: list = field(default_factory=list)
    drained: bool = True


class EpisodeAborted(RuntimeError):
    pass


def run_episode(sim: Simulator, controller: SignalController,
                vehicle_layer: str = "krauss", surrogate=None,
                lattice_spec: LatticeSpec | None = None,
                planner_model: PowertrainModel | None = None,
                collect_transitions: bool = False,
                history_depth: int = 1,
                audit_prediction: bool = False,
                max_drain_s: float = 1800.0,
                spat_log: list | None = None) -> EpisodeResult:
    """Drive one full episode until every vehicle has exited.

    `vehicle_layer` selects how CAVs drive: plain Krauss, the lattice
    planner ("gbtpa"), or its imitation surrogate ("mltpa").
    """
    recorders = [sensing.CycleRecorder(sim, i)
                 for i in range(sim.net.n_intersections)]
    sim._recorders = recorders  # controller prediction hook
    collector = TransitionCollector() if collect_transitions else None

    audit = [] if audit_prediction else None
    predictor = HybridPredictor(sim, controller, history_depth, audit)
    controller.predictor = predictor
    if spat_log is not None:
        original_install = controller.install
        cycle_counters = [0] * sim.net.n_intersections

        def logging_install(sim_, inter, plan, _orig=original_install):
            spat_log.append({"intersection": inter,
                             "cycle_index": cycle_counters[inter],
                             "start_time": plan.start_time,
                             "t_cyc": plan.t_cyc,
                             **{f"g{j+1}": plan.greens[j] for j in range(4)}})
            cycle_counters[inter] += 1
            _orig(sim_, inter, plan)

        controller.install = logging_install

    layer = None
    if vehicle_layer != "krauss":
        spec = lattice_spec if lattice_spec is not None else LatticeSpec(
            v_max=sim.net.speed_limit)
        model = planner_model if planner_model is not None \
            else PowertrainModel("icev")
        if vehicle_layer == "mltpa":
            if surrogate is None:
                raise ValueError("mltpa layer needs a fitted surrogate")
            planner = surrogate.plan
        elif vehicle_layer == "gbtpa":
            planner = lambda q: plan_gbtpa(q, spec, model)
        else:
            raise ValueError(f"unknown vehicle layer {vehicle_layer!r}")
        layer = EadVehicleLayer(sim, predictor, planner, spec)

    controller.start(sim)
    hard_stop = sim.demand.duration_s + max_drain_s
    drained = True
    while not sim.drained():
        if sim.t >= hard_stop:
            drained = False
            break
        controller.on_step_begin(sim, recorders, collector)
        if audit is not None:
            for i in range(sim.net.n_intersections):
                predictor.hybrid(i, sim.t)
        setpoints = layer.step(sim.t) if layer is not None else None
        report = sim.advance(setpoints)
        if controller.needs_recorders:
            for rec in recorders:
                rec.record(report)
        controller.on_step_end(sim, report)

    if not drained:
        raise EpisodeAborted(
            f"episode not drained {max_drain_s}s past demand end "
            f"(vehicles={sim.n_vehicles}, deferred={sim.deferred_count})")
    metrics = sensing.accumulate_metrics(sim.exit_records)
    return EpisodeResult(
        metrics=metrics,
        transitions=collector.transitions if collector else [],
        episode_reward=collector.episode_reward if collector else 0.0,
        n_cycles=getattr(controller, "n_decisions", 0),
        seed=sim.clock.episode_seed,
        created=sim.created,
        replan_events=layer.replan_events if layer else 0,
        plans_made=layer.plans_made if layer else 0,
        prediction_audit=audit or [],
        drained=drained,
    )
