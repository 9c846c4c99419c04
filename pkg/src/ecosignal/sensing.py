"""Roadside observation, temporal state aggregation, reward, fleet metrics.

Each intersection exposes a 144-entry state: 4 approaches x 3 lanes x
3 temporal weightings x 4 features, flattened as

    index = 36*d + 12*l + 4*p + f

with features f = (occupancy, speed/limit, queue/capacity, CAV share),
all normalized into [0, 1].  The three weightings recursively discount a
cycle's per-step series with factors (1.05, 1.0, 0.95): weights follow
w_0 = 1, w_{tau+1} = w_tau / lambda, so lambda > 1 emphasizes the cycle's
early steps and lambda < 1 its late steps.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .energy import J_PER_LITER
from .sim import CAV, QUEUE_SPEED, Simulator

LAMBDAS = (1.05, 1.0, 0.95)
N_DIRECTIONS = 4
N_LANES = 3
N_WEIGHTINGS = 3
N_FEATURES = 4
STATE_DIM = N_DIRECTIONS * N_LANES * N_WEIGHTINGS * N_FEATURES  # 144
QUEUE_PENALTY = 12.0  # reward weight on per-step queue counts


class LaneObservation(NamedTuple):
    occ: float  # fraction of detection range occupied
    avg_spd: float  # mean speed of in-range vehicles (free flow if empty)
    q_len: float  # stopped vehicles in range (raw count)
    cav_pr: float  # CAV share of in-range vehicles


def lane_capacity(detection_range: float, vehicle_length: float,
                  min_gap: float) -> float:
    """Vehicles a fully jammed detection zone can hold; normalizes QLen."""
    return detection_range / (vehicle_length + min_gap)


def observation_from_aggregate(agg, detection_range: float,
                               speed_limit: float) -> LaneObservation:
    n, occ_len, spd_sum, queued, ncav = agg
    if n == 0:
        return LaneObservation(0.0, speed_limit, 0.0, 0.0)
    return LaneObservation(min(1.0, occ_len / detection_range),
                           spd_sum / n, queued, ncav / n)


def observe_lane(simulator: Simulator, inter: int, direction: int,
                 lane_idx: int) -> LaneObservation:
    """Fresh scan of one approach lane's detection zone."""
    net = simulator.net
    p = simulator.params
    lid = net.in_links[inter][direction]
    threshold = net.link_length - net.detection_range
    agg = [0.0, 0.0, 0.0, 0.0, 0.0]
    for veh in simulator.lanes[lid][lane_idx]:
        if veh.pos >= threshold:
            agg[0] += 1.0
            agg[1] += p.vehicle_length + p.min_gap
            agg[2] += veh.speed
            if veh.speed < QUEUE_SPEED:
                agg[3] += 1.0
            if veh.category == CAV:
                agg[4] += 1.0
    return observation_from_aggregate(agg, net.detection_range, net.speed_limit)


def normalize_observation(obs: LaneObservation, speed_limit: float,
                          capacity: float) -> tuple:
    return (obs.occ,
            obs.avg_spd / speed_limit,
            min(1.0, obs.q_len / capacity),
            obs.cav_pr)


def state_index(d: int, l: int, p: int, f: int) -> int:
    return 36 * d + 12 * l + 4 * p + f


def aggregation_weights(n: int, lam: float) -> np.ndarray:
    """Recursive weights w_0=1, w_{tau+1} = w_tau/lam for an n-step series."""
    w = np.empty(n)
    w[0] = 1.0
    for i in range(1, n):
        w[i] = w[i - 1] / lam
    return w


def aggregate_weighted(series, lam: float) -> float:
    """Weighted temporal mean of a per-step series under factor lam."""
    series = np.asarray(series, dtype=float)
    if series.ndim != 1 or series.size == 0:
        raise ValueError("series must be a non-empty 1-d sequence")
    w = aggregation_weights(series.size, lam)
    return float(w @ series / w.sum())


def build_state_vector(history: np.ndarray) -> np.ndarray:
    """Aggregate a (T, 4, 3, 4) normalized feature history into 144 entries."""
    history = np.asarray(history, dtype=float)
    if history.ndim != 4 or history.shape[1:] != (4, 3, 4) or history.shape[0] == 0:
        raise ValueError("history must have shape (T>=1, 4, 3, 4)")
    t_steps = history.shape[0]
    flat = history.reshape(t_steps, -1)  # (T, 48)
    out = np.empty(STATE_DIM)
    for p, lam in enumerate(LAMBDAS):
        w = aggregation_weights(t_steps, lam)
        agg = (w @ flat) / w.sum()  # (48,) over (d, l, f)
        block = agg.reshape(N_DIRECTIONS, N_LANES, N_FEATURES)
        for d in range(N_DIRECTIONS):
            for l in range(N_LANES):
                base = state_index(d, l, p, 0)
                out[base:base + N_FEATURES] = block[d, l]
    return out


def empty_state_vector() -> np.ndarray:
    """State of an empty network: free-flow speeds, everything else zero."""
    out = np.zeros(STATE_DIM)
    for d in range(N_DIRECTIONS):
        for l in range(N_LANES):
            for p in range(N_WEIGHTINGS):
                out[state_index(d, l, p, 1)] = 1.0
    return out


@dataclass
class CycleStats:
    """Per-step pass/queue counts for one intersection over one cycle."""

    passed: np.ndarray
    queued: np.ndarray
    t_cyc: float
    dt: float

    def __post_init__(self):
        self.passed = np.asarray(self.passed, dtype=float)
        self.queued = np.asarray(self.queued, dtype=float)
        if self.passed.shape != self.queued.shape:
            raise ValueError("pass/queue series lengths differ")
        expected = int(round(self.t_cyc / self.dt))
        if self.passed.size != expected:
            raise ValueError(
                f"series length {self.passed.size} != t_cyc/dt = {expected}")

    def local_reward(self, omega: float = QUEUE_PENALTY) -> float:
        return float((self.passed - omega * self.queued).sum() * self.dt / self.t_cyc)


def compute_global_reward(stats: list[CycleStats], omega: float = QUEUE_PENALTY,
                          normalize_by_agents: bool = False) -> float:
    """Network reward: sum over agents of cycle-summed (passed - omega*queued)/t_cyc.

    All agents must share the cycle length.  With `normalize_by_agents`
    the agent sum becomes an agent mean (reward scale only).
    """
    if not stats:
        raise ValueError("need at least one intersection's cycle stats")
    t_cyc = stats[0].t_cyc
    n_steps = stats[0].passed.size
    for s in stats:
        if abs(s.t_cyc - t_cyc) > 1e-9 or s.passed.size != n_steps:
            raise ValueError("agents disagree on cycle length")
    total = sum(s.local_reward(omega) for s in stats)
    if normalize_by_agents:
        total /= len(stats)
    return float(total)


class CycleRecorder:
    """Accumulates one intersection's per-step observations over a cycle."""

    def __init__(self, simulator: Simulator, inter: int):
        self.inter = inter
        self._sim = simulator
        net = simulator.net
        p = simulator.params
        self._speed_limit = net.speed_limit
        self._capacity = lane_capacity(net.detection_range, p.vehicle_length,
                                       p.min_gap)
        self._det_range = net.detection_range
        self._frames: list[np.ndarray] = []
        self._passed: list[float] = []
        self._queued: list[float] = []
        self.last_state: np.ndarray | None = None

    def record(self, report) -> None:
        agg = report.lane_agg[self.inter]  # (4, 3, 5)
        frame = np.empty((N_DIRECTIONS, N_LANES, N_FEATURES))
        for d in range(N_DIRECTIONS):
            for l in range(N_LANES):
                obs = observation_from_aggregate(agg[d, l], self._det_range,
                                                 self._speed_limit)
                frame[d, l] = normalize_observation(obs, self._speed_limit,
                                                    self._capacity)
        self._frames.append(frame)
        self._passed.append(float(report.passes[self.inter].sum()))
        self._queued.append(float(report.queues[self.inter].sum()))

    @property
    def steps_recorded(self) -> int:
        return len(self._frames)

    def partial_state(self) -> np.ndarray:
        """State from the cycle so far; falls back to the last full cycle."""
        if self._frames:
            return build_state_vector(np.stack(self._frames))
        if self.last_state is not None:
            return self.last_state
        return empty_state_vector()

    def finish(self, t_cyc: float, dt: float) -> tuple[np.ndarray, CycleStats]:
        if not self._frames:
            raise RuntimeError("cannot finish a cycle with no recorded steps")
        state = build_state_vector(np.stack(self._frames))
        stats = CycleStats(np.array(self._passed), np.array(self._queued),
                           t_cyc, dt)
        self.last_state = state
        self._frames.clear()
        self._passed.clear()
        self._queued.clear()
        return state, stats


def accumulate_metrics(exit_records) -> dict:
    """Fleet metrics over a completed episode (all vehicles exited).

    Energy is gasoline-equivalent liters per 100 km (EV electricity is
    converted before aggregation), idling is seconds per vehicle, speed is
    total distance over total travel time.
    """
    records = list(exit_records)
    if not records:
        raise ValueError("no completed vehicle records")
    dist_m = sum(r.dist_m for r in records)
    if dist_m <= 0:
        raise ValueError("zero total travel distance")
    travel_s = sum(r.travel_s for r in records)
    idle_s = sum(r.idle_s for r in records)
    liters = sum(r.energy_j for r in records) / J_PER_LITER
    return {
        "avg_energy_l_per_100km": liters / dist_m * 1e5,
        "avg_idling_s": idle_s / len(records),
        "avg_speed_mps": dist_m / travel_s,
        "n_vehicles": len(records),
        "total_distance_m": dist_m,
    }
