"""Discrete-time microscopic traffic simulator.

Vehicles follow the Krauss safe-speed model on movement-dedicated lanes;
signal state turns stop lines into stopped virtual leaders; connected
automated vehicles additionally obey externally supplied speed setpoints
(never above the car-following safe speed).  One simulator instance owns
all of its state and is deterministic given (config, seed): demand,
vehicle category, powertrain draws and per-vehicle dawdling noise come
from separate seeded streams so scenarios that differ only in the CAV
fraction see identical arrival processes.

Positions are front-bumper meters from link start; displacement is the
new speed times dt, and a hard clamp keeps any vehicle's displacement
within the start-of-step gap, so rear-end overlap is impossible by
construction (violations raise CollisionError).
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import energy, kernels, timing
from .network import RIGHT, RoadNetwork, sample_route

HV, CAV = 0, 1
CATEGORY_NAMES = ("HV", "CAV")
QUEUE_SPEED = 0.1  # m/s; below this a vehicle counts as stopped/idling


class CollisionError(RuntimeError):
    """Fatal invariant violation: negative gap between two vehicles."""


@dataclass(frozen=True)
class KraussParams:
    max_accel: float = 2.6  # m/s^2
    decel: float = 4.5  # m/s^2, comfortable braking in the safe-speed term
    sigma: float = 0.5  # driver imperfection in [0, 1]
    reaction_time: float = 1.0  # s
    min_gap: float = 2.5  # m, desired standstill gap
    vehicle_length: float = 5.0  # m

    def __post_init__(self):
        if self.max_accel <= 0 or self.decel <= 0 or self.reaction_time <= 0:
            raise ValueError("max_accel, decel and reaction_time must be positive")
        if self.min_gap < 0 or not 0.0 <= self.sigma <= 1.0:
            raise ValueError("min_gap >= 0 and sigma in [0, 1] required")


@dataclass(frozen=True)
class DemandConfig:
    """Poisson arrivals per entry link with optional sinusoidal modulation."""

    rate: object = 0.08  # veh/s; scalar or sequence aligned with entry links
    turn_probs: tuple = (0.2, 0.6, 0.2)  # left, straight, right
    cav_fraction: float = 0.0
    ev_fraction: float = 0.0
    duration_s: float = 1800.0
    modulation_amp: float = 0.0
    modulation_period_s: float = 900.0

    def __post_init__(self):
        p = self.turn_probs
        if len(p) != 3 or min(p) < 0 or abs(sum(p) - 1.0) > 1e-9:
            raise ValueError("turn_probs must be 3 non-negative values summing to 1")
        if not 0.0 <= self.cav_fraction <= 1.0:
            raise ValueError("cav_fraction must lie in [0, 1]")
        if not 0.0 <= self.ev_fraction <= 1.0:
            raise ValueError("ev_fraction must lie in [0, 1]")

    def rate_for(self, entry_index: int, n_entries: int, t: float) -> float:
        base = (self.rate[entry_index]
                if isinstance(self.rate, (list, tuple)) else float(self.rate))
        if self.modulation_amp == 0.0:
            return base
        phase = 2.0 * math.pi * entry_index / max(1, n_entries)
        wave = 1.0 + self.modulation_amp * math.sin(
            2.0 * math.pi * t / self.modulation_period_s + phase)
        return base * max(0.0, wave)


@dataclass
class SimClock:
    step: int = 0
    dt: float = 1.0
    episode_seed: int = 0

    @property
    def t(self) -> float:
        return self.step * self.dt


class Vehicle:
    __slots__ = ("vid", "category", "pt_kind", "model", "route", "hop",
                 "pos", "speed", "accel", "cum_energy_j", "idle_s", "dist_m",
                 "spawn_t", "insert_t", "_rng", "_seed")

    def __init__(self, vid, category, pt_kind, model, route, spawn_t, seed):
        self.vid = vid
        self.category = category
        self.pt_kind = pt_kind
        self.model = model
        self.route = route
        self.hop = 0
        self.pos = 0.0
        self.speed = 0.0
        self.accel = 0.0
        self.cum_energy_j = 0.0
        self.idle_s = 0.0
        self.dist_m = 0.0
        self.spawn_t = spawn_t
        self.insert_t = None
        self._rng = None
        self._seed = seed

    @property
    def link_id(self) -> int:
        return self.route[self.hop][0]

    @property
    def movement(self) -> int:
        return self.route[self.hop][1]

    @property
    def lane(self) -> int:
        return self.route[self.hop][2]

    def dawdle_draw(self) -> float:
        # Lazy per-vehicle stream so noise consumption is independent of
        # what other vehicles do (comparable across CAV-fraction sweeps).
        if self._rng is None:
            self._rng = np.random.default_rng([self._seed, 7919, self.vid])
        return self._rng.random()


@dataclass
class ExitRecord:
    vid: int
    category: int
    pt_kind: str
    dist_m: float
    travel_s: float
    idle_s: float
    energy_j: float
    spawn_t: float
    insert_t: float
    exit_t: float


@dataclass
class StepReport:
    """Per-step bookkeeping consumed by sensing and reward accounting."""

    t: float
    passes: np.ndarray  # (n_inter, 4, 3) stop-line crossings this step
    queues: np.ndarray  # (n_inter, 4, 3) stopped vehicles in detection range
    lane_agg: np.ndarray  # (n_inter, 4, 3, 5): n, occupied_len, speed_sum, queued, n_cav
    exits: list = field(default_factory=list)
    inserted: int = 0
    deferred_backlog: int = 0
    n_vehicles: int = 0


def krauss_safe_speed(v_follower, leader_gap, leader_speed, params) -> float:
    """Safe speed toward a leader `leader_gap` meters ahead (bumper to bumper)."""
    ge = max(0.0, leader_gap - params.min_gap)
    denom = params.reaction_time + (leader_speed + v_follower) / (2.0 * params.decel)
    return leader_speed + (ge - leader_speed * params.reaction_time) / denom


def krauss_step(v_follower, leader_gap, leader_speed, params, dt,
                speed_limit, eta=0.0) -> float:
    """One Krauss update; `leader_gap=None` means open road.

    Returns max(0, min(v + a*dt, speed_limit, v_safe) - sigma*a*dt*eta)
    with eta the caller's uniform draw (irrelevant when sigma == 0).
    """
    if leader_gap is None:
        vsafe = float("inf")
    else:
        if leader_gap < 0:
            raise ValueError("leader gap must be non-negative")
        vsafe = krauss_safe_speed(v_follower, leader_gap, leader_speed, params)
    vdes = min(v_follower + params.max_accel * dt, speed_limit, vsafe)
    return max(0.0, vdes - params.sigma * params.max_accel * dt * eta)


class Simulator:
    """Single-threaded grid traffic simulation (one instance per worker)."""

    def __init__(self, net: RoadNetwork, krauss: KraussParams,
                 demand: DemandConfig, seed: int, dt: float = 1.0,
                 icev_params=None, ev_params=None, collision_check: bool = True,
                 trace=None):
        if dt <= 0:
            raise ValueError("dt must be positive")
        if net.link_length <= net.speed_limit * dt:
            raise ValueError("link_length must exceed speed_limit*dt")
        if isinstance(demand.rate, (list, tuple)):
            if len(demand.rate) != len(net.entry_links):
                raise ValueError(
                    f"per-entry rates need {len(net.entry_links)} values")
            if min(demand.rate) < 0:
                raise ValueError("demand rates must be non-negative")
        elif demand.rate < 0:
            raise ValueError("demand rates must be non-negative")
        self.net = net
        self.params = krauss
        self.demand = demand
        self.clock = SimClock(0, dt, seed)
        self.collision_check = collision_check
        self.trace = trace  # optional list collecting per-vehicle-step rows

        self._models = {
            "icev": energy.PowertrainModel("icev", icev_params),
            "ev": energy.PowertrainModel("ev", ev_params),
        }
        self._demand_rng = np.random.default_rng([seed, 1])
        self._category_rng = np.random.default_rng([seed, 2])
        self._powertrain_rng = np.random.default_rng([seed, 3])

        self.lanes: list[list[list[Vehicle]]] = [
            [[] for _ in range(3)] for _ in net.links]
        self.deferred: dict[tuple[int, int], deque] = {}
        self.plans: list = [None] * net.n_intersections

        self._next_vid = 0
        self.created = 0
        self.inserted = 0
        self.exited = 0
        self.n_vehicles = 0
        self.exit_records: list[ExitRecord] = []

    # -- clock ------------------------------------------------------------
    @property
    def t(self) -> float:
        return self.clock.t

    @property
    def dt(self) -> float:
        return self.clock.dt

    def install_plan(self, inter: int, plan: timing.SPaTPlan) -> None:
        self.plans[inter] = plan

    @property
    def deferred_count(self) -> int:
        return sum(len(q) for q in self.deferred.values())

    def drained(self) -> bool:
        return (self.t >= self.demand.duration_s and self.n_vehicles == 0
                and self.deferred_count == 0)

    def all_vehicles(self):
        for lanes in self.lanes:
            for lane in lanes:
                yield from lane

    # -- demand -----------------------------------------------------------
    def _make_vehicle(self, entry_lid: int, t: float) -> Vehicle:
        vid = self._next_vid
        self._next_vid += 1
        route = sample_route(self.net, entry_lid, self._demand_rng,
                             self.demand.turn_probs)
        category = CAV if self._category_rng.random() < self.demand.cav_fraction else HV
        pt = "ev" if self._powertrain_rng.random() < self.demand.ev_fraction else "icev"
        veh = Vehicle(vid, category, pt, self._models[pt], route, t,
                      self.clock.episode_seed)
        self.created += 1
        return veh

    def _spawn(self, t: float) -> int:
        if t < self.demand.duration_s:
            n_entries = len(self.net.entry_links)
            for k, lid in enumerate(self.net.entry_links):
                rate = self.demand.rate_for(k, n_entries, t)
                n_new = int(self._demand_rng.poisson(rate * self.dt)) if rate > 0 else 0
                for _ in range(n_new):
                    veh = self._make_vehicle(lid, t)
                    key = (lid, veh.lane)
                    self.deferred.setdefault(key, deque()).append(veh)
        # insertion pass: admit deferred vehicles wherever the entry gap is safe
        inserted = 0
        for key in sorted(self.deferred):
            queue = self.deferred[key]
            lid, lane_idx = key
            lane = self.lanes[lid][lane_idx]
            while queue:
                veh = queue[0]
                if lane:
                    tail = lane[-1]
                    raw_gap = tail.pos - self.params.vehicle_length
                    if raw_gap < self.params.min_gap:
                        break
                    vsafe = krauss_safe_speed(self.net.speed_limit, raw_gap,
                                              tail.speed, self.params)
                    v0 = max(0.0, min(self.net.speed_limit, vsafe, raw_gap / self.dt))
                else:
                    v0 = self.net.speed_limit
                queue.popleft()
                veh.pos = 0.0
                veh.speed = v0
                veh.insert_t = t
                lane.append(veh)
                self.n_vehicles += 1
                self.inserted += 1
                inserted += 1
        return inserted

    # -- stepping ---------------------------------------------------------
    def advance(self, setpoints=None) -> StepReport:
        """Advance one step; returns pass/queue/observation bookkeeping.

        `setpoints` maps vehicle id -> commanded speed for this step (only
        CAVs are looked up); commands are capped by the Krauss-safe speed.
        """
        t = self.t
        dt = self.dt
        net = self.net
        p = self.params
        n_inter = net.n_intersections
        for i in range(n_inter):
            if self.plans[i] is None:
                raise RuntimeError(f"no signal plan installed at intersection {i}")

        inserted = self._spawn(t)

        active = [timing.active_movements(self.plans[i], t) for i in range(n_inter)]

        vehs: list[Vehicle] = []
        v_list: list[float] = []
        lead_v: list[float] = []
        gaps: list[float] = []
        setp: list[float] = []
        etas: list[float] = []
        green_front: list[bool] = []  # per gathered vehicle: may cross this step
        use_noise = p.sigma > 0.0

        for link in net.links:
            lid = link.lid
            length = link.length
            for lane_idx in range(3):
                lane = self.lanes[lid][lane_idx]
                for j, veh in enumerate(lane):
                    if j > 0:
                        leader = lane[j - 1]
                        g = leader.pos - p.vehicle_length - veh.pos
                        lv = leader.speed
                        may_cross = False
                    elif link.is_exit:
                        g = kernels.OPEN_ROAD_GAP
                        lv = 0.0
                        may_cross = True
                    else:
                        mv = veh.movement
                        green = mv == RIGHT or (link.approach, mv) in active[link.to_inter]
                        if not green:
                            g = length - veh.pos
                            lv = 0.0
                            may_cross = False
                        else:
                            nxt_lid, _, nxt_lane = veh.route[veh.hop + 1]
                            tlane = self.lanes[nxt_lid][nxt_lane]
                            if tlane:
                                tail = tlane[-1]
                                g = (length - veh.pos) + tail.pos - p.vehicle_length
                                lv = tail.speed
                            else:
                                g = kernels.OPEN_ROAD_GAP
                                lv = 0.0
                            may_cross = True
                    sp = kernels.NO_SETPOINT
                    if veh.category == CAV and setpoints is not None:
                        sp = setpoints.get(veh.vid, kernels.NO_SETPOINT)
                    eta = veh.dawdle_draw() if (use_noise and veh.category == HV) else 0.0
                    vehs.append(veh)
                    v_list.append(veh.speed)
                    lead_v.append(lv)
                    gaps.append(g)
                    setp.append(sp)
                    etas.append(eta)
                    green_front.append(may_cross)

        n = len(vehs)
        report = StepReport(
            t=t,
            passes=np.zeros((n_inter, 4, 3), dtype=np.int32),
            queues=np.zeros((n_inter, 4, 3), dtype=np.int32),
            lane_agg=np.zeros((n_inter, 4, 3, 5)),
            inserted=inserted,
        )
        if n == 0:
            self._audit_conservation()
            report.deferred_backlog = self.deferred_count
            report.n_vehicles = self.n_vehicles
            self.clock.step += 1
            return report

        v_new = kernels.car_following_update(
            np.array(v_list), np.array(lead_v), np.array(gaps),
            np.array(setp), np.array(etas),
            p.max_accel, p.decel, p.sigma, p.reaction_time, p.min_gap,
            net.speed_limit, dt)

        # arbitration: concurrent crossers converging on one target lane
        length = net.link_length
        cross_groups: dict[tuple[int, int], list[int]] = {}
        for i, veh in enumerate(vehs):
            if not green_front[i]:
                continue
            if veh.pos + v_new[i] * dt >= length and not net.links[veh.link_id].is_exit:
                nxt_lid, _, nxt_lane = veh.route[veh.hop + 1]
                cross_groups.setdefault((nxt_lid, nxt_lane), []).append(i)
        for (tlid, tlane_idx), idxs in sorted(cross_groups.items()):
            if len(idxs) == 1:
                continue
            idxs.sort(key=lambda i: (-(vehs[i].pos + v_new[i] * dt), vehs[i].vid))
            last_rear = math.inf
            for i in idxs:
                cpos = vehs[i].pos + v_new[i] * dt - length
                if cpos <= last_rear:
                    last_rear = cpos - p.vehicle_length
                else:
                    v_new[i] = max(0.0, (length - 0.01 - vehs[i].pos) / dt)

        # apply movement, accounting, and collect topology changes
        removals: list[tuple[int, int]] = []  # (link, lane) whose front leaves
        arrival_map: dict[tuple[int, int], list[tuple[float, int, Vehicle]]] = {}
        trace = self.trace
        for i, veh in enumerate(vehs):
            v0 = veh.speed
            v1 = float(v_new[i])
            veh.speed = v1
            veh.accel = (v1 - v0) / dt
            newpos = veh.pos + v1 * dt
            seg_j = veh.model.segment_energy_j(v0, v1, dt)
            veh.cum_energy_j += seg_j
            veh.dist_m += v1 * dt
            if v1 < QUEUE_SPEED:
                veh.idle_s += dt
            if trace is not None:
                trace.append((t, veh.vid, veh.link_id, veh.pos, v1, seg_j / dt))
            link = net.links[veh.link_id]
            if newpos >= length and green_front[i]:
                if link.is_exit:
                    self._finalize_exit(veh, t + dt)
                    removals.append((link.lid, veh.lane))
                    report.exits.append(self.exit_records[-1])
                else:
                    report.passes[link.to_inter, link.approach, veh.lane] += 1
                    removals.append((link.lid, veh.lane))
                    veh.hop += 1
                    veh.pos = newpos - length
                    key = (veh.link_id, veh.lane)
                    arrival_map.setdefault(key, []).append((veh.pos, veh.vid, veh))
            else:
                veh.pos = min(newpos, length)

        for lid, lane_idx in removals:
            self.lanes[lid][lane_idx].pop(0)
        for key in sorted(arrival_map):
            entering = arrival_map[key]
            entering.sort(key=lambda rec: (-rec[0], rec[1]))
            self.lanes[key[0]][key[1]].extend(rec[2] for rec in entering)

        # lane observations and queue counts on the post-step state
        det = net.detection_range
        occ_unit = p.vehicle_length + p.min_gap
        for i in range(n_inter):
            for d in range(4):
                lid = net.in_links[i][d]
                for lane_idx in range(3):
                    agg = report.lane_agg[i, d, lane_idx]
                    for veh in self.lanes[lid][lane_idx]:
                        if veh.pos >= length - det:
                            agg[0] += 1.0
                            agg[1] += occ_unit
                            agg[2] += veh.speed
                            stopped = veh.speed < QUEUE_SPEED
                            agg[3] += 1.0 if stopped else 0.0
                            agg[4] += 1.0 if veh.category == CAV else 0.0
        report.queues[:] = report.lane_agg[:, :, :, 3]

        if self.collision_check:
            self._audit_lanes()
        self._audit_conservation()

        report.deferred_backlog = self.deferred_count
        report.n_vehicles = self.n_vehicles
        self.clock.step += 1
        return report

    def _finalize_exit(self, veh: Vehicle, exit_t: float) -> None:
        self.n_vehicles -= 1
        self.exited += 1
        self.exit_records.append(ExitRecord(
            vid=veh.vid, category=veh.category, pt_kind=veh.pt_kind,
            dist_m=veh.dist_m, travel_s=exit_t - veh.insert_t,
            idle_s=veh.idle_s, energy_j=veh.cum_energy_j,
            spawn_t=veh.spawn_t, insert_t=veh.insert_t, exit_t=exit_t))

    def _audit_lanes(self) -> None:
        length = self.net.link_length
        for link in self.net.links:
            for lane_idx in range(3):
                lane = self.lanes[link.lid][lane_idx]
                for j, veh in enumerate(lane):
                    if not -1e-9 <= veh.pos <= length + 1e-9:
                        raise CollisionError(
                            f"t={self.t}: vehicle {veh.vid} off link "
                            f"{link.lid} at pos {veh.pos}")
                    if j > 0:
                        gap = lane[j - 1].pos - self.params.vehicle_length - veh.pos
                        if gap < -1e-9:
                            raise CollisionError(
                                f"t={self.t}: negative gap {gap:.3f} m between "
                                f"{lane[j - 1].vid} and {veh.vid} on link "
                                f"{link.lid} lane {lane_idx}")

    def _audit_conservation(self) -> None:
        total = self.n_vehicles + self.exited + self.deferred_count
        if total != self.created:
            raise RuntimeError(
                f"vehicle conservation broken at t={self.t}: created "
                f"{self.created} != in-network {self.n_vehicles} + exited "
                f"{self.exited} + deferred {self.deferred_count}")
