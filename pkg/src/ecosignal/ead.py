"""Green-window trajectory planning and the CAV profile-following layer.

The graph planner discretizes (time, distance, speed) into a lattice whose
edges carry gasoline-equivalent energy plus a comfort penalty, and runs
Dijkstra to the stop-line nodes inside the predicted passing window.  A
small MLP surrogate imitates the planner for real-time use; its raw
output is repaired (speed clamp, acceleration projection, crossing-time
rescale) until it satisfies every profile invariant.  Profiles command
per-step speed setpoints which the simulator caps at the car-following
safe speed, so planned trajectories can never create collisions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels, nn
from .energy import PowertrainModel
from .network import LEFT, STRAIGHT

PROFILE_POINTS = 16  # fixed-fraction setpoints in the surrogate target
MAX_LATTICE_NODES = 20_000_000


@dataclass(frozen=True)
class PlanQuery:
    """Planning inputs, times relative to the planning instant."""

    t_start: float  # earliest allowed stop-line crossing (s)
    t_end: float  # latest allowed crossing (s)
    distance: float  # meters to the stop line
    v0: float  # current speed (m/s)

    def __post_init__(self):
        if not self.t_start < self.t_end:
            raise ValueError("passing interval must satisfy start < end")
        if self.distance <= 0:
            raise ValueError("distance to signal must be positive")
        if self.v0 < 0:
            raise ValueError("speed must be non-negative")

    def as_features(self) -> np.ndarray:
        return np.array([self.t_start, self.t_end, self.distance, self.v0])


@dataclass(frozen=True)
class LatticeSpec:
    dt: float = 1.0
    dv: float = 0.5
    a_min: float = -3.0
    a_max: float = 2.0
    v_max: float = 13.9
    kappa: float = 0.1  # (m/s^2)^-2 s^-1 comfort weight, J-equivalent
    departure_distance: float = 50.0

    def __post_init__(self):
        if self.dt <= 0 or self.dv <= 0 or self.v_max <= 0:
            raise ValueError("dt, dv and v_max must be positive")
        if self.a_min > 0 or self.a_max < 0:
            raise ValueError("need a_min <= 0 <= a_max")

    @property
    def n_v(self) -> int:
        return int(math.floor(self.v_max / self.dv + 1e-9)) + 1

    @property
    def dist_unit(self) -> float:
        # one unit equals the displacement quantum (dv*dt/2), so the exact
        # trapezoidal displacement (k + k') of an edge is always integral
        return self.dv * self.dt / 2.0

    @property
    def dk_min(self) -> int:
        return int(math.ceil(self.a_min * self.dt / self.dv - 1e-9))

    @property
    def dk_max(self) -> int:
        return int(math.floor(self.a_max * self.dt / self.dv + 1e-9))


def edge_cost(v: float, v2: float, dt: float, model: PowertrainModel,
              kappa: float) -> float:
    """Planner edge weight: clamped segment energy plus comfort penalty.

    Regenerated (negative) energy is floored at zero to keep Dijkstra
    sound; signed energy is re-accumulated on the chosen path.
    """
    a = (v2 - v) / dt
    return max(0.0, model.segment_energy_j(v, v2, dt)) + kappa * a * a * dt


@dataclass
class Lattice:
    spec: LatticeSpec
    query: PlanQuery
    n_t: int
    d_sink: int  # stop-line distance in lattice units
    t_lo: int
    t_hi: int
    k_src: int
    cost_table: np.ndarray  # (n_v, n_v) floored energy + comfort
    signed_table: np.ndarray  # (n_v, n_v) true signed segment energy

    @property
    def n_v(self) -> int:
        return self.spec.n_v

    @property
    def n_d(self) -> int:
        return self.d_sink + 1

    @property
    def grid_node_bound(self) -> int:
        return self.n_t * self.n_d * self.n_v

    def edge_valid(self, t: int, d: int, k: int, k2: int) -> bool:
        if not (0 <= k2 < self.n_v and k + self.spec.dk_min <= k2 <= k + self.spec.dk_max):
            return False
        nd = d + k + k2
        if nd > self.d_sink or t + 1 > self.t_hi:
            return False
        if nd == self.d_sink and t + 1 < self.t_lo:
            return False
        return True

    def reachable_counts(self) -> tuple[int, int]:
        """Forward sweep counting reachable nodes and edges (test support)."""
        seen = {(0, 0, self.k_src)}
        frontier = [(0, 0, self.k_src)]
        n_edges = 0
        while frontier:
            nxt = []
            for (t, d, k) in frontier:
                if d == self.d_sink:
                    continue
                for k2 in range(max(0, k + self.spec.dk_min),
                                min(self.n_v - 1, k + self.spec.dk_max) + 1):
                    if not self.edge_valid(t, d, k, k2):
                        continue
                    n_edges += 1
                    node = (t + 1, d + k + k2, k2)
                    if node not in seen:
                        seen.add(node)
                        nxt.append(node)
            frontier = nxt
        return len(seen), n_edges


def build_lattice(query: PlanQuery, spec: LatticeSpec,
                  model: PowertrainModel) -> Lattice | None:
    """Construct the state lattice; None when the window is trivially gone."""
    t_lo = int(math.ceil(query.t_start / spec.dt - 1e-9))
    t_hi = int(math.floor(query.t_end / spec.dt + 1e-9))
    t_lo = max(t_lo, 1)
    if t_hi < t_lo:
        return None
    d_sink = int(round(query.distance / spec.dist_unit))
    if d_sink < 1:
        return None
    n_v = spec.n_v
    k_src = int(np.clip(round(query.v0 / spec.dv), 0, n_v - 1))
    n_t = t_hi + 1
    if n_t * (d_sink + 1) * n_v > MAX_LATTICE_NODES:
        raise ValueError("lattice too large; coarsen the discretization")
    speeds = np.arange(n_v) * spec.dv
    vk = speeds[:, None] + np.zeros((1, n_v))
    vk2 = np.zeros((n_v, 1)) + speeds[None, :]
    signed = model.segment_energy_grid(vk, vk2, spec.dt)
    acc = (vk2 - vk) / spec.dt
    cost = np.maximum(0.0, signed) + spec.kappa * acc * acc * spec.dt
    return Lattice(spec, query, n_t, d_sink, t_lo, t_hi, k_src, cost, signed)


@dataclass
class SpeedProfile:
    """Per-step speed setpoints from the planning instant through departure."""

    times: np.ndarray  # relative seconds, uniform dt grid starting at 0
    speeds: np.ndarray
    cross_time: float  # when the front reaches the stop line
    cross_speed: float
    energy_j: float  # signed model energy over approach + departure
    path_cost: float = 0.0  # planner objective (floored energy + comfort)

    def check(self, query: PlanQuery, spec: LatticeSpec, tol: float = 1e-6) -> None:
        if self.speeds.min() < -tol or self.speeds.max() > spec.v_max + tol:
            raise ValueError("profile speed outside [0, v_max]")
        acc = np.diff(self.speeds) / spec.dt
        if acc.size and (acc.min() < spec.a_min - tol or acc.max() > spec.a_max + tol):
            raise ValueError("profile acceleration outside bounds")
        if not query.t_start - tol <= self.cross_time <= query.t_end + tol:
            raise ValueError("crossing time outside the passing window")

    def speed_at(self, t_rel: float) -> float | None:
        idx = int(round(t_rel / (self.times[1] - self.times[0]))) if len(self.times) > 1 else 0
        if 0 <= idx < len(self.speeds):
            return float(self.speeds[idx])
        return None


def _departure_speeds(v_cross: float, spec: LatticeSpec) -> list[float]:
    """Accelerate toward the limit until `departure_distance` past the line."""
    out = []
    v = v_cross
    d = 0.0
    while d < spec.departure_distance and len(out) < 10_000:
        v2 = min(spec.v_max, v + spec.a_max * spec.dt)
        d += 0.5 * (v + v2) * spec.dt
        out.append(v2)
        v = v2
        if v2 == 0.0:  # a_max == 0 corner: cannot move, stop extending
            break
    return out


def _profile_from_speeds(speeds: np.ndarray, cross_time: float,
                         cross_speed: float, spec: LatticeSpec,
                         model: PowertrainModel, path_cost: float = 0.0) -> SpeedProfile:
    energy = model.profile_energy_j(speeds, spec.dt)
    times = np.arange(len(speeds)) * spec.dt
    return SpeedProfile(times, np.asarray(speeds, dtype=float), cross_time,
                        cross_speed, energy, path_cost)


def plan_gbtpa(query: PlanQuery, spec: LatticeSpec,
               model: PowertrainModel) -> SpeedProfile | None:
    """Minimum-cost lattice path through the window, as a speed profile.

    Returns None when no kinematically valid crossing exists (callers fall
    back to plain car-following).  Ties break on lexicographic node order.
    """
    lattice = build_lattice(query, spec, model)
    if lattice is None:
        return None
    node, cost, prev = kernels.lattice_dijkstra(
        lattice.n_t, lattice.n_d, lattice.n_v, lattice.d_sink,
        lattice.t_lo, lattice.t_hi, lattice.k_src,
        lattice.cost_table, lattice.spec.dk_min, lattice.spec.dk_max)
    if node < 0:
        return None
    ks = []
    cur = int(node)
    while cur >= 0:
        ks.append(cur % lattice.n_v)
        cur = int(prev[cur])
    ks.reverse()
    speeds = [k * spec.dv for k in ks]
    cross_time = (len(ks) - 1) * spec.dt
    cross_speed = speeds[-1]
    speeds.extend(_departure_speeds(cross_speed, spec))
    profile = _profile_from_speeds(np.array(speeds), cross_time, cross_speed,
                                   spec, model, path_cost=float(cost))
    profile.check(query, spec)
    return profile


# ---------------------------------------------------------------------------
# Dataset generation and the imitation surrogate
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QueryRanges:
    t_start: tuple = (2.0, 60.0)
    width: tuple = (8.0, 45.0)
    distance: tuple = (30.0, 150.0)
    v0: tuple = (0.0, 13.9)

    def sample(self, rng) -> PlanQuery:
        ts = rng.uniform(*self.t_start)
        return PlanQuery(ts, ts + rng.uniform(*self.width),
                         rng.uniform(*self.distance), rng.uniform(*self.v0))


def profile_to_target(profile: SpeedProfile, query: PlanQuery,
                      v_max: float) -> np.ndarray:
    """Encode a profile as crossing time plus fixed-fraction setpoints."""
    fracs = np.linspace(0.0, 1.0, PROFILE_POINTS)
    ts = fracs * profile.cross_time
    speeds = np.interp(ts, profile.times, profile.speeds)
    return np.concatenate([[profile.cross_time / query.t_end], speeds / v_max])


def generate_dataset(n: int, rng, spec: LatticeSpec, model: PowertrainModel,
                     ranges: QueryRanges = QueryRanges(), planner=None):
    """Sample n queries, plan each, keep the feasible ones.

    Returns (features (m,4), targets (m, 1+PROFILE_POINTS), n_discarded)
    with m <= n; regeneration with the same rng state is identical.
    """
    if planner is None:
        planner = lambda q: plan_gbtpa(q, spec, model)
    feats, targets = [], []
    discarded = 0
    for _ in range(n):
        query = ranges.sample(rng)
        profile = planner(query)
        if profile is None:
            discarded += 1
            continue
        feats.append(query.as_features())
        targets.append(profile_to_target(profile, query, spec.v_max))
    if feats:
        return np.array(feats), np.array(targets), discarded
    return (np.zeros((0, 4)), np.zeros((0, 1 + PROFILE_POINTS)), discarded)


class TrainingDiverged(RuntimeError):
    pass


class SurrogateModel:
    """MLP imitation of the lattice planner with invariant repair."""

    def __init__(self, spec: LatticeSpec, model: PowertrainModel,
                 hidden=(64, 64), feature_scale=None):
        self.spec = spec
        self.model = model
        self.hidden = tuple(hidden)
        self.feature_scale = np.asarray(
            feature_scale if feature_scale is not None
            else [60.0, 100.0, 150.0, spec.v_max], dtype=float)
        self.mlp: nn.MLP | None = None

    def _norm(self, feats: np.ndarray) -> np.ndarray:
        return np.atleast_2d(feats) / self.feature_scale

    def fit(self, features: np.ndarray, targets: np.ndarray, rng,
            epochs: int = 400, batch_size: int = 64, lr: float = 1e-3) -> list[float]:
        """Squared-error regression; returns the per-epoch loss curve."""
        if len(features) < 2:
            raise ValueError("dataset too small to fit")
        sizes = [4, *self.hidden, targets.shape[1]]
        acts = ["tanh"] * len(self.hidden) + ["linear"]
        self.mlp = nn.MLP(sizes, acts, rng=rng)
        opt = nn.Adam(self.mlp.params, lr=lr)
        x = self._norm(features)
        y = np.asarray(targets, dtype=float)
        n = len(x)
        curve = []
        for _ in range(epochs):
            order = rng.permutation(n)
            total = 0.0
            for lo in range(0, n, batch_size):
                idx = order[lo:lo + batch_size]
                pred, cache = self.mlp.forward(x[idx])
                err = pred - y[idx]
                total += float((err * err).sum())
                grads, _ = self.mlp.backward(cache, 2.0 * err / len(idx))
                opt.update(self.mlp.params, grads)
            loss = total / n
            if not np.isfinite(loss):
                raise TrainingDiverged(f"surrogate loss became {loss}")
            curve.append(loss)
        return curve

    # -- inference ----------------------------------------------------------
    def plan(self, query: PlanQuery) -> SpeedProfile | None:
        if self.mlp is None:
            raise RuntimeError("surrogate is not fitted")
        out, _ = self.mlp.forward(self._norm(query.as_features()))
        t_norm = float(out[0, 0])
        speeds_norm = out[0, 1:]
        t_c = float(np.clip(t_norm, 0.02, 1.0) * query.t_end)
        t_c = float(np.clip(t_c, query.t_start, query.t_end))
        fracs = np.linspace(0.0, 1.0, PROFILE_POINTS)
        raw = np.clip(speeds_norm, 0.0, 1.0) * self.spec.v_max
        return self._repair(fracs * t_c, raw, query)

    def _repair(self, ts: np.ndarray, speeds: np.ndarray,
                query: PlanQuery) -> SpeedProfile | None:
        """Clamp, project, and rescale until every invariant holds."""
        spec = self.spec
        dt = spec.dt
        horizon = int(math.ceil(query.t_end / dt)) + 2
        grid_t = np.arange(horizon + 1) * dt
        grid_v = np.interp(grid_t, ts, speeds, right=float(speeds[-1]))
        grid_v[0] = query.v0
        for _ in range(12):
            grid_v = np.clip(grid_v, 0.0, spec.v_max)
            grid_v[0] = query.v0
            kernels.project_speeds(grid_v, spec.a_min * dt, spec.a_max * dt,
                                   spec.v_max)
            seg = 0.5 * (grid_v[:-1] + grid_v[1:]) * dt
            cum = np.concatenate([[0.0], np.cumsum(seg)])
            if cum[-1] < query.distance:
                if np.all(grid_v[1:] >= spec.v_max - 1e-9):
                    return None  # even flat-out cannot reach in time
                grid_v[1:] = np.minimum(grid_v[1:] * 1.3 + 0.5, spec.v_max)
                continue
            idx = int(np.searchsorted(cum, query.distance))
            frac = (query.distance - cum[idx - 1]) / max(1e-9, cum[idx] - cum[idx - 1])
            t_d = (idx - 1 + frac) * dt
            if t_d < query.t_start - 1e-9:
                factor = max(0.3, t_d / query.t_start) * 0.98
                grid_v[1:] *= factor
            elif t_d > query.t_end + 1e-9:
                factor = min(1.5, t_d / query.t_end) * 1.02
                grid_v[1:] = np.minimum(grid_v[1:] * factor, spec.v_max)
            else:
                cross_speed = float(np.interp(t_d, grid_t, grid_v))
                keep = idx  # grid points covering [0, cross]
                speeds_out = list(grid_v[:keep + 1])
                speeds_out.extend(_departure_speeds(float(grid_v[keep]), spec))
                profile = _profile_from_speeds(np.array(speeds_out), t_d,
                                               cross_speed, spec, self.model)
                try:
                    profile.check(query, spec)
                except ValueError:
                    return None
                return profile
        return None

    # -- persistence ----------------------------------------------------------
    def save(self, path) -> None:
        if self.mlp is None:
            raise RuntimeError("surrogate is not fitted")
        arrays = self.mlp.flat_arrays("surrogate")
        arrays["feature_scale"] = self.feature_scale
        meta = {"kind": "ead-surrogate", "mlp": self.mlp.spec(),
                "hidden": list(self.hidden),
                "spec": {"dt": self.spec.dt, "dv": self.spec.dv,
                         "a_min": self.spec.a_min, "a_max": self.spec.a_max,
                         "v_max": self.spec.v_max, "kappa": self.spec.kappa,
                         "departure_distance": self.spec.departure_distance},
                "powertrain": self.model.kind}
        nn.save_checkpoint(path, arrays, meta)

    @classmethod
    def load(cls, path, model: PowertrainModel | None = None) -> "SurrogateModel":
        arrays, meta = nn.load_checkpoint(path)
        spec = LatticeSpec(**meta["spec"])
        if model is None:
            model = PowertrainModel(meta["powertrain"])
        obj = cls(spec, model, hidden=tuple(meta["hidden"]),
                  feature_scale=arrays["feature_scale"])
        mspec = meta["mlp"]
        obj.mlp = nn.MLP(mspec["sizes"], mspec["activations"],
                         params=[[np.array(arrays[f"surrogate.w{l}"]),
                                  np.array(arrays[f"surrogate.b{l}"])]
                                 for l in range(len(mspec["sizes"]) - 1)])
        return obj


# ---------------------------------------------------------------------------
# Profile-following vehicle layer
# ---------------------------------------------------------------------------

@dataclass
class _Tracked:
    profile: SpeedProfile
    t0: float  # absolute planning instant
    hop: int
    window: tuple
    source: str  # "current" or "hybrid"
    shortfall: int = 0


class EadVehicleLayer:
    """Plans and follows green-window profiles for CAVs on approach.

    Planning triggers when a CAV enters detection range of a signalized
    left/straight approach.  The window is the executing cycle's green if
    still catchable, else the hybrid-predicted next-cycle interval.
    Replans fire when the refreshed window shifts by more than
    `replan_threshold_s`, when the planned crossing time lapses, or when a
    leader blocks profile tracking; repeated planner failures blacklist
    the approach (plain car-following).
    """

    def __init__(self, simulator, predictor, planner, spec: LatticeSpec,
                 replan_threshold_s: float = 2.0, max_failures: int = 3):
        self.sim = simulator
        self.predictor = predictor
        self.planner = planner
        self.spec = spec
        self.replan_threshold_s = replan_threshold_s
        self.max_failures = max_failures
        self._tracked: dict[int, _Tracked] = {}
        self._failures: dict[tuple[int, int], int] = {}
        self._last_setpoint: dict[int, float] = {}
        self.replan_events = 0
        self.plans_made = 0

    def _window_for(self, veh, link, t):
        """Best current knowledge of the usable green window (absolute).

        Returns the raw interval (not clipped to `t`) so refreshes under a
        correct prediction are stable step to step.
        """
        inter = link.to_inter
        g0, g1 = self.predictor.current_green_interval(
            inter, link.approach, veh.movement, t)
        dist = link.length - veh.pos
        if g1 >= t and self._earliest_arrival(dist, veh.speed) <= g1 - t:
            return (g0, g1), "current"
        w0, w1 = self.predictor.passing_interval(
            inter, link.approach, veh.movement, t)
        return (w0, w1), "hybrid"

    def _earliest_arrival(self, dist, v0):
        a = max(self.spec.a_max, 1e-6)
        v_max = self.spec.v_max
        t_flat = (v_max - v0) / a
        d_flat = 0.5 * (v0 + v_max) * t_flat
        if d_flat >= dist:
            return (-v0 + math.sqrt(v0 * v0 + 2 * a * dist)) / a
        return t_flat + (dist - d_flat) / v_max

    def _try_plan(self, veh, link, t) -> None:
        key = (veh.vid, veh.hop)
        if self._failures.get(key, 0) >= self.max_failures:
            return
        (w0, w1), source = self._window_for(veh, link, t)
        if w1 - t <= 1.0:
            return
        dist = link.length - veh.pos
        if dist <= 0.5:
            return
        query = PlanQuery(max(0.5, w0 - t), w1 - t, dist, veh.speed)
        profile = self.planner(query)
        if profile is None:
            self._failures[key] = self._failures.get(key, 0) + 1
            return
        self.plans_made += 1
        self._tracked[veh.vid] = _Tracked(profile, t, veh.hop, (w0, w1), source)

    def step(self, t: float) -> dict:
        """Refresh plans before a sim step; returns vid -> setpoint."""
        sim = self.sim
        net = sim.net
        det = net.detection_range
        length = net.link_length
        from .sim import CAV
        for link in net.links:
            if link.to_inter < 0:
                continue
            for lane_idx in range(3):
                for veh in sim.lanes[link.lid][lane_idx]:
                    if veh.category != CAV or veh.movement not in (LEFT, STRAIGHT):
                        continue
                    if veh.pos < length - det:
                        continue
                    tr = self._tracked.get(veh.vid)
                    if tr is None or tr.hop != veh.hop:
                        self._try_plan(veh, link, t)
                        continue
                    # previously commanded speed unmet -> leader blocked us
                    last = self._last_setpoint.get(veh.vid)
                    if last is not None and veh.speed < last - 0.5:
                        tr.shortfall += 1
                    else:
                        tr.shortfall = 0
                    (w0, w1), _ = self._window_for(veh, link, t)
                    cross_abs = tr.t0 + tr.profile.cross_time
                    stale = (cross_abs < t  # planned crossing lapsed
                             or cross_abs < w0 - 1e-6  # would cross at red
                             or cross_abs > w1 + 1e-6
                             or abs(w0 - tr.window[0]) > self.replan_threshold_s
                             or abs(w1 - tr.window[1]) > self.replan_threshold_s
                             or tr.shortfall >= 3)
                    if stale:
                        self.replan_events += 1
                        del self._tracked[veh.vid]
                        self._try_plan(veh, link, t)

        # emit setpoints for everything still tracked (approach + departure)
        setpoints: dict[int, float] = {}
        expired = []
        for vid, tr in self._tracked.items():
            idx = int(round((t - tr.t0) / self.spec.dt)) + 1
            if idx >= len(tr.profile.speeds):
                expired.append(vid)
                continue
            sp = float(tr.profile.speeds[idx])
            setpoints[vid] = sp
            self._last_setpoint[vid] = sp
        for vid in expired:
            del self._tracked[vid]
            self._last_setpoint.pop(vid, None)
        return setpoints
