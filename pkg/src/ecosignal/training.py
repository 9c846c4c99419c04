"""Experiment engine: episode collection, the training loop, evaluation runs.

Workers collect whole episodes against read-only policy snapshots
(refreshed every epoch); a single learner performs the gradient updates.
With one worker everything runs in-process and is bit-deterministic.  The
independent-learning variant reuses the same machinery but splits each
joint transition into per-agent samples rewarded by their local terms,
which removes the value-decomposition sum.
"""

from __future__ import annotations

import concurrent.futures
import csv
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import episode as ep
from . import sensing
from .config import ScenarioConfig
from .ead import SurrogateModel
from .marl import ActorOnly, MarlConfig, ReplayBuffer, SharedAgent, Transition
from .sim import Simulator

CHECKPOINT_NAME = "checkpoint.ckpt"
TRAINING_LOG = "training_log.csv"
MANIFEST_NAME = "run_manifest.json"


def build_sim(cfg: ScenarioConfig, seed: int, cav_fraction: float | None = None,
              ev_fraction: float | None = None, trace=None) -> Simulator:
    demand = cfg.demand_config(cav_fraction)
    if ev_fraction is not None:
        demand = type(demand)(**{**demand.__dict__, "ev_fraction": ev_fraction})
    return Simulator(cfg.build_network(), cfg.krauss, demand, seed,
                     dt=cfg.sim.dt, icev_params=cfg.icev_params(),
                     ev_params=cfg.ev_params(),
                     collision_check=cfg.sim.collision_check, trace=trace)


def make_controller(kind: str, cfg: ScenarioConfig, policy=None,
                    sample: bool = False, rng=None) -> ep.SignalController:
    sig = cfg.signal
    if kind == "fixed":
        return ep.FixedController(sig.fixed_greens, sig.t_switch, sig.t_min)
    if kind == "webster":
        return ep.WebsterController(sig.webster_window_s,
                                    sig.saturation_flow_veh_s,
                                    sig.t_switch, sig.t_min, cfg.sim.dt)
    if kind in ("marl", "irl"):
        if policy is None:
            raise ValueError(f"{kind} controller needs a policy")
        return ep.RLCycleController(
            policy, sig.t_cyc_base, sig.t_min, sig.t_switch, cfg.sim.dt,
            sample=sample, rng=rng,
            reward_normalize_by_agents=cfg.marl.reward_normalize_by_agents)
    raise ValueError(f"unknown controller kind {kind!r}")


def collect_episode(cfg: ScenarioConfig, policy, seed: int,
                    cav_fraction: float | None = None, sample: bool = True,
                    vehicle_layer: str = "krauss", surrogate=None) -> ep.EpisodeResult:
    """One policy-driven episode; transitions are per common cycle."""
    sim = build_sim(cfg, seed, cav_fraction)
    controller = make_controller("marl", cfg, policy=policy, sample=sample,
                                 rng=np.random.default_rng([seed, 5]))
    return ep.run_episode(
        sim, controller, vehicle_layer=vehicle_layer, surrogate=surrogate,
        lattice_spec=cfg.lattice_spec(),
        planner_model=_planner_model(cfg),
        collect_transitions=True, history_depth=cfg.ead.history_depth,
        max_drain_s=cfg.sim.max_drain_s)


def _planner_model(cfg: ScenarioConfig):
    from .energy import PowertrainModel
    if cfg.ead.powertrain == "ev":
        return PowertrainModel("ev", cfg.ev_params())
    return PowertrainModel("icev", cfg.icev_params())


def _transitions_to_payload(transitions):
    return [(tr.states.astype(np.float32), tr.actions.astype(np.float32),
             tr.log_probs.astype(np.float32), tr.reward,
             tr.next_states.astype(np.float32), tr.done,
             None if tr.local_rewards is None else
             np.asarray(tr.local_rewards, dtype=np.float32))
            for tr in transitions]


def _payload_to_transitions(payload):
    return [Transition(np.array(s, dtype=float), np.array(a, dtype=float),
                       np.array(lp, dtype=float), float(r),
                       np.array(s2, dtype=float), bool(d),
                       None if loc is None else np.array(loc, dtype=float))
            for s, a, lp, r, s2, d, loc in payload]


def _worker_collect(args):
    (cfg_dict, snapshot, actor_spec, seed, cav_fraction, vehicle_layer,
     surrogate_path) = args
    cfg = ScenarioConfig.from_dict(cfg_dict)
    policy = ActorOnly.from_snapshot(snapshot, actor_spec)
    surrogate = SurrogateModel.load(surrogate_path) if surrogate_path else None
    result = collect_episode(cfg, policy, seed, cav_fraction, sample=True,
                             vehicle_layer=vehicle_layer, surrogate=surrogate)
    return (_transitions_to_payload(result.transitions), result.episode_reward,
            result.metrics, result.n_cycles)


def _split_local(transitions):
    """IRL view: one single-agent transition per intersection, local reward."""
    out = []
    for tr in transitions:
        n = tr.states.shape[0]
        for i in range(n):
            out.append(Transition(
                tr.states[i:i + 1], tr.actions[i:i + 1], tr.log_probs[i:i + 1],
                float(tr.local_rewards[i]), tr.next_states[i:i + 1], tr.done))
    return out


@dataclass
class TrainResult:
    checkpoint_path: str
    log_rows: list
    manifest: dict
    agent: SharedAgent = None


def train(cfg: ScenarioConfig, out_dir: str, controller_kind: str = "marl",
          seed: int = 0, vehicle_layer: str = "krauss",
          surrogate_path: str | None = None, resume: bool = False,
          progress=None) -> TrainResult:
    """Run the full training loop and write checkpoint + log + manifest.

    `controller_kind` 'marl' trains the shared-critic sum; 'irl' trains on
    per-intersection local rewards with purely local values.
    """
    if controller_kind not in ("marl", "irl"):
        raise ValueError("training supports controller kinds 'marl' and 'irl'")
    os.makedirs(out_dir, exist_ok=True)
    mcfg: MarlConfig = cfg.marl
    net = cfg.build_network()
    n_agents = net.n_intersections

    ckpt_path = os.path.join(out_dir, CHECKPOINT_NAME)
    log_path = os.path.join(out_dir, TRAINING_LOG)
    log_rows: list[dict] = []
    start_epoch = 0
    if resume and os.path.exists(ckpt_path) and os.path.exists(log_path):
        agent = SharedAgent.load(ckpt_path, mcfg)
        with open(log_path) as fh:
            log_rows = [dict(row) for row in csv.DictReader(fh)]
        start_epoch = len(log_rows)
    else:
        agent = SharedAgent(mcfg, n_agents=n_agents, seed=seed)

    buffer = ReplayBuffer(mcfg.buffer_capacity)
    learner_rng = np.random.default_rng([seed, 23])
    fraction_rng = np.random.default_rng([seed, 29])
    cav_spec = cfg.cav_fraction_spec()
    surrogate = SurrogateModel.load(surrogate_path) if surrogate_path else None
    if vehicle_layer == "mltpa" and surrogate is None:
        raise ValueError("vehicle_layer 'mltpa' needs --surrogate")

    cfg_dict = cfg.to_dict()
    actor_spec = agent.actor.spec()
    wall_times = []
    pool = None
    if mcfg.workers > 1:
        pool = concurrent.futures.ProcessPoolExecutor(max_workers=mcfg.workers)
    try:
        for epoch in range(start_epoch, mcfg.epochs):
            t0 = time.perf_counter()
            snapshot = agent.snapshot_actor()
            jobs = []
            for w in range(mcfg.workers):
                ep_seed = seed * 1_000_000 + epoch * 1_000 + w
                frac = (fraction_rng.uniform(*cav_spec)
                        if isinstance(cav_spec, tuple) else cav_spec)
                jobs.append((cfg_dict, snapshot, actor_spec, ep_seed, frac,
                             vehicle_layer, surrogate_path))

            rewards, n_new = [], 0
            if pool is None:
                for job in jobs:
                    policy = ActorOnly.from_snapshot(snapshot, actor_spec)
                    result = collect_episode(cfg, policy, job[3], job[4],
                                             sample=True,
                                             vehicle_layer=vehicle_layer,
                                             surrogate=surrogate)
                    transitions = result.transitions
                    if controller_kind == "irl":
                        transitions = _split_local(transitions)
                    for tr in transitions:
                        buffer.push(tr)
                    n_new += len(transitions)
                    rewards.append(result.episode_reward)
            else:
                futures = [pool.submit(_worker_collect, job) for job in jobs]
                for w, fut in enumerate(futures):
                    try:
                        payload, ep_reward, _, _ = fut.result()
                    except Exception as exc:  # worker crash: drop the episode
                        if progress:
                            progress(f"worker {w} failed: {exc!r}; episode dropped")
                        continue
                    transitions = _payload_to_transitions(payload)
                    if controller_kind == "irl":
                        transitions = _split_local(transitions)
                    for tr in transitions:
                        buffer.push(tr)
                    n_new += len(transitions)
                    rewards.append(ep_reward)

            diag = {"critic_loss": float("nan"), "actor_loss": float("nan"),
                    "entropy": float("nan")}
            n_updates = int(round(mcfg.updates_per_transition * n_new))
            stats = []
            for _ in range(n_updates):
                if len(buffer) < mcfg.batch_size:
                    break
                batch = buffer.sample(mcfg.batch_size, learner_rng)
                stats.append(agent.update(batch, learner_rng))
            if stats:
                diag = {k: float(np.mean([s[k] for s in stats]))
                        for k in ("critic_loss", "actor_loss", "entropy")}
            row = {"epoch": epoch,
                   "mean_episode_reward": float(np.mean(rewards)) if rewards else float("nan"),
                   "critic_loss": diag["critic_loss"],
                   "actor_loss": diag["actor_loss"],
                   "entropy": diag["entropy"]}
            log_rows.append(row)
            wall_times.append(time.perf_counter() - t0)
            if progress:
                progress(f"epoch {epoch}: reward={row['mean_episode_reward']:.2f} "
                         f"critic={row['critic_loss']:.3f} "
                         f"entropy={row['entropy']:.2f} "
                         f"({wall_times[-1]:.1f}s)")
    finally:
        if pool is not None:
            pool.shutdown()

    agent.save(ckpt_path)
    _write_csv(log_path, log_rows,
               ["epoch", "mean_episode_reward", "critic_loss", "actor_loss",
                "entropy"])
    manifest = {
        "kind": "train", "controller": controller_kind,
        "config_hash": cfg.config_hash(), "seed": seed,
        "epochs": len(log_rows), "workers": mcfg.workers,
        "vehicle_layer": vehicle_layer,
        "wall_time_s_per_epoch": wall_times,
        "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    with open(os.path.join(out_dir, MANIFEST_NAME), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return TrainResult(ckpt_path, log_rows, manifest, agent)


# ---------------------------------------------------------------------------
# Evaluation sweeps
# ---------------------------------------------------------------------------

EVAL_COLUMNS = ["seed", "controller", "vehicle_layer", "cav_fraction",
                "powertrain", "avg_energy_l_per_100km", "avg_idling_s",
                "avg_speed_mps", "episode_duration_s", "n_vehicles"]


def evaluate(cfg: ScenarioConfig, controller_kind: str, seeds,
             vehicle_layer: str = "krauss", checkpoint: str | None = None,
             surrogate_path: str | None = None, cav_fraction: float | None = None,
             powertrain: str = "icev", trace_path: str | None = None) -> list[dict]:
    """One frozen-policy episode per seed; returns per-seed metric rows."""
    policy = ActorOnly.from_checkpoint(checkpoint) if checkpoint else None
    surrogate = SurrogateModel.load(surrogate_path) if surrogate_path else None
    if vehicle_layer == "mltpa" and surrogate is None:
        raise ValueError("vehicle layer 'mltpa' needs a surrogate model")
    ev_fraction = {"icev": 0.0, "ev": 1.0}.get(powertrain)
    if ev_fraction is None:
        raise ValueError("powertrain must be 'icev' or 'ev'")
    rows = []
    for seed in seeds:
        trace = [] if trace_path else None
        sim = build_sim(cfg, int(seed), cav_fraction, ev_fraction, trace=trace)
        controller = make_controller(controller_kind, cfg, policy=policy,
                                     sample=False)
        result = ep.run_episode(
            sim, controller, vehicle_layer=vehicle_layer, surrogate=surrogate,
            lattice_spec=cfg.lattice_spec(), planner_model=_planner_model(cfg),
            history_depth=cfg.ead.history_depth,
            max_drain_s=cfg.sim.max_drain_s)
        m = result.metrics
        rows.append({
            "seed": int(seed), "controller": controller_kind,
            "vehicle_layer": vehicle_layer,
            "cav_fraction": (cfg.demand_config(cav_fraction).cav_fraction),
            "powertrain": powertrain,
            "avg_energy_l_per_100km": m["avg_energy_l_per_100km"],
            "avg_idling_s": m["avg_idling_s"],
            "avg_speed_mps": m["avg_speed_mps"],
            "episode_duration_s": sim.t,
            "n_vehicles": m["n_vehicles"],
        })
        if trace_path:
            _write_csv(trace_path, [
                {"time": r[0], "id": r[1], "link": r[2], "position": r[3],
                 "speed": r[4], "energy_rate_w": r[5]} for r in trace],
                ["time", "id", "link", "position", "speed", "energy_rate_w"])
    return rows


def aggregate_rows(rows: list[dict]) -> dict:
    """Mean metrics over per-seed rows (aggregate CSV row)."""
    agg = {"seed": "mean", "controller": rows[0]["controller"],
           "vehicle_layer": rows[0]["vehicle_layer"],
           "cav_fraction": rows[0]["cav_fraction"],
           "powertrain": rows[0]["powertrain"]}
    for key in ("avg_energy_l_per_100km", "avg_idling_s", "avg_speed_mps",
                "episode_duration_s", "n_vehicles"):
        agg[key] = float(np.mean([r[key] for r in rows]))
    return agg


def _write_csv(path, rows, columns) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row.get(k)) for k in columns})


def _fmt(value):
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, np.integer):
        return int(value)
    return value


def write_eval_csv(path, rows) -> None:
    all_rows = rows + [aggregate_rows(group) for group in _group_cells(rows)]
    _write_csv(path, all_rows, EVAL_COLUMNS)


def _group_cells(rows):
    cells = {}
    for row in rows:
        key = (row["controller"], row["vehicle_layer"], row["cav_fraction"],
               row["powertrain"])
        cells.setdefault(key, []).append(row)
    return [cells[k] for k in sorted(cells)]
