"""Shared test fixtures: scenario builders and manual vehicle injection."""

import numpy as np

from ecosignal import network as netmod
from ecosignal import sim as simmod
from ecosignal import timing
from ecosignal.config import ScenarioConfig
from ecosignal.sim import DemandConfig, KraussParams, Simulator, Vehicle


def small_config(**demand) -> ScenarioConfig:
    base = {"rate_veh_s": 0.08, "cav_fraction": 0.5, "duration_s": 600.0}
    base.update(demand)
    return ScenarioConfig.from_dict({"demand": base})


def make_sim(rows=1, cols=1, rate=0.0, seed=0, sigma=0.0, cav_fraction=0.0,
             duration=600.0, ev_fraction=0.0, speed_limit=13.9,
             link_length=300.0, turn_probs=(0.2, 0.6, 0.2), **kwargs) -> Simulator:
    net = netmod.build_grid(rows, cols, link_length, speed_limit)
    demand = DemandConfig(rate=rate, turn_probs=turn_probs,
                          cav_fraction=cav_fraction, ev_fraction=ev_fraction,
                          duration_s=duration)
    return Simulator(net, KraussParams(sigma=sigma), demand, seed, **kwargs)


def all_green_plan(t_switch=3.0):
    # a normal plan; "all green" for a chosen movement comes from long greens
    return timing.fixed_plan([12.0, 12.0, 12.0, 12.0], t_switch, 4.0)


def long_green_plan(phase: int, t_min=4.0, t_switch=3.0):
    """Plan whose `phase` green covers nearly the whole cycle."""
    greens = [t_min] * 4
    greens[phase] = 138.0 - 3 * t_min - 4 * t_switch
    return timing.fixed_plan(greens, t_switch, t_min)


def install_everywhere(sim: Simulator, plan) -> None:
    for i in range(sim.net.n_intersections):
        sim.install_plan(i, plan)


def straight_route(net, entry_lid):
    """Route going straight from an entry link until it exits."""
    hops = []
    lid = entry_lid
    while True:
        link = net.links[lid]
        if link.is_exit:
            hops.append((lid, netmod.NO_MOVEMENT, netmod.STRAIGHT))
            return hops
        hops.append((lid, netmod.STRAIGHT, netmod.STRAIGHT))
        lid = net.out_links[link.to_inter][
            netmod.exit_side(link.approach, netmod.STRAIGHT)]


def inject_vehicle(sim: Simulator, route, category=simmod.HV, pos=0.0,
                   speed=0.0, pt_kind="icev") -> Vehicle:
    """Place a vehicle directly on its first route hop (test control)."""
    veh = Vehicle(sim._next_vid, category, pt_kind, sim._models[pt_kind],
                  route, sim.t, sim.clock.episode_seed)
    sim._next_vid += 1
    veh.pos = pos
    veh.speed = speed
    veh.insert_t = sim.t
    lane = sim.lanes[veh.link_id][veh.lane]
    lane.append(veh)
    lane.sort(key=lambda v: -v.pos)
    sim.created += 1
    sim.inserted += 1
    sim.n_vehicles += 1
    return veh
