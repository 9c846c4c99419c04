"""Shared pytest config: path setup, cached training artifacts, summary."""

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

PROTOCOL = "a1"  # bump to invalidate cached acceptance artifacts

ACCEPTANCE_SCENARIO = {
    "demand": {"rate_veh_s": 0.08, "cav_fraction": 0.6, "duration_s": 1200.0,
               "modulation_amp": 0.8, "modulation_period_s": 420.0},
    "krauss": {"sigma": 0.5},
    "marl": {"workers": 8, "epochs": 60, "auto_alpha": True,
             "reward_normalize_by_agents": True, "reward_scale": 0.01,
             "updates_per_transition": 3.0},
}
EVAL_SEEDS = list(range(500, 520))  # 20 Monte Carlo seeds per cell


def dataset_ranges():
    from ecosignal.ead import QueryRanges
    return QueryRanges(t_start=(2.0, 60.0), width=(8.0, 45.0),
                       distance=(30.0, 150.0), v0=(0.0, 13.9))


@pytest.fixture(scope="session")
def acceptance_cfg():
    from ecosignal.config import ScenarioConfig
    return ScenarioConfig.from_dict(ACCEPTANCE_SCENARIO)


@pytest.fixture(scope="session")
def cache_dir(acceptance_cfg):
    root = os.path.join(os.path.dirname(__file__), ".acceptance_cache",
                        f"{PROTOCOL}-{acceptance_cfg.config_hash()}")
    os.makedirs(root, exist_ok=True)
    return root


@pytest.fixture(scope="session")
def surrogate_path(acceptance_cfg, cache_dir):
    from ecosignal.ead import SurrogateModel, generate_dataset
    from ecosignal.energy import PowertrainModel
    path = os.path.join(cache_dir, "surrogate.ckpt")
    if not os.path.exists(path):
        spec = acceptance_cfg.lattice_spec()
        model = PowertrainModel("icev", acceptance_cfg.icev_params())
        rng = np.random.default_rng(810)
        feats, targets, _ = generate_dataset(900, rng, spec, model,
                                             dataset_ranges())
        sur = SurrogateModel(spec, model)
        sur.fit(feats, targets, np.random.default_rng(811), epochs=400)
        sur.save(path)
    return path


def train_cached(cfg, cache_root, kind, seed=0):
    from ecosignal import training
    out = os.path.join(cache_root, f"train_{kind}")
    ckpt = os.path.join(out, training.CHECKPOINT_NAME)
    if not os.path.exists(ckpt):
        training.train(cfg, out, controller_kind=kind, seed=seed,
                       progress=lambda m: print(f"[{kind}] {m}", flush=True))
    return ckpt


@pytest.fixture(scope="session")
def marl_ckpt(acceptance_cfg, cache_dir):
    return train_cached(acceptance_cfg, cache_dir, "marl")


@pytest.fixture(scope="session")
def irl_ckpt(acceptance_cfg, cache_dir):
    return train_cached(acceptance_cfg, cache_dir, "irl")


def eval_cached(cfg, cache_root, name, **kwargs):
    import csv

    from ecosignal import training
    path = os.path.join(cache_root, f"eval_{name}.csv")
    if not os.path.exists(path):
        rows = training.evaluate(cfg, seeds=EVAL_SEEDS, **kwargs)
        training.write_eval_csv(path, rows)
    with open(path) as fh:
        rows = [r for r in csv.DictReader(fh) if r["seed"] != "mean"]
    for row in rows:
        for key in ("avg_energy_l_per_100km", "avg_idling_s", "avg_speed_mps"):
            row[key] = float(row[key])
    return rows


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One pass/fail line per acceptance criterion at the end of the run."""
    lines = []
    for outcome in ("passed", "failed", "skipped"):
        for rep in terminalreporter.stats.get(outcome, []):
            name = getattr(rep, "nodeid", "")
            if "test_acceptance.py::test_criterion" in name:
                short = name.split("::")[-1]
                lines.append((short, outcome.upper()))
    if lines:
        terminalreporter.section("acceptance criteria")
        for short, outcome in sorted(set(lines)):
            terminalreporter.write_line(f"{outcome:8s} {short}")
