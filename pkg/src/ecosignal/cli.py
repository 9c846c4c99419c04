"""Experiment driver CLI.

Subcommands: train, eval, report, plan, predict-spat, dataset,
fit-surrogate, bench.  All outputs are CSV/JSON and byte-stable given
identical inputs and seeds; wall-clock timings and timestamps live only in
the run-manifest JSON written next to each output.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time

import numpy as np

from . import __version__, ead, energy, kernels, training
from .config import ScenarioConfig
from .ead import LatticeSpec, PlanQuery, QueryRanges, SurrogateModel, plan_gbtpa
from .episode import run_episode
from .marl import ActorOnly
from .training import build_sim, evaluate, make_controller, write_eval_csv


def _load_config(path: str | None) -> ScenarioConfig:
    if path is None:
        return ScenarioConfig.from_dict({})
    return ScenarioConfig.from_yaml(path)


def _parse_seeds(spec: str) -> list[int]:
    """'0:20' -> range, '3,5,9' -> list, '7' -> [7]."""
    if ":" in spec:
        lo, hi = spec.split(":")
        return list(range(int(lo), int(hi)))
    return [int(s) for s in spec.split(",")]


def _write_manifest(path: str, payload: dict) -> None:
    payload = dict(payload)
    payload["code_version"] = __version__
    payload["created_at"] = time.strftime("%Y-%m-%dT%H:%M:%S")
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    if args.workers is not None or args.epochs is not None:
        m = cfg.marl
        cfg.marl = type(m)(**{**m.__dict__,
                              "workers": args.workers or m.workers,
                              "epochs": args.epochs or m.epochs})
    result = training.train(cfg, args.out, controller_kind=args.controller,
                            seed=args.seed, vehicle_layer=args.vehicle_layer,
                            surrogate_path=args.surrogate, resume=args.resume,
                            progress=print if not args.quiet else None)
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"training log: {os.path.join(args.out, training.TRAINING_LOG)}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args.config)
    seeds = _parse_seeds(args.seeds)
    rows = evaluate(cfg, args.controller, seeds,
                    vehicle_layer=args.vehicle_layer,
                    checkpoint=args.checkpoint, surrogate_path=args.surrogate,
                    cav_fraction=args.cav_fraction, powertrain=args.powertrain,
                    trace_path=args.trace)
    write_eval_csv(args.out, rows)
    _write_manifest(args.out + ".manifest.json", {
        "kind": "eval", "config_hash": cfg.config_hash(), "seeds": seeds,
        "controller": args.controller, "vehicle_layer": args.vehicle_layer,
        "cav_fraction": args.cav_fraction, "powertrain": args.powertrain})
    print(f"wrote {len(rows)} per-seed rows (+aggregates) to {args.out}")
    return 0


METRICS = ("avg_energy_l_per_100km", "avg_idling_s", "avg_speed_mps")


def _read_aggregate(path: str) -> list[dict]:
    with open(path) as fh:
        rows = [r for r in csv.DictReader(fh) if r["seed"] == "mean"]
    if not rows:
        raise SystemExit(f"error: {path} has no aggregate ('mean') rows")
    return rows


def cmd_report(args) -> int:
    base_rows = _read_aggregate(args.baseline)
    if len(base_rows) != 1:
        raise SystemExit(f"error: baseline {args.baseline} must hold exactly "
                         f"one aggregate row, found {len(base_rows)}")
    base = base_rows[0]
    entries = []
    for path in args.results:
        for row in _read_aggregate(path):
            label = (f"{row['controller']}+{row['vehicle_layer']}"
                     f"@cav={row['cav_fraction']},{row['powertrain']}")
            entry = {"label": label, "source": os.path.basename(path)}
            for metric in METRICS:
                val = float(row[metric])
                ref = float(base[metric])
                if ref == 0:
                    raise SystemExit(f"error: baseline metric {metric} is zero")
                entry[metric] = val
                entry[metric + "_pct"] = (val - ref) / ref * 100.0
            entries.append(entry)
    report = {"baseline": {m: float(base[m]) for m in METRICS},
              "baseline_label": f"{base['controller']}+{base['vehicle_layer']}",
              "rows": entries}
    with open(args.out + ".json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    lines = [f"baseline: {report['baseline_label']}  "
             + "  ".join(f"{m}={report['baseline'][m]:.3f}" for m in METRICS)]
    header = f"{'run':44s} " + " ".join(f"{m:>26s}" for m in METRICS)
    lines.append(header)
    for entry in entries:
        cells = " ".join(
            f"{entry[m]:>15.3f} ({entry[m + '_pct']:+6.2f}%)" for m in METRICS)
        lines.append(f"{entry['label']:44s} {cells}")
    text = "\n".join(lines) + "\n"
    with open(args.out + ".txt", "w") as fh:
        fh.write(text)
    print(text, end="")
    return 0


def cmd_plan(args) -> int:
    cfg = _load_config(args.config)
    spec = cfg.lattice_spec()
    model = energy.PowertrainModel(args.powertrain)
    query = PlanQuery(args.start, args.end, args.distance, args.v0)
    t0 = time.perf_counter()
    profile = plan_gbtpa(query, spec, model)
    dt_plan = time.perf_counter() - t0
    if profile is None:
        print("infeasible: no kinematically valid crossing inside the window")
        return 1
    print(f"graph planner: cross at t={profile.cross_time:.1f}s "
          f"v={profile.cross_speed:.2f} m/s, energy {profile.energy_j / 1e3:.1f} kJ, "
          f"path cost {profile.path_cost / 1e3:.1f} kJ ({dt_plan * 1e3:.1f} ms)")
    print("t[s]  setpoint[m/s]")
    for t, v in zip(profile.times, profile.speeds):
        print(f"{t:5.1f}  {v:6.2f}")
    if args.surrogate:
        surrogate = SurrogateModel.load(args.surrogate)
        t0 = time.perf_counter()
        sp = surrogate.plan(query)
        dt_sur = time.perf_counter() - t0
        if sp is None:
            print("surrogate: infeasible")
        else:
            print(f"surrogate: cross at t={sp.cross_time:.1f}s, energy "
                  f"{sp.energy_j / 1e3:.1f} kJ ({dt_sur * 1e3:.2f} ms, "
                  f"{dt_plan / max(dt_sur, 1e-9):.0f}x faster)")
    return 0


def cmd_predict_spat(args) -> int:
    cfg = _load_config(args.config)
    policy = ActorOnly.from_checkpoint(args.checkpoint) if args.checkpoint else None
    sim = build_sim(cfg, args.seed, args.cav_fraction)
    controller = make_controller(args.controller, cfg, policy=policy, sample=False)
    spat_log: list = []
    result = run_episode(sim, controller, vehicle_layer="krauss",
                         collect_transitions=False,
                         history_depth=cfg.ead.history_depth,
                         audit_prediction=True, max_drain_s=cfg.sim.max_drain_s,
                         spat_log=spat_log)
    audit_cols = ["t", "intersection", "beta",
                  "r_tcyc", "r_g1", "r_g2", "r_g3", "r_g4",
                  "p_tcyc", "p_g1", "p_g2", "p_g3", "p_g4",
                  "h_tcyc", "h_g1", "h_g2", "h_g3", "h_g4"]
    training._write_csv(args.out, result.prediction_audit, audit_cols)
    spat_cols = ["intersection", "cycle_index", "start_time", "t_cyc",
                 "g1", "g2", "g3", "g4"]
    training._write_csv(args.out + ".spat.csv", spat_log, spat_cols)
    _write_manifest(args.out + ".manifest.json", {
        "kind": "predict-spat", "config_hash": cfg.config_hash(),
        "seed": args.seed, "controller": args.controller})
    print(f"wrote {len(result.prediction_audit)} audit rows to {args.out}")
    return 0


def cmd_dataset(args) -> int:
    cfg = _load_config(args.config)
    spec = cfg.lattice_spec()
    model = training._planner_model(cfg)
    rng = np.random.default_rng(args.seed)
    feats, targets, discarded = ead.generate_dataset(
        args.n, rng, spec, model, cfg.query_ranges())
    cols = (["start", "end", "distance", "v0", "t_cross_norm"]
            + [f"setpoint{i + 1}" for i in range(ead.PROFILE_POINTS)])
    rows = []
    for f, t in zip(feats, targets):
        row = dict(zip(cols[:4], f))
        row["t_cross_norm"] = t[0]
        for i in range(ead.PROFILE_POINTS):
            row[f"setpoint{i + 1}"] = t[1 + i]
        rows.append(row)
    training._write_csv(args.out, rows, cols)
    _write_manifest(args.out + ".manifest.json", {
        "kind": "dataset", "config_hash": cfg.config_hash(), "seed": args.seed,
        "n_sampled": args.n, "n_feasible": len(feats),
        "n_discarded": discarded})
    print(f"{len(feats)} feasible / {args.n} sampled "
          f"({discarded} infeasible discarded) -> {args.out}")
    return 0


def load_dataset_csv(path):
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    feats = np.array([[float(r["start"]), float(r["end"]),
                       float(r["distance"]), float(r["v0"])] for r in rows])
    targets = np.array([[float(r["t_cross_norm"])]
                        + [float(r[f"setpoint{i + 1}"])
                           for i in range(ead.PROFILE_POINTS)] for r in rows])
    return feats, targets


def _planner_benchmark(surrogate, feats, spec, model, n_max=80):
    """Fidelity/time report on a held-out slice, re-planning with the graph."""
    n = min(n_max, len(feats))
    within = total = failed = 0
    t_graph = t_sur = 0.0
    surrogate.plan(PlanQuery(*feats[0]))  # warm the kernels
    plan_gbtpa(PlanQuery(*feats[0]), spec, model)
    for f in feats[:n]:
        query = PlanQuery(*f)
        t0 = time.perf_counter()
        ref = plan_gbtpa(query, spec, model)
        t_graph += time.perf_counter() - t0
        if ref is None:
            continue
        total += 1
        t0 = time.perf_counter()
        approx = surrogate.plan(query)
        t_sur += time.perf_counter() - t0
        if approx is None:
            failed += 1
        elif abs(approx.energy_j - ref.energy_j) / abs(ref.energy_j) <= 0.10:
            within += 1
    return {
        "queries": total,
        "mean_plan_time_gbtpa_s": t_graph / max(1, total),
        "mean_plan_time_surrogate_s": t_sur / max(1, total),
        "speedup": (t_graph / max(1, total)) / max(1e-12, t_sur / max(1, total)),
        "within_10pct_share": within / max(1, total),
        "surrogate_infeasible": failed,
    }


def cmd_fit_surrogate(args) -> int:
    cfg = _load_config(args.config)
    feats, targets = load_dataset_csv(args.dataset)
    if len(feats) < args.min_rows:
        raise SystemExit(f"error: dataset holds {len(feats)} rows, "
                         f"below the configured minimum {args.min_rows}")
    spec = cfg.lattice_spec()
    model = training._planner_model(cfg)
    surrogate = SurrogateModel(spec, model)
    rng = np.random.default_rng(args.seed)
    n_holdout = max(8, len(feats) // 10)
    train_f, train_t = feats[:-n_holdout], targets[:-n_holdout]
    curve = surrogate.fit(train_f, train_t, rng, epochs=args.epochs)
    surrogate.save(args.out)
    report = _planner_benchmark(surrogate, feats[-n_holdout:], spec, model)
    with open(args.out + ".benchmark.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    _write_manifest(args.out + ".manifest.json", {
        "kind": "fit-surrogate", "config_hash": cfg.config_hash(),
        "seed": args.seed, "dataset": args.dataset, "rows": len(train_f),
        "holdout_rows": n_holdout, "final_loss": curve[-1]})
    print(f"fitted on {len(train_f)} rows, final loss {curve[-1]:.5f} -> {args.out}")
    print(f"held-out fidelity {report['within_10pct_share']:.1%}, "
          f"speedup {report['speedup']:.0f}x")
    return 0


def cmd_bench(args) -> int:
    mode = "numba JIT" if kernels.numba_enabled() else "pure-python/numpy fallback"
    print(f"active kernel path: {mode} (ECOSIGNAL_NUMBA toggles)")
    for row in kernels.benchmark_kernels(repeats=args.repeats):
        parts = [f"{row['kernel']:24s} n={row['n']:<8d}"]
        for key in ("numpy_s", "python_s", "numba_s"):
            if row.get(key) is not None:
                parts.append(f"{key[:-2]}={row[key] * 1e3:8.3f} ms")
        if "speedup" in row:
            parts.append(f"speedup={row['speedup']:6.1f}x")
        print("  ".join(parts))
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="ecosignal",
        description="Mixed-traffic signal control and eco-driving lab")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a signal-control policy")
    p.add_argument("--config", help="scenario YAML (defaults when omitted)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--controller", choices=["marl", "irl"], default="marl")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--vehicle-layer", choices=["krauss", "mltpa", "gbtpa"],
                   default="krauss")
    p.add_argument("--surrogate", help="surrogate checkpoint for mltpa")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="Monte Carlo evaluation sweep")
    p.add_argument("--config")
    p.add_argument("--controller",
                   choices=["webster", "fixed", "irl", "marl"], required=True)
    p.add_argument("--vehicle-layer", choices=["krauss", "mltpa", "gbtpa"],
                   default="krauss")
    p.add_argument("--checkpoint")
    p.add_argument("--surrogate")
    p.add_argument("--seeds", default="0:50", help="'lo:hi' or comma list")
    p.add_argument("--cav-fraction", type=float)
    p.add_argument("--powertrain", choices=["icev", "ev"], default="icev")
    p.add_argument("--trace", help="also export a vehicle trajectory trace CSV")
    p.add_argument("--out", required=True, help="metrics CSV path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="relative comparison vs a baseline CSV")
    p.add_argument("--baseline", required=True)
    p.add_argument("results", nargs="+")
    p.add_argument("--out", required=True, help="output prefix (.txt/.json)")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("plan", help="debug one trajectory-planning query")
    p.add_argument("--config")
    p.add_argument("--start", type=float, required=True)
    p.add_argument("--end", type=float, required=True)
    p.add_argument("--distance", type=float, required=True)
    p.add_argument("--v0", type=float, required=True)
    p.add_argument("--powertrain", choices=["icev", "ev"], default="icev")
    p.add_argument("--surrogate", help="compare against a fitted surrogate")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("predict-spat", help="audit hybrid SPaT prediction")
    p.add_argument("--config")
    p.add_argument("--controller",
                   choices=["webster", "fixed", "irl", "marl"], default="fixed")
    p.add_argument("--checkpoint")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cav-fraction", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict_spat)

    p = sub.add_parser("dataset", help="generate planner imitation data")
    p.add_argument("--config")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("fit-surrogate", help="fit the imitation surrogate")
    p.add_argument("--config")
    p.add_argument("--dataset", required=True)
    p.add_argument("--min-rows", type=int, default=10_000)
    p.add_argument("--epochs", type=int, default=400)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit_surrogate)

    p = sub.add_parser("bench", help="compare JIT and fallback kernel paths")
    p.add_argument("--repeats", type=int, default=20)
    p.set_defaults(func=cmd_bench)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
