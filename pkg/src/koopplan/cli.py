"""Command-line entry point wiring datasets, training, reachability, and
planning into self-describing output artifacts (JSON/CSV plus binary model
and dataset files)."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import diku, systems
from .planner import PlannerConfig, load_problem, plan, plan_sst_baseline, solution_controls
from .reachability import InitialSet, adversarial_inflate, build_tis, propagate, sample_tuples


def _write_json(path, payload):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, default=_jsonable)


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, set):
        return sorted(obj)
    return str(obj)


def _config_hash(args):
    payload = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    return hashlib.sha256(json.dumps(payload, sort_keys=True,
                                     default=str).encode()).hexdigest()[:16]


def _run_manifest(args):
    return {"command": args.command, "config": {k: v for k, v in vars(args).items()
                                                if k not in ("func",)},
            "config_hash": _config_hash(args)}


def _parse_vector(text):
    return np.asarray([float(v) for v in text.split(",")], dtype=float)


def _parse_set(text):
    """Goal/start set given inline as JSON or as a path to a JSON file."""
    if os.path.exists(text):
        with open(text) as fh:
            data = json.load(fh)
    else:
        data = json.loads(text)
    return InitialSet(data["kind"], np.asarray(data["center"]),
                      half_widths=np.asarray(data["half_widths"])
                      if "half_widths" in data else None,
                      shape=np.asarray(data["shape"]) if "shape" in data else None)


def cmd_gen_data(args):
    spec = systems.get_system(args.system, dt=args.dt)
    counts = {"train": args.count_train, "val": args.count_val,
              "test": args.count_test}
    ds = systems.generate_dataset(spec, counts, args.horizon, args.seed)
    systems.save_dataset(ds, args.out)
    _write_json(os.path.join(args.out, "run.json"), _run_manifest(args))
    print(f"wrote dataset for {args.system} to {args.out} "
          f"({counts})")
    return 0


def cmd_train(args):
    spec = systems.get_system(args.system)
    ds = systems.load_dataset(args.data)
    if ds.system != args.system:
        raise SystemExit(f"dataset is for {ds.system}, not {args.system}")
    activation = "linear" if args.system == "planar_quadrotor" else "relu"
    model = diku.create_model(spec.n, spec.m, args.d, activation=activation,
                              seed=args.seed, system=args.system)
    config = diku.TrainConfig(k_steps=args.k_steps, gamma=args.gamma,
                              lr=args.lr, batch=args.batch,
                              epochs=args.epochs, seed=args.seed)
    result = diku.train(model, ds, config)
    result.model.meta["config_hash"] = _config_hash(args)
    diku.save_model(result.model, args.out)
    _write_json(args.out + ".train.json",
                {**_run_manifest(args),
                 "train_curve": result.train_curve,
                 "val_curve": result.val_curve,
                 "best_epoch": result.best_epoch})
    print(f"trained {args.system} model -> {args.out} "
          f"(best val loss {min(result.val_curve):.3e})")
    return 0


def cmd_eval_predict(args):
    model = diku.load_model(args.model)
    ds = systems.load_dataset(args.data)
    rows = []
    for i, traj in enumerate(ds[args.split]):
        if len(traj) < args.horizon + 1:
            continue
        X = traj.states[: args.horizon + 1]
        U = traj.controls[: args.horizon]
        if args.direction == "fwd":
            pred = diku.rollout_forward(model, X[0], U)
            err = np.abs(pred - X[1:]).max(axis=1)
        else:
            pred = diku.rollout_backward(model, X[-1], U)
            err = np.abs(pred - X[:-1]).max(axis=1)
        rows.append([i, float(err.max()), float(err.mean())])
    os.makedirs(os.path.dirname(os.path.abspath(args.report)), exist_ok=True)
    with open(args.report, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trajectory", "max_err", "mean_err"])
        w.writerows(rows)
    errs = np.asarray([r[1] for r in rows])
    print(f"{args.direction} {args.horizon}-step on {len(rows)} trajectories: "
          f"median max-err {np.median(errs):.3e}")
    return 0


def _write_flowpipe_csv(fp, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        n = fp.slices[0].shape[1]
        w.writerow(["t", "point_index"] + [f"x_{i+1}" for i in range(n)])
        sign = 1.0 if fp.direction == "forward" else -1.0
        for k, pts in enumerate(fp.slices):
            for j, p in enumerate(pts):
                w.writerow([sign * k * fp.dt, j] + list(p))


def cmd_reach(args):
    spec = systems.get_system(args.system, dt=args.dt)
    rng = np.random.default_rng(args.seed)
    os.makedirs(args.out, exist_ok=True)
    model = diku.load_model(args.model) if args.model else None
    if args.true_dynamics and model is None and args.goal:
        raise SystemExit("backward reachability/TIS needs a model")
    timings = {}
    if args.goal:
        goal = _parse_set(args.goal)
        x0 = _parse_vector(args.start)
        t0 = time.perf_counter()
        tis = build_tis(x0, goal, model, spec, M=args.M,
                        eta_fwd=args.eta_fwd, eta_bwd=args.eta_bwd,
                        dt=args.dt, T_max=args.horizon, rng=rng)
        timings["tis"] = time.perf_counter() - t0
        _write_flowpipe_csv(tis.forward, os.path.join(args.out, "frt.csv"))
        _write_flowpipe_csv(tis.backward, os.path.join(args.out, "brt.csv"))
        pairing = [{"forward_index": k,
                    "backward_range": [0, tis.max_backward_index(k)]}
                   for k in range(tis.n_steps + 1)]
        anchors = [tis.forward.anchor(k).tolist() for k in range(tis.n_steps + 1)]
        _write_json(os.path.join(args.out, "tis.json"),
                    {**_run_manifest(args), "cost": tis.cost, "dt": tis.dt,
                     "pairing": pairing, "anchors": anchors,
                     "timings": timings})
        print(f"TIS cost estimate {tis.cost:.2f}s -> {args.out}")
        return 0
    # forward-only flowpipe
    start = _parse_set(args.start) if not args.start.count(",") or \
        os.path.exists(args.start) or args.start.strip().startswith("{") \
        else None
    if start is None:
        start = InitialSet("point", _parse_vector(args.start))
    steps = int(round(args.horizon / args.dt))
    X0, U = sample_tuples(start, spec, args.M, steps, rng,
                          hold_control=args.hold_control)
    t0 = time.perf_counter()
    fp = propagate((X0, U), steps, "forward",
                   model=None if args.true_dynamics else model,
                   spec=spec, dt=args.dt)
    timings["frt_basic"] = time.perf_counter() - t0
    if not args.true_dynamics and model is not None and args.eta_fwd > 0:
        t0 = time.perf_counter()
        fp = adversarial_inflate(fp, start, model, spec, args.eta_fwd)
        timings["frt_inflated"] = time.perf_counter() - t0
    _write_flowpipe_csv(fp, os.path.join(args.out, "frt.csv"))
    _write_json(os.path.join(args.out, "reach.json"),
                {**_run_manifest(args), "timings": timings,
                 "dropped": fp.dropped})
    print(f"FRT over {args.horizon}s -> {args.out} ({timings})")
    return 0


def _planner_config(args):
    return PlannerConfig(iterations=args.N, mu=args.mu, eps=args.eps,
                         delta2=args.delta2, seed=args.seed, M=args.M,
                         eta_fwd=args.eta_fwd, eta_bwd=args.eta_bwd,
                         T_max=args.T_max, max_time=args.max_time)


def _run_plan(args, seed=None):
    spec = systems.get_system(args.system)
    problem = load_problem(args.problem, spec)
    config = _planner_config(args)
    if seed is not None:
        config.seed = seed
    if args.baseline:
        result = plan_sst_baseline(problem, config)
    else:
        model = diku.load_model(args.model)
        result = plan(problem, model, config)
    controls = (solution_controls(result.tree, result.solution_node).tolist()
                if result.solution_node >= 0 else [])
    return {"metrics": result.metrics, "events": result.events,
            "solution_controls": controls, "seed": config.seed}


def cmd_plan(args):
    out = _run_plan(args)
    _write_json(args.out, {**_run_manifest(args), **out})
    m = out["metrics"]
    print(f"{'SST' if args.baseline else 'informed'} plan: "
          f"T_IN={m['T_IN']:.2f}s C_IN={m['C_IN']:.2f} "
          f"T_OP={m['T_OP']:.2f}s C_OP={m['C_OP']:.2f} nodes={m['N_node']}")
    return 0


def cmd_bench(args):
    os.makedirs(args.out, exist_ok=True)
    keys = ["T_IN", "C_IN", "T_OP", "C_OP", "N_node"]
    table = []
    for method, baseline in (("ours", False), ("sst", True)):
        args.baseline = baseline
        per_seed = []
        for s in range(args.seeds):
            out = _run_plan(args, seed=args.seed + s)
            _write_json(os.path.join(args.out, f"{method}_seed{args.seed + s}.json"),
                        {**_run_manifest(args), **out})
            per_seed.append(out["metrics"])
        for key in keys:
            vals = np.asarray([m[key] for m in per_seed], dtype=float)
            table.append([method, key, float(np.mean(vals)), float(np.std(vals)),
                          float(np.median(vals))])
    with open(os.path.join(args.out, "bench.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "metric", "mean", "std", "median"])
        w.writerows(table)
    print(f"benchmark over {args.seeds} seeds -> {args.out}/bench.csv")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="koopplan",
                                description="Invertible-Koopman reachability "
                                            "and time-informed planning")
    p.add_argument("--threads", type=int, default=1,
                   help="cap on worker fan-out (current commands run "
                        "single-process)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a trajectory dataset")
    g.add_argument("--system", required=True, choices=systems.list_systems())
    g.add_argument("--count-train", type=int, default=10000)
    g.add_argument("--count-val", type=int, default=2500)
    g.add_argument("--count-test", type=int, default=5000)
    g.add_argument("--horizon", type=int, default=100)
    g.add_argument("--dt", type=float, default=0.05)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a surrogate model")
    t.add_argument("--system", required=True, choices=systems.list_systems())
    t.add_argument("--data", required=True)
    t.add_argument("--d", type=int, default=None)
    t.add_argument("--k-steps", type=int, default=15)
    t.add_argument("--gamma", type=float, default=0.9)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--batch", type=int, default=1024)
    t.add_argument("--epochs", type=int, default=200)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval-predict", help="long-horizon prediction report")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--horizon", type=int, default=100)
    e.add_argument("--direction", choices=["fwd", "bwd"], default="fwd")
    e.add_argument("--report", required=True)
    e.set_defaults(func=cmd_eval_predict)

    r = sub.add_parser("reach", help="reachable sets / time-informed set")
    r.add_argument("--system", required=True, choices=systems.list_systems())
    r.add_argument("--model", default=None)
    r.add_argument("--true-dynamics", action="store_true")
    r.add_argument("--start", required=True,
                   help="comma-separated state, or a set as JSON")
    r.add_argument("--goal", default=None, help="goal set as JSON (file or inline)")
    r.add_argument("--M", type=int, default=1000)
    r.add_argument("--eta-fwd", type=float, default=0.015)
    r.add_argument("--eta-bwd", type=float, default=0.04)
    r.add_argument("--dt", type=float, default=0.05)
    r.add_argument("--horizon", type=float, default=5.0)
    r.add_argument("--hold-control", action="store_true")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_reach)

    def add_plan_args(q):
        q.add_argument("--system", required=True, choices=systems.list_systems())
        q.add_argument("--model", default=None)
        q.add_argument("--problem", required=True)
        q.add_argument("--mu", type=float, default=0.9)
        q.add_argument("--N", type=int, default=500)
        q.add_argument("--eps", type=float, default=0.01)
        q.add_argument("--delta2", type=float, default=0.5)
        q.add_argument("--M", type=int, default=1000)
        q.add_argument("--eta-fwd", type=float, default=0.015)
        q.add_argument("--eta-bwd", type=float, default=0.04)
        q.add_argument("--T-max", type=float, default=5.0)
        q.add_argument("--max-time", type=float, default=120.0)
        q.add_argument("--seed", type=int, default=0)

    q = sub.add_parser("plan", help="solve one planning problem")
    add_plan_args(q)
    q.add_argument("--baseline", action="store_true",
                   help="plain SST instead of the informed planner")
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_plan)

    b = sub.add_parser("bench", help="seeded informed-vs-SST sweep")
    add_plan_args(b)
    b.add_argument("--seeds", type=int, default=20)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print(json.dumps({"error": "ValueError",
                          "detail": "--threads must be >= 1"}), file=sys.stderr)
        return 1
    # KOOPPLAN_OUT_ROOT relocates relative output paths
    root = os.environ.get("KOOPPLAN_OUT_ROOT")
    if root and getattr(args, "out", None) and not os.path.isabs(args.out):
        args.out = os.path.join(root, args.out)
    try:
        return args.func(args)
    except (ValueError, RuntimeError, OSError) as exc:
        print(json.dumps({"error": type(exc).__name__, "detail": str(exc)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
