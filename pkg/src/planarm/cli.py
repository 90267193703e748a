"""Command-line entry points: data generation, training, fitting, runs."""
from __future__ import annotations

import argparse
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .model import desk_model
from .scenario import apply_toggle_overrides, load_scenario
from .sim import Metrics, check_safety, compute_metrics, load_log, run_scenario, save_log


def _cmd_gen_data(args) -> int:
    from .sca import generate_sca_dataset, write_dataset_csv

    model = load_scenario(args.scenario).robot if args.scenario else desk_model()
    data = generate_sca_dataset(model, args.count, seed=args.seed, dt_brake=args.dt_brake)
    with open(args.out, "w") as f:
        write_dataset_csv(data, f)
    viable = sum(1 for s in data if s.viable)
    print(f"wrote {len(data)} states to {args.out} (viable fraction {viable / len(data):.3f})")
    return 0


def _cmd_train_sca(args) -> int:
    from .sca import TrainConfig, read_dataset_csv, save_sca_model, train_sca

    model = load_scenario(args.scenario).robot if args.scenario else desk_model()
    with open(args.data) as f:
        dataset = read_dataset_csv(f)
    cfg = TrainConfig(epochs=args.epochs, seed=args.seed)
    sca = train_sca(dataset, model, cfg)
    save_sca_model(sca, args.out)
    m = sca.metrics
    print(
        f"saved {args.out}: val accuracy {m['val_accuracy']:.4f}, "
        f"viable recall {m['val_viable_recall']:.4f}, threshold {sca.gamma_thr:.3f}"
    )
    return 0


def _cmd_fit_sdf(args) -> int:
    from .sdf import fit_robot_sdfs, save_sdf_set

    model = load_scenario(args.scenario).robot if args.scenario else desk_model()
    sdfs = fit_robot_sdfs(
        model, degree=args.degree, seed=args.seed, sample_count=args.samples
    )
    save_sdf_set(sdfs, args.out)
    rmses = ", ".join(f"{s.fit_rmse * 1000:.2f}mm" for s in sdfs)
    print(f"saved {args.out}: {len(sdfs)} link fits, per-link RMSE {rmses}")
    return 0


def _run_one(path: str, toggles, seed, out):
    sc = load_scenario(path)
    apply_toggle_overrides(sc, toggles or [])
    if seed is not None:
        sc.seed = seed
    log, metrics = run_scenario(sc)
    if out:
        save_log(log, out)
    problems = check_safety(log, sc)
    return sc.name, metrics, problems


def _cmd_run(args) -> int:
    name, metrics, problems = _run_one(args.scenario, args.toggle, args.seed, args.out)
    print(Metrics.CSV_HEADER)
    print(metrics.csv_row(name))
    if problems:
        for p in problems:
            print(f"SAFETY VIOLATION: {p}", file=sys.stderr)
        return 2
    return 0


def _batch_worker(job):
    return _run_one(job, None, None, None)


def _cmd_batch(args) -> int:
    files = sorted(str(p) for p in Path(args.dir).glob("*.toml"))
    if not files:
        print(f"no scenario files in {args.dir}", file=sys.stderr)
        return 1
    rows = []
    failed = False
    with ProcessPoolExecutor(max_workers=args.jobs) as pool:
        for name, metrics, problems in pool.map(_batch_worker, files):
            rows.append(metrics.csv_row(name))
            if problems:
                failed = True
                for p in problems:
                    print(f"SAFETY VIOLATION [{name}]: {p}", file=sys.stderr)
    text = Metrics.CSV_HEADER + "\n" + "\n".join(rows) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return 2 if failed else 0


def _cmd_metrics(args) -> int:
    from .scenario import Scenario

    log = load_log(args.log)
    # metrics are computable from the log alone except the convergence
    # target, which the log does not carry; reuse the attractor if given
    sc = load_scenario(args.scenario) if args.scenario else Scenario()
    metrics = compute_metrics(log, sc)
    print(Metrics.CSV_HEADER)
    print(metrics.csv_row(log.meta.get("name", Path(args.log).stem)))
    return 0


def _cmd_teleop(args) -> int:
    from .teleop import serve

    sc = load_scenario(args.scenario)
    apply_toggle_overrides(sc, args.toggle or [])
    if args.seed is not None:
        sc.seed = args.seed
    serve(
        sc,
        port=args.port,
        snapshot_hz=args.snapshot_hz,
        script_path=args.script,
        out_log=args.out,
    )
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="planarm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a braking-labeled dataset")
    p.add_argument("--count", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dt-brake", type=float, default=1e-3)
    p.add_argument("--scenario", help="scenario TOML supplying the robot model")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train-sca", help="train the viability score classifier")
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scenario", help="scenario TOML supplying the robot model")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train_sca)

    p = sub.add_parser("fit-sdf", help="fit per-link distance fields")
    p.add_argument("--degree", type=int, default=12)
    p.add_argument("--samples", type=int, default=30_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scenario", help="scenario TOML supplying the robot model")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_fit_sdf)

    p = sub.add_parser("run", help="run one scenario headless")
    p.add_argument("scenario")
    p.add_argument("--toggle", action="append", metavar="NAME=on|off")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="trajectory log destination")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("batch", help="run every scenario in a directory")
    p.add_argument("dir")
    p.add_argument("--jobs", type=int, default=None)
    p.add_argument("--out", help="metrics CSV destination")
    p.set_defaults(func=_cmd_batch)

    p = sub.add_parser("metrics", help="recompute metrics from a log")
    p.add_argument("log")
    p.add_argument("--scenario", help="scenario TOML for the convergence target")
    p.set_defaults(func=_cmd_metrics)

    p = sub.add_parser("teleop", help="serve the live teleoperation bridge")
    p.add_argument("scenario")
    p.add_argument("--port", type=int, default=8080)
    p.add_argument("--snapshot-hz", type=float, default=50.0)
    p.add_argument("--toggle", action="append", metavar="NAME=on|off")
    p.add_argument("--seed", type=int)
    p.add_argument("--script", help="deterministic command replay (JSONL)")
    p.add_argument("--out", help="trajectory log destination")
    p.set_defaults(func=_cmd_teleop)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
