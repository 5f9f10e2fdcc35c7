"""Command-line interface: run, ablate, report, check-grads.

Every run writes a self-contained directory: the resolved config snapshot,
a JSON report, per-epoch loss CSV, accuracy figures, and checkpoints.  Set
``SEMKD_DETERMINISTIC=1`` to force deterministic kernels (and a single
compute thread) for bit-identical reruns.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import os
import statistics
import sys
from pathlib import Path

from .config import (
    apply_overrides,
    build_episode_config,
    build_model_config,
    build_stream,
    build_train_config,
    config_digest,
    dumps_toml,
    load_config,
    resolve_config,
    validate_config,
)
from .errors import ParseError, SemkdError
from .gradcheck import LOSS_COMPONENTS, check_gradients
from .model import save_checkpoint
from .trainer import run_dfsl, run_fscil

GRAD_TOLERANCE = 1e-3

ABLATION_SWITCHES = {
    "no-distill": [("train", "loss", "lambda2", 0.0)],
    "no-attn-loss": [("train", "loss", "lambda3", 0.0)],
    "single-embedding": [("train", "num_superclasses", 1)],
}


def apply_determinism_env() -> bool:
    """Honor SEMKD_DETERMINISTIC=1; returns whether it was enabled."""
    if os.environ.get("SEMKD_DETERMINISTIC") != "1":
        return False
    import torch

    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(1)
    return True


def _write_loss_log(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "phase", "lc", "ld", "la", "total"])
        for row in rows:
            writer.writerow(
                [
                    row["epoch"],
                    row["phase"],
                    *("" if row[k] is None else f"{row[k]:.8f}" for k in ("lc", "ld", "la", "total")),
                ]
            )


def _execute_run(resolved: dict, outdir: Path) -> dict:
    """Run one experiment into ``outdir`` and return the report payload."""
    from . import plots

    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "resolved_config.toml").write_text(dumps_toml(resolved), encoding="utf-8")

    stage = "dataset"
    try:
        stream = build_stream(resolved)
        stage = "train"
        train_cfg = build_train_config(resolved)
        model_cfg = build_model_config(resolved)
        payload = {
            "run_id": config_digest(resolved),
            "group": config_digest(resolved, ignore_seed=True),
            "protocol": resolved["eval"]["protocol"],
            "seed": resolved["seed"],
        }
        if resolved["eval"]["protocol"] == "FSCIL":
            state, reports = run_fscil(stream, train_cfg, model_cfg, checkpoint_dir=str(outdir))
            payload["sessions"] = [r.to_dict() for r in reports]
        else:
            episode_cfg = build_episode_config(resolved)
            state, dfsl = run_dfsl(stream, train_cfg, episode_cfg, model_cfg)
            payload["dfsl"] = dfsl.to_dict()
            save_checkpoint(outdir / "session_01.ckpt", state.model, state.head,
                            state.memory, state.superclasses)
        stage = "report"
        with open(outdir / "report.json", "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2)
        _write_loss_log(state.loss_log, outdir / "loss_log.csv")
        if "sessions" in payload:
            plots.session_curve(reports, outdir / "accuracy_curve.png")
        else:
            plots.dfsl_summary(dfsl, outdir / "dfsl_summary.png")
    except Exception as exc:
        raise RuntimeError(f"stage {stage!r} failed: {exc}") from exc
    return payload


def _load_validated(config_path: str, overrides) -> tuple[dict | None, list[str]]:
    if not os.path.exists(config_path):
        return None, [f"config file not found: {config_path}"]
    try:
        cfg = load_config(config_path)
        cfg = apply_overrides(cfg, overrides)
    except (ParseError, SemkdError) as exc:
        return None, [str(exc)]
    problems = validate_config(cfg)
    if problems:
        return None, problems
    return resolve_config(cfg), []


def cmd_run(args) -> int:
    resolved, problems = _load_validated(args.config, args.overrides)
    if problems:
        for p in problems:
            print(f"config error: {p}", file=sys.stderr)
        return 2
    outdir = Path(args.out or resolved["output_dir"]) / config_digest(resolved)
    try:
        payload = _execute_run(resolved, outdir)
    except RuntimeError as exc:
        print(exc, file=sys.stderr)
        return 1
    print(f"run {payload['run_id']} ({payload['protocol']}) -> {outdir}")
    if "sessions" in payload:
        for row in payload["sessions"]:
            novel = "-" if row["acc_novel"] is None else f"{row['acc_novel']:.3f}"
            hm = "-" if row["hm"] is None else f"{row['hm']:.3f}"
            print(
                f"  session {row['session']}: joint {row['joint_acc']:.3f} "
                f"base {row['acc_base']:.3f} novel {novel} hm {hm}"
            )
    else:
        d = payload["dfsl"]
        print(
            f"  joint {d['joint_acc']:.3f} +/- {d['joint_ci']:.3f} over {d['episodes']} episodes; "
            f"delta_b {d['delta_b']:.3f} delta_n {d['delta_n']:.3f} delta {d['delta']:.3f}"
        )
    return 0


def _apply_switches(resolved: dict, combo) -> dict:
    cfg = json.loads(json.dumps(resolved))
    for switch in combo:
        for *path, key, value in [tuple(p) for p in ABLATION_SWITCHES[switch]]:
            node = cfg
            for part in path:
                node = node[part]
            node[key] = value
    return cfg


def cmd_ablate(args) -> int:
    resolved, problems = _load_validated(args.config, args.overrides)
    if problems:
        for p in problems:
            print(f"config error: {p}", file=sys.stderr)
        return 2
    if resolved["eval"]["protocol"] != "FSCIL":
        print("config error: ablate requires eval.protocol = FSCIL", file=sys.stderr)
        return 2
    switches = sorted(set(args.switch or ABLATION_SWITCHES))
    unknown = [s for s in switches if s not in ABLATION_SWITCHES]
    if unknown:
        print(f"config error: unknown switches {unknown}", file=sys.stderr)
        return 2

    matrix_dir = Path(args.out or resolved["output_dir"]) / f"ablate-{config_digest(resolved)}"
    rows = []
    for r in range(len(switches) + 1):
        for combo in itertools.combinations(switches, r):
            variant = "+".join(combo) if combo else "full"
            cfg = _apply_switches(resolved, combo)
            cfg = resolve_config(cfg)
            try:
                payload = _execute_run(cfg, matrix_dir / variant)
            except RuntimeError as exc:
                print(f"variant {variant}: {exc}", file=sys.stderr)
                return 1
            last = payload["sessions"][-1]
            rows.append(
                {
                    "variant": variant,
                    "joint_acc": last["joint_acc"],
                    "acc_base": last["acc_base"],
                    "acc_novel": last["acc_novel"],
                    "hm": last["hm"],
                }
            )
            print(f"variant {variant}: last-session joint {last['joint_acc']:.3f}")

    from . import plots

    with open(matrix_dir / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["variant", "joint_acc", "acc_base",
                                                "acc_novel", "hm"])
        writer.writeheader()
        writer.writerows(rows)
    plots.ablation_bars(rows, matrix_dir / "ablation.png")
    print(f"ablation matrix ({len(rows)} variants) -> {matrix_dir}")
    return 0


def _aggregate_fscil(runs: list[dict]) -> dict[int, dict]:
    per_session: dict[int, dict] = {}
    by_session: dict[int, list[dict]] = {}
    for run in runs:
        for row in run["sessions"]:
            by_session.setdefault(row["session"], []).append(row)
    for session, entries in sorted(by_session.items()):
        joints = [e["joint_acc"] for e in entries]
        novels = [e["acc_novel"] for e in entries if e["acc_novel"] is not None]
        hms = [e["hm"] for e in entries if e["hm"] is not None]
        per_session[session] = {
            "runs": len(entries),
            "median": statistics.median(joints),
            "min": min(joints),
            "max": max(joints),
            "acc_base_median": statistics.median([e["acc_base"] for e in entries]),
            "acc_novel_median": statistics.median(novels) if novels else None,
            "hm_median": statistics.median(hms) if hms else None,
        }
    return per_session


def cmd_report(args) -> int:
    root = Path(args.results_dir)
    files = sorted(root.rglob("report.json"))
    if not files:
        print(f"no report.json files under {root}", file=sys.stderr)
        return 2
    groups: dict[tuple[str, str], list[dict]] = {}
    for path in files:
        with open(path, "r", encoding="utf-8") as fh:
            run = json.load(fh)
        groups.setdefault((run["protocol"], run["group"]), []).append(run)

    from . import plots

    rows = []
    curve_groups: dict[str, dict] = {}
    for (protocol, group), runs in sorted(groups.items()):
        if protocol == "FSCIL":
            per_session = _aggregate_fscil(runs)
            curve_groups[f"{protocol}:{group}"] = per_session
            for session, agg in per_session.items():
                rows.append(
                    {
                        "protocol": protocol,
                        "group": group,
                        "session": session,
                        "runs": agg["runs"],
                        "joint_median": agg["median"],
                        "joint_min": agg["min"],
                        "joint_max": agg["max"],
                        "acc_base_median": agg["acc_base_median"],
                        "acc_novel_median": agg["acc_novel_median"],
                        "hm_median": agg["hm_median"],
                        "delta_median": None,
                    }
                )
        else:
            joints = [run["dfsl"]["joint_acc"] for run in runs]
            deltas = [run["dfsl"]["delta"] for run in runs]
            rows.append(
                {
                    "protocol": protocol,
                    "group": group,
                    "session": None,
                    "runs": len(runs),
                    "joint_median": statistics.median(joints),
                    "joint_min": min(joints),
                    "joint_max": max(joints),
                    "acc_base_median": None,
                    "acc_novel_median": None,
                    "hm_median": None,
                    "delta_median": statistics.median(deltas),
                }
            )

    fieldnames = ["protocol", "group", "session", "runs", "joint_median", "joint_min",
                  "joint_max", "acc_base_median", "acc_novel_median", "hm_median",
                  "delta_median"]
    with open(root / "aggregate.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if v is None else v) for k, v in row.items()})
    if curve_groups:
        plots.aggregate_curves(curve_groups, root / "aggregate.png")
    print(f"aggregated {len(files)} runs in {len(groups)} groups -> {root / 'aggregate.csv'}")
    return 0


def cmd_check_grads(args) -> int:
    worst = 0.0
    for component in LOSS_COMPONENTS:
        report = check_gradients(component=component, seed=args.seed, epsilon=args.epsilon)
        worst = max(worst, report.max_rel_err)
        print(f"{component}: max relative error {report.max_rel_err:.3e} "
              f"({report.num_params} parameters)")
    print(f"overall max relative error: {worst:.3e} (tolerance {GRAD_TOLERANCE})")
    return 0 if worst < GRAD_TOLERANCE else 1


def main(argv=None) -> int:
    apply_determinism_env()
    parser = argparse.ArgumentParser(prog="semkd", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment from a TOML config")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--overrides", nargs="*", default=[], metavar="KEY=VALUE")
    p_run.add_argument("--out", default=None, help="override the output directory")
    p_run.set_defaults(func=cmd_run)

    p_ablate = sub.add_parser("ablate", help="run the loss/embedding ablation matrix")
    p_ablate.add_argument("--config", required=True)
    p_ablate.add_argument("--overrides", nargs="*", default=[], metavar="KEY=VALUE")
    p_ablate.add_argument("--switch", action="append", choices=sorted(ABLATION_SWITCHES),
                          help="repeatable; defaults to all switches")
    p_ablate.add_argument("--out", default=None)
    p_ablate.set_defaults(func=cmd_ablate)

    p_report = sub.add_parser("report", help="aggregate run reports in a directory")
    p_report.add_argument("results_dir")
    p_report.set_defaults(func=cmd_report)

    p_grads = sub.add_parser("check-grads", help="finite-difference gradient check")
    p_grads.add_argument("--seed", type=int, default=0)
    p_grads.add_argument("--epsilon", type=float, default=1e-4)
    p_grads.set_defaults(func=cmd_check_grads)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
