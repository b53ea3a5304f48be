"""Command-line entry point.

    cascade-ttt generate    --config synth.cfg --out data/
    cascade-ttt train-joint --data data/ --config train.cfg --out runs/
    cascade-ttt meta-train  --data data/ --checkpoint runs/<run>/joint.ckpt
    cascade-ttt evaluate    --data data/ --checkpoint runs/<run>/meta.ckpt
    cascade-ttt ttt-eval    --data data/ --checkpoint runs/<run>/meta.ckpt --delta 0,2,4
    cascade-ttt report      --baseline runs/<eval> --adapted runs/<ttt>

Every command except ``generate`` writes into a fresh run directory
(``<out>/<timestamp>-seed<seed>`` unless ``--run-dir`` is given) holding the
resolved ``config.txt``, a ``run.txt`` with paths and flags, ``run.log`` and
its outputs.  Failures print one ``error: <Kind>: <message>`` line to stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

from .config import ConfigError, TrainConfig, parse_kv_text, render_kv
from .data import load_dataset, write_dataset
from .metrics import EvalReport, delta_msle, write_delta
from .plots import delta_histogram, metric_curve
from .state import load_checkpoint, save_checkpoint
from .synth import SynthConfig, generate_synthetic
from .training import Problem, TrainingError, evaluate, joint_train, meta_train

log = logging.getLogger("cascade_ttt")

STRUCTURAL_KEYS = ("dim", "gcn_layers", "hgnn_layers", "shared_embedding")


class CommandError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# argument plumbing
# ---------------------------------------------------------------------------

def _overrides(args) -> dict[str, str]:
    values: dict[str, str] = {}
    if getattr(args, "config", None):
        values.update(parse_kv_text(Path(args.config).read_text(encoding="utf-8"), args.config))
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    if getattr(args, "directed", False):
        values["directed"] = "true"
    if getattr(args, "no_seen_mask", False):
        values["seen_mask"] = "false"
    if getattr(args, "eval_all_positions", False):
        values["eval_all_positions"] = "true"
    if getattr(args, "meta_order", None) is not None:
        values["meta_order"] = str(args.meta_order)
    if getattr(args, "seed", None) is not None:
        values["seed"] = str(args.seed)
    return values


def _resolve_config(args, base: TrainConfig | None = None) -> TrainConfig:
    values = _overrides(args)
    if base is not None:
        changed = [k for k in STRUCTURAL_KEYS if k in values and str(getattr(base, k)).lower() != values[k].lower()]
        if changed:
            raise ConfigError(f"cannot change model structure of a checkpoint: {', '.join(changed)}")
    return TrainConfig.from_mapping(values, base=base)


def _data_paths(args) -> tuple[Path, Path]:
    if args.data:
        root = Path(args.data)
        return root / "cascades.txt", root / "graph.txt"
    if args.cascades and args.graph:
        return Path(args.cascades), Path(args.graph)
    raise CommandError("give --data DIR or both --cascades and --graph")


def _problem(args, cfg: TrainConfig) -> Problem:
    cascades, graph = _data_paths(args)
    for p in (cascades, graph):
        if not p.exists():
            raise CommandError(f"missing input file {p}")
    dataset = load_dataset(cascades, graph, directed=cfg.directed, max_cascade_length=cfg.max_cascade_length)
    return Problem.from_dataset(dataset, cfg)


def _run_dir(args, cfg: TrainConfig) -> Path:
    if args.run_dir:
        path = Path(args.run_dir)
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        path = Path(args.out) / f"{stamp}-seed{cfg.seed}"
        k = 1
        while path.exists():
            path = Path(args.out) / f"{stamp}-seed{cfg.seed}-{k}"
            k += 1
    path.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(path / "run.log", mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logging.getLogger("cascade_ttt").addHandler(handler)
    return path


def _write_run_files(run_dir: Path, cfg: TrainConfig, args, extra: dict | None = None) -> None:
    (run_dir / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    info = {"command": args.command}
    for key in ("data", "cascades", "graph", "checkpoint", "baseline", "adapted", "config"):
        value = getattr(args, key, None)
        if value:
            info[key] = value
    info.update(extra or {})
    (run_dir / "run.txt").write_text(render_kv(info), encoding="utf-8")


def _write_history(rows: list[dict], path: Path) -> None:
    if not rows:
        path.write_text("", encoding="utf-8")
        return
    keys = sorted({k for r in rows for k in r}, key=lambda k: (k not in rows[0], list(rows[0]).index(k) if k in rows[0] else 0, k))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def _load_state(args, allowed_phases: tuple[str, ...]):
    if not Path(args.checkpoint).exists():
        raise CommandError(f"missing checkpoint {args.checkpoint}")
    state = load_checkpoint(args.checkpoint)
    if state.phase not in allowed_phases:
        raise CommandError(f"{args.command} needs a checkpoint from phase {'/'.join(allowed_phases)}, "
                           f"got {state.phase!r}")
    return state


def _dump_diagnostics(run_dir: Path, exc: TrainingError) -> None:
    (run_dir / "diagnostics.json").write_text(json.dumps(exc.diagnostics, indent=2, default=str),
                                              encoding="utf-8")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    values = {}
    if args.config:
        values.update(parse_kv_text(Path(args.config).read_text(encoding="utf-8"), args.config))
    for item in args.set or []:
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    if args.seed is not None:
        values["seed"] = str(args.seed)
    cfg = SynthConfig.from_mapping(values)
    dataset = generate_synthetic(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_dataset(dataset, out / "cascades.txt", out / "graph.txt")
    (out / "synth.cfg").write_text(cfg.to_text(), encoding="utf-8")
    log.info("wrote %d cascades over %d users to %s", len(dataset.cascades), dataset.num_users, out)
    return 0


def cmd_train_joint(args) -> int:
    cfg = _resolve_config(args)
    problem = _problem(args, cfg)
    run_dir = _run_dir(args, cfg)
    _write_run_files(run_dir, cfg, args)
    try:
        state, history = joint_train(problem, cfg)
    except TrainingError as exc:
        _dump_diagnostics(run_dir, exc)
        raise
    save_checkpoint(state, run_dir / "joint.ckpt")
    _write_history(history, run_dir / "history.csv")
    print(run_dir)
    return 0


def cmd_meta_train(args) -> int:
    state = _load_state(args, ("joint",))
    cfg = _resolve_config(args, base=state.config)
    problem = _problem(args, cfg)
    run_dir = _run_dir(args, cfg)
    _write_run_files(run_dir, cfg, args)
    try:
        meta_state, history = meta_train(problem, state, cfg)
    except TrainingError as exc:
        _dump_diagnostics(run_dir, exc)
        raise
    save_checkpoint(meta_state, run_dir / "meta.ckpt")
    _write_history(history, run_dir / "history.csv")
    print(run_dir)
    return 0


def _split_cascades(problem: Problem, name: str):
    return {"train": problem.split.train, "valid": problem.split.valid, "test": problem.split.test}[name]


def cmd_evaluate(args) -> int:
    state = _load_state(args, ("init", "joint", "meta"))
    cfg = _resolve_config(args, base=state.config)
    state.config = cfg
    problem = _problem(args, cfg)
    run_dir = _run_dir(args, cfg)
    _write_run_files(run_dir, cfg, args, {"split": args.split, "delta": 0})
    report = evaluate(state, problem, _split_cascades(problem, args.split), delta=0, workers=args.workers)
    report.write(run_dir)
    print(run_dir)
    return 0


def _parse_deltas(text: str) -> list[int]:
    try:
        deltas = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"--delta expects integers, got {text!r}") from None
    if not deltas or any(d < 0 for d in deltas):
        raise ConfigError("--delta needs one or more non-negative integers")
    return deltas


def cmd_ttt_eval(args) -> int:
    state = _load_state(args, ("joint", "meta"))
    cfg = _resolve_config(args, base=state.config)
    state.config = cfg
    problem = _problem(args, cfg)
    deltas = _parse_deltas(args.delta) if args.delta is not None else [cfg.inner_steps]
    alpha = cfg.inner_lr if args.alpha is None else args.alpha
    run_dir = _run_dir(args, cfg)
    _write_run_files(run_dir, cfg, args, {"split": args.split, "delta": ",".join(map(str, deltas)),
                                          "alpha": alpha})
    cascades = _split_cascades(problem, args.split)
    curve = []
    for delta in deltas:
        report = evaluate(state, problem, cascades, delta=delta, alpha=alpha, workers=args.workers)
        report.write(run_dir if len(deltas) == 1 else run_dir / f"delta_{delta}")
        curve.append((delta, report.aggregates()))
    if len(deltas) > 1:
        keys = [k for k in curve[0][1] if k not in ("n_cascades", "n_positions")]
        with open(run_dir / "delta_curve.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["delta"] + keys)
            for delta, agg in curve:
                w.writerow([delta] + [repr(float(agg[k])) for k in keys])
        metric_curve(deltas, {"MSLE": [agg["msle"] for _, agg in curve]}, run_dir / "delta_curve_msle.png")
        metric_curve(deltas, {f"Hits@{k}": [agg[f"hits@{k}"] for _, agg in curve] for k in (10, 50, 100)},
                     run_dir / "delta_curve_hits.png", ylabel="Hits@k")
    print(run_dir)
    return 0


def cmd_report(args) -> int:
    without = EvalReport.read(args.baseline)
    with_ttt = EvalReport.read(args.adapted)
    cfg = TrainConfig()
    run_dir = _run_dir(args, cfg)
    _write_run_files(run_dir, cfg, args)
    rows = delta_msle(without, with_ttt)
    summary = write_delta(rows, run_dir)
    delta_histogram([r.delta for r in rows], run_dir / "delta_msle_hist.png")
    log.info("degradation ratio %.4f over %d cascades", summary["degradation_ratio"], summary["n_cascades"])
    print(run_dir)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser, data: bool = True, train_flags: bool = True) -> None:
    if data:
        p.add_argument("--data", help="directory with cascades.txt and graph.txt")
        p.add_argument("--cascades", help="cascade file (instead of --data)")
        p.add_argument("--graph", help="graph file (instead of --data)")
    if train_flags:
        p.add_argument("--config", help="key = value training config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--seed", type=int)
        p.add_argument("--directed", action="store_true", help="treat the social graph as directed")
        p.add_argument("--no-seen-mask", action="store_true",
                       help="do not exclude already-adopted users from next-user scoring")
        p.add_argument("--eval-all-positions", action="store_true",
                       help="score every position instead of only the unobserved suffix")
        p.add_argument("--meta-order", type=int, help="meta-gradient order (only 1 is implemented)")
    p.add_argument("--out", default="runs", help="root directory for run directories")
    p.add_argument("--run-dir", help="explicit run directory (overrides --out naming)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cascade-ttt", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset")
    p.add_argument("--config", help="synthetic config file (key = value)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="output data directory")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train-joint", help="joint primary + auxiliary training")
    _add_common(p)
    p.set_defaults(func=cmd_train_joint)

    p = sub.add_parser("meta-train", help="meta-auxiliary training from a joint checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_meta_train)

    for name, func, helptext in (("evaluate", cmd_evaluate, "evaluate without adaptation"),
                                 ("ttt-eval", cmd_ttt_eval, "evaluate with per-cascade test-time training")):
        p = sub.add_parser(name, help=helptext)
        _add_common(p)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--split", choices=("train", "valid", "test"), default="test")
        p.add_argument("--workers", type=int, help="adaptation threads (default: $CASCADE_TTT_WORKERS or 1)")
        if name == "ttt-eval":
            p.add_argument("--delta", help="adaptation steps, comma-separated for a sweep (default: inner_steps)")
            p.add_argument("--alpha", type=float, help="adaptation learning rate (default: inner_lr)")
        p.set_defaults(func=func)

    p = sub.add_parser("report", help="per-cascade ΔMSLE between two evaluation runs")
    _add_common(p, data=False, train_flags=False)
    p.add_argument("--baseline", required=True, help="run directory evaluated without TTT")
    p.add_argument("--adapted", required=True, help="run directory evaluated with TTT")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    root = logging.getLogger("cascade_ttt")
    root.setLevel(logging.INFO)
    if args.verbose:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        root.addHandler(handler)
    try:
        return args.func(args)
    except (CommandError, ConfigError, TrainingError, ValueError, OSError, KeyError) as exc:
        message = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {message}", file=sys.stderr)
        return 1
    finally:
        for h in list(root.handlers):
            if isinstance(h, logging.FileHandler):
                root.removeHandler(h)
                h.close()


if __name__ == "__main__":
    sys.exit(main())
