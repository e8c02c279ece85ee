"""Command-line entry point: ``wsnas <subcommand> [--config FILE] [--set key=value ...]``.

Artifacts go to ``$WSNAS_OUT/<output>`` (default root ``runs``). Everything a
subcommand writes is a pure function of (config, seed); wall-clock data lives
only in the ``<subcommand>.meta.json`` sidecar.

Exit codes: 0 success, 2 configuration error, 3 runtime failure or divergence.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import analysis, sampling, search
from .config import ConfigError, ExperimentConfig, load_config
from .supernet import SuperNet, load_checkpoint, save_checkpoint
from .tasks import val_batches
from .trainer import DivergenceError, evaluate_proxy, restore_state, train_standalone, train_supernet

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _dump(obj, path: Path) -> Path:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
    return path


def _outdir(args, cfg: ExperimentConfig) -> Path:
    root = Path(args.out or os.environ.get("WSNAS_OUT", "runs"))
    out = root / str(cfg.get("output"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _meta(out: Path, command: str, argv) -> None:
    _dump({"command": command, "argv": list(argv), "time": time.strftime("%Y-%m-%dT%H:%M:%S%z")},
          out / f"{command}.meta.json")


def _load_net(path, cfg: ExperimentConfig) -> SuperNet:
    if not Path(path).with_suffix(".json").exists():
        raise ConfigError(f"checkpoint {path} not found")
    net, _, _ = load_checkpoint(path)
    if not isinstance(net, SuperNet):
        raise ConfigError(f"{path} is not a super-net checkpoint")
    if net.space != cfg.space:
        raise ConfigError(f"checkpoint space {net.space.to_dict()} does not match config {cfg.space.to_dict()}")
    return net


def _parse_child(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"child must be comma-separated integers, got {text!r}") from exc


# ---------------------------------------------------------------- subcommands


def cmd_train(cfg: ExperimentConfig, out: Path, args) -> dict:
    tcfg = cfg.train
    net = SuperNet(cfg.space, cfg.seed)
    net, log, state = train_supernet(net, cfg.task, tcfg, checkpoint_dir=out)
    save_checkpoint(net, out / "supernet", state.optimizer,
                    {"train_state": state.to_dict(), "config": cfg.resolved()})
    log.write(out / "train_log.jsonl")
    if state.anchor_log.records:
        state.anchor_log.write(out / "anchor_log.jsonl")
    _dump(cfg.resolved(), out / "config.json")
    return {"checkpoint": str(out / "supernet.json"), "final_pred_loss": log.steps[-1]["pred_loss"] if log.steps else None}


def cmd_analyze(cfg: ExperimentConfig, out: Path, args) -> dict:
    net = _load_net(args.checkpoint, cfg).freeze()
    a = cfg.get("analysis")
    batch = analysis.probe_batch(cfg.task, int(a["batch_size"]), cfg.seed)
    og_layer = int(a["og_layer"])
    rng = np.random.default_rng([cfg.seed, 43])
    probe = analysis.InterferenceProbe(og_layer=og_layer, og_op=int(rng.integers(net.space.num_ops)), m=1,
                                       batch_size=int(a["batch_size"])).validate(net.space)
    matrix = analysis.similarity_matrix(net, probe, batch, rng=rng).validate()
    matrix.to_csv(out / "similarity_m1.csv")
    m_max = min(int(a["m_max"]), net.space.num_layers - og_layer)
    curve = analysis.interference_vs_m(net, og_layer, range(1, m_max + 1), int(a["repeats"]), batch, cfg.seed)
    analysis.write_curve_csv(curve, out / "m_curve.csv")
    sweep = analysis.og_layer_sweep(net, a["sweep_layers"], 1, int(a["repeats"]), batch, cfg.seed)
    with open(out / "og_sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["og_layer", "m", "mean_similarity"])
        for j, c in sweep.items():
            for m, v in c:
                w.writerow([j, m, f"{v:.6f}"])
    return {"m_curve": [[m, round(v, 6)] for m, v in curve]}


def cmd_rank(cfg: ExperimentConfig, out: Path, args) -> dict:
    net = _load_net(args.checkpoint, cfg).freeze()
    r = cfg.get("rank")
    count = int(args.children if args.children is not None else r["children"])
    if count < 2:
        raise ConfigError("rank needs at least two children")
    children = analysis.sample_distinct_children(net.space, count, cfg.seed)
    val = val_batches(cfg.task, int(r["val_batches"]), int(r["val_batch_size"]))
    jobs = int(args.jobs if args.jobs is not None else cfg.get("jobs"))
    report = analysis.rank_experiment(net, children, cfg.task, cfg.standalone, val, jobs=jobs,
                                      config=cfg.resolved())
    report.write(out / "rank_report.json")
    return {"tau": report.tau, "children": len(children)}


def cmd_mixing(cfg: ExperimentConfig, out: Path, args) -> dict:
    mx = cfg.get("mixing")
    n, c = int(mx["num_layers"]), int(mx["num_ops"])
    scfg = sampling.SamplerConfig(sampling.MAGIC_T, k=int(mx["k"]), lazy=bool(mx["lazy"]))
    try:
        scfg.validate(n, c)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    t_max, eps = int(mx["t_max"]), float(mx["epsilon"])
    if mx["method"] == "exact":
        try:
            report = sampling.exact_mixing_curve((n, c), scfg, t_max, epsilon=eps)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    elif mx["method"] == "monte_carlo":
        report = sampling.monte_carlo_mixing((n, c), scfg, t_max, int(mx["walkers"]), cfg.seed, epsilon=eps)
    else:
        raise ConfigError(f"mixing.method must be exact or monte_carlo, got {mx['method']!r}")
    name = f"mixing_N{n}_C{c}_k{scfg.k}_{'lazy' if scfg.lazy else 'strict'}.csv"
    report.to_csv(out / name)
    t_eps = sampling.mixing_steps_for(eps, n)
    summary = {"csv": name, "steps_for_epsilon": t_eps, "coupling_bound_holds": report.coupling_bound_holds,
               "paper_bound_holds": report.paper_bound_holds, "ergodic": report.ergodic}
    if t_eps <= t_max:
        summary["tv_at_steps_for_epsilon"] = report.tv_at(t_eps)
    return summary


def cmd_search(cfg: ExperimentConfig, out: Path, args) -> dict:
    tcfg = cfg.train
    s = cfg.get("search")
    val = val_batches(cfg.task, int(s["val_batches"]), int(s["val_batch_size"]))
    ckpt = out / "search_state"
    if args.resume and ckpt.with_suffix(".json").exists():
        net, opt, extra = load_checkpoint(ckpt)
        if net.space != cfg.space:
            raise ConfigError("search checkpoint does not match the configured space")
        state = search.ShrinkState.from_dict(extra["shrink_state"])
        tstate = restore_state(net.space, cfg.task, tcfg, extra["train_state"], opt)
    else:
        net = SuperNet(cfg.space, cfg.seed)
        d = int(s["deletions_per_epoch"]) or None
        state, tstate = search.ShrinkState.fresh(net.space, d), None

    def on_epoch(shrink_state, train_state):
        search.write_trace(shrink_state, out / "search_trace.jsonl")
        save_checkpoint(net, ckpt, train_state.optimizer,
                        {"shrink_state": shrink_state.to_dict(), "train_state": train_state.to_dict()})

    child, state = search.run_search(net, cfg.task, tcfg, val, state, int(s["probe_paths"]), cfg.seed,
                                     train_state=tstate, on_epoch=on_epoch)
    search.write_trace(state, out / "search_trace.jsonl")
    result = {"child": list(child), "ops": [net.space.candidates[o].name for o in child],
              "proxy": evaluate_proxy(net, child, val), "deletions": len(state.deleted)}
    if args.standalone:
        result["standalone_metric"] = train_standalone(net.space, child, cfg.task, cfg.standalone)[1]
    _dump(result, out / "final_child.json")
    return result


def cmd_standalone(cfg: ExperimentConfig, out: Path, args) -> dict:
    child = _parse_child(args.child)
    try:
        _, metric = train_standalone(cfg.space, child, cfg.task, cfg.standalone)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    result = {"child": list(child), "metric": metric, "config": cfg.resolved()}
    _dump(result, out / f"standalone_{'-'.join(map(str, child))}.json")
    return {"child": list(child), "metric": metric}


COMMANDS = {
    "train": cmd_train, "analyze": cmd_analyze, "rank": cmd_rank,
    "mixing": cmd_mixing, "search": cmd_search, "standalone": cmd_standalone,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wsnas", description="Weight-sharing NAS interference toolkit")
    parser.add_argument("--out", help="output root (default $WSNAS_OUT or ./runs)")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        if name in ("train", "search"):
            p.add_argument("--method", help="shorthand for --set train.method=...")
        if name in ("analyze", "rank"):
            p.add_argument("--checkpoint", required=True, help="super-net checkpoint path (without suffix)")
        if name == "rank":
            p.add_argument("--children", type=int)
            p.add_argument("--jobs", type=int)
        if name == "search":
            p.add_argument("--resume", action="store_true", help="continue from the last saved search epoch")
            p.add_argument("--standalone", action="store_true", help="also train the final child from scratch")
        if name == "standalone":
            p.add_argument("--child", required=True, help="operator indices, e.g. 0,2,3,1")
    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_CONFIG
    overrides = list(args.set)
    if getattr(args, "method", None):
        overrides.append(f"train.method={args.method}")
    try:
        cfg = load_config(args.config, overrides, require_method=args.command in ("train", "search"))
        out = _outdir(args, cfg)
        summary = COMMANDS[args.command](cfg, out, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        where = f"; checkpoint at {exc.checkpoint}" if exc.checkpoint else ""
        print(f"training diverged: {exc}{where}", file=sys.stderr)
        return EXIT_RUNTIME
    except (RuntimeError, FloatingPointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    _meta(out, args.command, argv)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
