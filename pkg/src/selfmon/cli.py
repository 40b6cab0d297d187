"""Command line: gen, train, eval, ablate, trace.

Settings come from the preset, then an optional JSON config file, then
flags (flags win). Every artifact carries the resolved configuration.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .agent import Agent
from .config import PRESETS, ModelConfig, TrainConfig
from .encoder import EncodingError
from .evaluation import MODES, evaluate_split, run_episode
from .inference import write_trajectory_logs
from .metrics import attention_diagonality, format_table, score_episode
from .numcore import ConfigError
from .training import NumericError, Trainer, load_checkpoint, train
from .worldgen import (SCHEMA_VERSION, Benchmark, DatasetError, GenerationError,
                       SamplingError, generate_benchmark, load_dataset, save_dataset)

log = logging.getLogger("selfmon")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
ENV_OUT_DIR = "SELFMON_OUT_DIR"
ENV_THREADS = "SELFMON_THREADS"
SPLITS = ("val_seen", "val_unseen")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


# --- settings ------------------------------------------------------------------

def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return doc


def _overlay(base, section: dict, flags: dict):
    """Dataclass ``base`` updated by a config section, then by non-None flags."""
    names = set(base.__dataclass_fields__)
    unknown = set(section) - names
    if unknown:
        raise ConfigError(f"unknown {type(base).__name__} keys: {sorted(unknown)}")
    try:
        out = replace(base, **section)
        return replace(out, **{k: v for k, v in flags.items() if v is not None and k in names})
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def _out_dir(args) -> Path:
    d = Path(args.out_dir or os.environ.get(ENV_OUT_DIR) or ".")
    d.mkdir(parents=True, exist_ok=True)
    return d


def _threads(args) -> int:
    try:
        n = args.threads if args.threads is not None else int(os.environ.get(ENV_THREADS, "1"))
    except ValueError:
        raise ConfigError(f"{ENV_THREADS} must be an integer") from None
    if n < 1:
        raise ConfigError(f"threads must be >= 1, got {n}")
    if args.deterministic and n != 1:
        log.info("--deterministic: results are order-independent, keeping %d threads", n)
    return n


def _bench_model(bench: Benchmark, base: ModelConfig) -> ModelConfig:
    params = bench.meta.get("params", {})
    world = next(iter(bench.worlds.values()))
    return replace(base, vocab_size=len(bench.vocab), d_v=world.features.d_v,
                   l_max=int(params.get("l_max", base.l_max)),
                   k_max=int(params.get("world", {}).get("k_max", base.k_max)))


def _check_compatible(cfg: ModelConfig, bench: Benchmark) -> None:
    want = _bench_model(bench, cfg)
    diff = {k: (getattr(cfg, k), getattr(want, k)) for k in ("vocab_size", "d_v", "l_max", "k_max")
            if getattr(cfg, k) != getattr(want, k)}
    if diff:
        lines = [f"  {k}: checkpoint {a} vs benchmark {b}" for k, (a, b) in diff.items()]
        raise ConfigError("checkpoint does not fit the benchmark:\n" + "\n".join(lines))


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=1) + "\n")


# --- commands ------------------------------------------------------------------

def cmd_gen(args) -> int:
    bp = PRESETS[args.preset][0]
    section = _read_config(args.config).get("benchmark", {})
    if section:
        bp = replace(bp, **{k: v for k, v in section.items() if k not in ("world", "features")})
    bp = replace(bp, seed=args.seed if args.seed is not None else bp.seed)
    bench = generate_benchmark(bp)
    bench.meta["preset"] = args.preset
    out = Path(args.out) if args.out else _out_dir(args) / "bench.json"
    save_dataset(bench, out)
    s = bench.summary()
    print(f"wrote {out}")
    print(f"worlds {s['worlds']}  vocab {s['vocab_size']}  "
          f"d_v {bp.features.d_v}  threshold {s['success_threshold']:.3f} m")
    for split, n in s["episodes"].items():
        print(f"  {split:<11} {n} episodes")
    return EXIT_OK


def _train_settings(args, bench: Benchmark) -> tuple[ModelConfig, TrainConfig]:
    _, model, tcfg, _ = PRESETS[args.preset]
    doc = _read_config(args.config)
    model = _bench_model(bench, _overlay(model, doc.get("model", {}), {}))
    flags = {"lr": args.lr, "batch": args.batch, "epochs": args.epochs, "lam": args.lam,
             "seed": args.seed, "max_steps": args.max_steps, "mode": args.rollout,
             "deterministic": True if args.deterministic else None}
    return model, _overlay(tcfg, doc.get("train", {}), flags)


def cmd_train(args) -> int:
    bench = load_dataset(args.benchmark)
    out = _out_dir(args)
    if args.resume:
        agent, adam, state, tcfg, extra = load_checkpoint(args.resume)
        _check_compatible(agent.cfg, bench)
        if args.epochs is not None:
            tcfg = replace(tcfg, epochs=args.epochs)
        trainer = Trainer(agent, bench, tcfg, adam, state)
        log.info("resuming at step %d (epoch %d)", state.step, state.epoch)
    else:
        model, tcfg = _train_settings(args, bench)
        agent = Agent(model, seed=tcfg.seed)
        trainer = None
    run = {"schema_version": SCHEMA_VERSION, "command": "train", "benchmark": str(args.benchmark),
           "model": asdict(agent.cfg), "train": asdict(tcfg), "version": __version__}
    _write_json(out / "config.json", run)

    def dump(msg):
        (out / "nan_dump.txt").write_text(msg + "\n")

    trainer, records = train(agent, bench, tcfg, log_path=out / "metrics.jsonl",
                             best_path=out / "best.json", last_path=out / "last.json",
                             trainer=trainer, on_nan_dump=dump, extra={"run": run})
    rows = [r for r in records if r["split"] != "train"]
    if rows:
        last = [r for r in rows if r["epoch"] == rows[-1]["epoch"]]
        print(format_table(last, ("epoch", "split")))
    print(f"best val_unseen SR {trainer.state.best_sr:.3f} at epoch {trainer.state.best_epoch}; "
          f"checkpoints in {out}")
    return EXIT_OK


def _load_agent(path, bench) -> Agent:
    agent, _, _, _, _ = load_checkpoint(path)
    _check_compatible(agent.cfg, bench)
    return agent


def _inference(args):
    _, _, _, icfg = PRESETS[args.preset]
    icfg = _overlay(icfg, _read_config(args.config).get("inference", {}),
                    {"beam_size": args.beam_size, "max_steps": args.max_steps,
                     "pm_score": False if args.no_pm_score else None})
    return icfg


def cmd_eval(args) -> int:
    bench = load_dataset(args.benchmark)
    agent = _load_agent(args.checkpoint, bench)
    icfg = _inference(args)
    out = _out_dir(args)
    threads = _threads(args)
    splits = [args.split] if args.split else list(SPLITS)
    header = {"schema_version": SCHEMA_VERSION, "kind": "trajectory_log", "command": "eval",
              "checkpoint": str(args.checkpoint), "mode": args.mode, "inference": asdict(icfg),
              "model": asdict(agent.cfg)}
    rows = []
    for split in splits:
        res, logs = evaluate_split(agent, bench, split, args.mode, icfg.max_steps, icfg.beam_size,
                                   icfg.pm_score, args.stitched, threads=threads)
        write_trajectory_logs(logs, out / f"trajectories_{split}_{args.mode}.jsonl",
                              {**header, "split": split})
        rows.append({**res.row(), "mode": args.mode})
    print(format_table(rows, ("split", "mode")))
    _write_json(out / f"results_{args.mode}.json", {**header, "kind": "results", "rows": rows})
    return EXIT_OK


ABLATION_ROWS = [
    # (loss key, progress monitor column, inference mode)
    ("co_grounding", False, "greedy"),
    ("co_grounding", False, "progress"),
    ("co_grounding", False, "beam"),
    ("progress_monitor", True, "greedy"),
    ("progress_monitor", True, "progress"),
    ("progress_monitor", True, "beam"),
]


def cmd_ablate(args) -> int:
    bench = load_dataset(args.benchmark)
    icfg = _inference(args)
    ckpts = {"co_grounding": args.co_grounding, "progress_monitor": args.progress_monitor}
    agents, missing = {}, []
    for key, path in ckpts.items():
        if path and Path(path).exists():
            agents[key] = _load_agent(path, bench)
        else:
            missing.append(f"{key}: {path or '(not given)'}")
    for m in missing:
        print(f"missing checkpoint, rows skipped: {m}", file=sys.stderr)
    rows = []
    for i, (key, pm, mode) in enumerate(ABLATION_ROWS, 1):
        if key not in agents:
            continue
        for split in ([args.split] if args.split else list(SPLITS)):
            res, _ = evaluate_split(agents[key], bench, split, mode, icfg.max_steps,
                                    icfg.beam_size, pm_score=pm and icfg.pm_score,
                                    threads=_threads(args))
            rows.append({"#": i, "co_grounding": "x", "progress_monitor": "x" if pm else "",
                         "greedy": "x" if mode == "greedy" else "",
                         "progress_inference": "x" if mode == "progress" else "",
                         "beam_search": "x" if mode == "beam" else "", **res.row()})
    labels = ("#", "co_grounding", "progress_monitor", "greedy", "progress_inference",
              "beam_search", "split")
    print(format_table(rows, labels))
    out = _out_dir(args)
    _write_json(out / "ablation.json", {"schema_version": SCHEMA_VERSION, "kind": "ablation",
                                        "checkpoints": ckpts, "inference": asdict(icfg),
                                        "skipped": missing, "rows": rows})
    return EXIT_OK if rows else EXIT_DATA


def _trend_up(p_pm: list[float]) -> bool:
    return len(p_pm) < 2 or all(b >= a for a, b in zip(p_pm, p_pm[1:]))


def cmd_trace(args) -> int:
    bench = load_dataset(args.benchmark)
    agent = _load_agent(args.checkpoint, bench)
    icfg = _inference(args)
    try:
        ep = bench.episode(args.episode)
    except KeyError:
        raise DatasetError(f"no episode {args.episode} in {args.benchmark}") from None
    tlog, walk, _ = run_episode(agent, bench, ep, args.mode, icfg.max_steps, icfg.beam_size,
                                icfg.pm_score)
    r = score_episode(bench.world(ep), ep, walk, bench.success_threshold)
    out = _out_dir(args)
    path = Path(args.out) if args.out else out / f"trace_{ep.episode_id}.jsonl"
    header = {"schema_version": SCHEMA_VERSION, "kind": "trace", "episode_id": ep.episode_id,
              "split": ep.split, "mode": args.mode, "checkpoint": str(args.checkpoint),
              "instruction": bench.vocab.decode(ep.instruction), "length": len(ep.instruction),
              "success": r.success, "ne": r.ne, "inference": asdict(icfg)}
    tlog.episode_id = ep.episode_id
    write_trajectory_logs([tlog], path, header)
    print(f"episode {ep.episode_id} ({ep.split}): {len(tlog.steps)} steps, "
          f"{'success' if r.success else 'failure'}, NE {r.ne:.2f} m; trace in {path}")
    print("p_pm: " + " ".join(f"{s.p_pm:+.3f}" for s in tlog.steps))
    d = attention_diagonality([tlog])
    print(f"this episode: attention rank correlation {d.correlation:.3f}"
          + (" (degenerate)" if d.degenerate else ""))
    # Split-level summary over the episode's split.
    res, logs = evaluate_split(agent, bench, ep.split, args.mode, icfg.max_steps, icfg.beam_size,
                               icfg.pm_score, threads=_threads(args))
    ok = [lg for lg, e in zip(logs, res.episodes) if e.success]
    bad = [lg for lg, e in zip(logs, res.episodes) if not e.success]
    if ok:
        d = attention_diagonality(ok)
        print(f"{ep.split} successes ({len(ok)}): attention rank correlation {d.correlation:.3f}; "
              "mean position per step " + " ".join(f"{m:.2f}" for m in d.mean_position))
    for name, group in (("successes", ok), ("failures", bad)):
        if group:
            up = np.mean([_trend_up([s.p_pm for s in lg.steps]) for lg in group])
            final = np.mean([(lg.final_progress + 1) / 2 for lg in group])
            print(f"{ep.split} {name}: nondecreasing p_pm {up:.2f}, mean final progress {final:.3f}")
    return EXIT_OK


# --- entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    common.add_argument("--config", help="JSON run config; flags override it")
    common.add_argument("--out-dir", help=f"output directory (env {ENV_OUT_DIR}, default .)")
    common.add_argument("--seed", type=int)
    common.add_argument("--deterministic", action="store_true",
                        help="record and enforce bit-reproducible execution")
    common.add_argument("--threads", type=int, help=f"episode-level threads (env {ENV_THREADS})")
    common.add_argument("-v", "--verbose", action="store_true")

    infer = argparse.ArgumentParser(add_help=False)
    infer.add_argument("--beam-size", type=int)
    infer.add_argument("--max-steps", type=int)
    infer.add_argument("--no-pm-score", action="store_true",
                       help="beam search without the progress term")

    p = _Parser(prog="selfmon", description="Self-monitoring navigation agent on synthetic worlds.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", parents=[common], help="generate a benchmark file")
    g.add_argument("--out", help="benchmark path (default <out-dir>/bench.json)")

    t = sub.add_parser("train", parents=[common], help="train an agent")
    t.add_argument("--benchmark", required=True)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lam", type=float, help="loss weight; 1.0 drops the progress monitor loss")
    t.add_argument("--max-steps", type=int)
    t.add_argument("--rollout", choices=("sample", "teacher"))
    t.add_argument("--resume", help="checkpoint to continue from")

    e = sub.add_parser("eval", parents=[common, infer], help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--benchmark", required=True)
    e.add_argument("--mode", choices=MODES, default="greedy")
    e.add_argument("--split", choices=SPLITS)
    e.add_argument("--stitched", action="store_true",
                   help="beam mode: measure path length over the stitched walk")

    a = sub.add_parser("ablate", parents=[common, infer], help="loss x inference ablation grid")
    a.add_argument("--benchmark", required=True)
    a.add_argument("--co-grounding", help="checkpoint trained with lam=1")
    a.add_argument("--progress-monitor", help="checkpoint trained with lam=0.5")
    a.add_argument("--split", choices=SPLITS, default="val_unseen")

    r = sub.add_parser("trace", parents=[common, infer], help="export an attention trace")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--benchmark", required=True)
    r.add_argument("--episode", type=int, required=True)
    r.add_argument("--mode", choices=MODES, default="greedy")
    r.add_argument("--out", help="trace path (default <out-dir>/trace_<id>.jsonl)")
    return p


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
            "trace": cmd_trace}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, EncodingError, GenerationError, SamplingError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
