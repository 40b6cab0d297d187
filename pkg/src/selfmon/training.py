"""Rollouts, progress targets, the joint action/progress loss, and the training loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numcore as nc
from .agent import Agent, stack_observations
from .config import ModelConfig, TrainConfig
from .numcore import AdamState, BatchNormState, ParameterSet, Tape, Tensor
from .worldgen import SCHEMA_VERSION, Benchmark, Episode, NavGraph, next_hop, read_document

log = logging.getLogger(__name__)


class NumericError(RuntimeError):
    pass


def progress_target(d_start: float, d_now: float, threshold: float) -> float:
    if d_start <= 0:
        raise ValueError("progress target needs a positive start distance")
    if d_now < threshold:
        return 1.0
    return (d_start - d_now) / d_start


def teacher_action(graph: NavGraph, current: int, goal: int) -> int:
    """Direction index (0 = STOP) of the next hop on a shortest path to ``goal``."""
    if current == goal:
        return 0
    return 1 + graph.neighbors(current).index(next_hop(graph, current, goal))


@dataclass
class StepRecord:
    out: object               # agent StepOutput for the whole batch
    active: np.ndarray        # (B,) bool
    viewpoint: np.ndarray     # (B,) position when the step was taken
    chosen: np.ndarray        # (B,) executed direction index
    target: np.ndarray        # (B,) teacher direction index
    y_pm: np.ndarray          # (B,) progress target
    d_now: np.ndarray         # (B,)


@dataclass
class Rollout:
    episodes: list[Episode]
    steps: list[StepRecord] = field(default_factory=list)
    trajectories: list[list[int]] = field(default_factory=list)

    def n_steps(self, b: int) -> int:
        return sum(int(s.active[b]) for s in self.steps)

    def y_pm(self, b: int) -> list[float]:
        return [float(s.y_pm[b]) for s in self.steps if s.active[b]]


def rollout_episode(agent: Agent, episodes: list[Episode], bench: Benchmark, mode: str = "sample",
                    rngs: list[np.random.Generator] | None = None, training: bool = False,
                    dropout_rng: np.random.Generator | None = None, max_steps: int = 10) -> Rollout:
    """Run B episodes in lockstep until each has stopped or hit ``max_steps``.

    ``mode='sample'`` draws each action from the agent's distribution,
    ``mode='teacher'`` executes the teacher action. The loss targets are the
    teacher actions in both modes.
    """
    if mode not in ("sample", "teacher"):
        raise ValueError(f"unknown rollout mode {mode!r}")
    B = len(episodes)
    graphs = [bench.world(e) for e in episodes]
    threshold = bench.success_threshold
    d_start = np.array([g.distances()[e.start, e.goal] for g, e in zip(graphs, episodes)])
    enc = agent.encode([list(e.instruction) for e in episodes], training, dropout_rng)
    state = agent.initial_state(B)
    pos = np.array([e.start for e in episodes])
    active = np.ones(B, dtype=bool)
    ro = Rollout(list(episodes), [], [[e.start] for e in episodes])
    for _ in range(max_steps):
        if not active.any():
            break
        obs = stack_observations(graphs, pos, agent.cfg.k_max)
        out = agent.step(state, enc, obs, training, dropout_rng, active)
        target = np.zeros(B, dtype=np.int64)
        y = np.zeros(B)
        d_now = np.zeros(B)
        chosen = np.zeros(B, dtype=np.int64)
        for b, (g, e) in enumerate(zip(graphs, episodes)):
            if not active[b]:
                continue
            d_now[b] = g.distances()[pos[b], e.goal]
            y[b] = progress_target(d_start[b], d_now[b], threshold)
            target[b] = teacher_action(g, int(pos[b]), e.goal)
            if mode == "teacher":
                chosen[b] = target[b]
            else:
                p = out.p[b] * obs.valid[b]
                chosen[b] = int(rngs[b].choice(len(p), p=p / p.sum()))
        ro.steps.append(StepRecord(out, active.copy(), pos.copy(), chosen, target, y, d_now))
        state = agent.advance(out, chosen)
        for b in range(B):
            if not active[b]:
                continue
            if chosen[b] == 0:
                active[b] = False
            else:
                pos[b] = obs.targets[b, chosen[b]]
                ro.trajectories[b].append(int(pos[b]))
    return ro


def episode_loss(rollout: Rollout, lam: float) -> Tensor:
    """Per-episode loss (B,): -lam*sum log p_target + (1-lam)*sum (y_pm - p_pm)^2."""
    if not rollout.steps:
        raise ValueError("episode loss of an empty rollout")
    total = None
    for s in rollout.steps:
        ce = nc.scale(nc.take_along(s.out.log_p, s.target), -lam)
        mse = nc.scale(nc.square(nc.sub(Tensor(s.y_pm), s.out.p_pm)), 1.0 - lam)
        term = nc.mul(nc.add(ce, mse), Tensor(s.active.astype(np.float64)))
        total = term if total is None else nc.add(total, term)
    return total


# --- checkpoints --------------------------------------------------------------

def _arr(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "values": a.reshape(-1).tolist()}


def _unarr(d: dict) -> np.ndarray:
    return np.array(d["values"], dtype=np.float64).reshape(d["shape"])


@dataclass
class TrainerState:
    step: int = 0
    epoch: int = 0
    batch_in_epoch: int = 0
    best_sr: float = -1.0
    best_epoch: int = -1


def save_checkpoint(path, agent: Agent, adam: AdamState, tstate: TrainerState,
                    tcfg: TrainConfig, extra: dict | None = None) -> None:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "kind": "checkpoint",
        "model": asdict(agent.cfg),
        "train": asdict(tcfg),
        "params": {k: _arr(p.value) for k, p in sorted(agent.params.items())},
        "adam": {"t": adam.t, "m": {k: _arr(v) for k, v in sorted(adam.m.items())},
                 "v": {k: _arr(v) for k, v in sorted(adam.v.items())}},
        "bn": {k: {"mean": s.mean.tolist(), "var": s.var.tolist(),
                   "momentum": s.momentum, "eps": s.eps} for k, s in sorted(agent.bn.items())},
        # Every random draw is derived from (seed, step, episode id), so these fix the RNG.
        "rng": {"seed": tcfg.seed, "step": tstate.step},
        "state": asdict(tstate),
        "extra": extra or {},
    }
    Path(path).write_text(json.dumps(doc) + "\n")


def load_checkpoint(path) -> tuple[Agent, AdamState, TrainerState, TrainConfig, dict]:
    doc = read_document(path, "checkpoint")
    cfg = ModelConfig(**doc["model"])
    ps = ParameterSet()
    for k, d in doc["params"].items():
        ps.add(k, _unarr(d))
    bn = {}
    for k, d in doc["bn"].items():
        s = BatchNormState(len(d["mean"]), d["momentum"], d["eps"])
        s.mean, s.var = np.array(d["mean"]), np.array(d["var"])
        bn[k] = s
    adam = AdamState()
    adam.t = doc["adam"]["t"]
    adam.m = {k: _unarr(v) for k, v in doc["adam"]["m"].items()}
    adam.v = {k: _unarr(v) for k, v in doc["adam"]["v"].items()}
    return (Agent(cfg, ps, bn), adam, TrainerState(**doc["state"]),
            TrainConfig(**doc["train"]), doc.get("extra", {}))


# --- training loop ------------------------------------------------------------

class Trainer:
    """Mini-batch Adam over episode losses; resumable at any step."""

    def __init__(self, agent: Agent, bench: Benchmark, tcfg: TrainConfig,
                 adam: AdamState | None = None, state: TrainerState | None = None):
        self.agent = agent
        self.bench = bench
        self.cfg = tcfg
        self.adam = adam or AdamState()
        self.state = state or TrainerState()
        self.train_eps = bench.split("train")
        if not self.train_eps:
            raise ValueError("training split is empty")

    def epoch_batches(self, epoch: int) -> list[list[Episode]]:
        order = np.random.default_rng([self.cfg.seed, 0, epoch]).permutation(len(self.train_eps))
        bs = self.cfg.batch
        return [[self.train_eps[i] for i in order[k:k + bs]] for k in range(0, len(order), bs)]

    def train_step(self, batch: list[Episode]) -> float:
        s = self.state.step
        seed = self.cfg.seed
        rngs = [np.random.default_rng([seed, 2, s, e.episode_id]) for e in batch]
        drop = np.random.default_rng([seed, 1, s])
        self.agent.params.zero_grad()
        with Tape() as tape:
            ro = rollout_episode(self.agent, batch, self.bench, self.cfg.mode, rngs, True, drop,
                                 self.cfg.max_steps)
            per_ep = episode_loss(ro, self.cfg.lam)
            loss = nc.scale(nc.sum_all(per_ep), 1.0 / len(batch))
        value = float(loss.value)
        if not math.isfinite(value):
            raise NumericError(
                f"non-finite loss {value} at step {s}; episodes "
                f"{[e.episode_id for e in batch]}; per-episode {per_ep.value.tolist()}")
        nc.backward(tape, loss)
        grads = self.agent.params.grads()
        nc.clip_global_norm(grads, self.cfg.clip_norm)
        if self.cfg.lr > 0:
            nc.adam_step(self.agent.params, grads, self.adam, self.cfg.lr)
        self.state.step += 1
        return value

    def run_epoch(self, stop_after: int | None = None) -> float:
        """Finish the current epoch (or ``stop_after`` more batches); returns mean loss."""
        batches = self.epoch_batches(self.state.epoch)
        losses = []
        while self.state.batch_in_epoch < len(batches):
            if stop_after is not None and len(losses) >= stop_after:
                return float(np.mean(losses))
            losses.append(self.train_step(batches[self.state.batch_in_epoch]))
            self.state.batch_in_epoch += 1
        self.state.epoch += 1
        self.state.batch_in_epoch = 0
        return float(np.mean(losses)) if losses else float("nan")

    def checkpoint(self, path, extra: dict | None = None) -> None:
        save_checkpoint(path, self.agent, self.adam, self.state, self.cfg, extra)


def train(agent: Agent, bench: Benchmark, tcfg: TrainConfig, epochs: int | None = None,
          log_path=None, best_path=None, last_path=None, evaluate=True,
          trainer: Trainer | None = None, on_nan_dump=None,
          extra: dict | None = None) -> tuple[Trainer, list[dict]]:
    """Train for ``epochs`` epochs, logging per-epoch validation metrics.

    The checkpoint with the best val_unseen success rate is written to
    ``best_path`` (and its agent kept as ``trainer.best_agent``).
    """
    from .evaluation import evaluate_split

    trainer = trainer or Trainer(agent, bench, tcfg)
    epochs = tcfg.epochs if epochs is None else epochs
    records: list[dict] = []
    trainer.best_agent = agent.clone()
    logf = open(log_path, "a") if log_path else None
    try:
        while trainer.state.epoch < epochs:
            try:
                loss = trainer.run_epoch()
            except NumericError as exc:
                if on_nan_dump:
                    on_nan_dump(str(exc))
                raise
            epoch = trainer.state.epoch
            recs = [{"epoch": epoch, "split": "train", "loss": loss}]
            if evaluate and (epoch % tcfg.eval_every == 0 or epoch == epochs):
                for split in ("val_seen", "val_unseen"):
                    res, _ = evaluate_split(trainer.agent, bench, split, "greedy",
                                            max_steps=tcfg.max_steps)
                    recs.append({"epoch": epoch, "split": split, **_metric_fields(res), "loss": None})
                sr = recs[-1]["SR"]
                if sr > trainer.state.best_sr:
                    trainer.state.best_sr = sr
                    trainer.state.best_epoch = epoch
                    trainer.best_agent = trainer.agent.clone()
                    if best_path:
                        trainer.checkpoint(best_path, extra)
            for r in recs:
                log.info("epoch %d %s %s", epoch, r["split"],
                         {k: v for k, v in r.items() if k not in ("epoch", "split")})
                if logf:
                    logf.write(json.dumps(r) + "\n")
                    logf.flush()
            records += recs
            if last_path:
                trainer.checkpoint(last_path, extra)
    finally:
        if logf:
            logf.close()
    return trainer, records


def _metric_fields(res) -> dict:
    return {"NE": res.ne, "SR": res.sr, "OSR": res.osr, "SPL": res.spl}
