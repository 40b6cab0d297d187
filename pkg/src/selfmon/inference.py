"""Greedy decoding, progress inference, progress-scored beam search, walk stitching.

The procedures talk to a *policy*: anything with ``start()`` returning an
initial state and ``score(states, viewpoints)`` returning one
:class:`Scored` per row. :class:`AgentPolicy` adapts a trained agent; tests
substitute scripted policies.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import numcore as nc
from .agent import Agent, AgentState, stack_observations
from .numcore import ContractError, Tensor
from .worldgen import NavGraph


@dataclass
class Scored:
    p: np.ndarray                   # (K+1,) action distribution, index 0 = STOP
    p_pm: float                     # raw progress estimate in (-1, 1)
    next: Callable[[int], object]   # successor agent state after taking direction k
    alpha: np.ndarray | None = None
    beta: np.ndarray | None = None


class AgentPolicy:
    """Eval-mode agent bound to one instruction and one world."""

    def __init__(self, agent: Agent, tokens, graph: NavGraph):
        self.agent = agent
        self.graph = graph
        with nc.no_tape():
            self.enc = agent.encode([list(tokens)], training=False)

    @property
    def length(self) -> int:
        return int(self.enc.lengths[0])

    def start(self) -> AgentState:
        with nc.no_tape():
            return self.agent.initial_state(1)

    def score(self, states: list[AgentState], viewpoints: list[int]) -> list[Scored]:
        n = len(states)
        agent = self.agent
        with nc.no_tape():
            state = AgentState(Tensor(np.vstack([s.h.value for s in states])),
                               Tensor(np.vstack([s.c.value for s in states])),
                               Tensor(np.vstack([s.prev_action.value for s in states])))
            obs = stack_observations([self.graph] * n, viewpoints, agent.cfg.k_max)
            out = agent.step(state, self.enc.select([0] * n), obs, training=False)
        res = []
        for i in range(n):
            k1 = int(obs.valid[i].sum())

            def successor(k, i=i):
                with nc.no_tape():
                    a = agent.action_embedding(Tensor(out.proj.value[i:i + 1]), np.array([k]))
                return AgentState(Tensor(out.h.value[i:i + 1]), Tensor(out.c.value[i:i + 1]), a)

            res.append(Scored(out.p[i, :k1].copy(), float(out.p_pm.value[i]), successor,
                              out.alpha.value[i].copy(), out.beta.value[i, :k1].copy()))
        return res


def normalize_progress(p_pm: float) -> float:
    return (p_pm + 1.0) / 2.0


@dataclass
class StepLog:
    t: int
    viewpoint: int
    action: int
    p: list[float]
    alpha: list[float] | None
    beta: list[float] | None
    p_pm: float
    event: str = "step"

    def to_dict(self) -> dict:
        return {"t": self.t, "viewpoint": self.viewpoint, "action": self.action, "p": self.p,
                "alpha": self.alpha, "beta": self.beta, "p_pm": self.p_pm, "event": self.event}


@dataclass
class TrajectoryLog:
    viewpoints: list[int]
    steps: list[StepLog] = field(default_factory=list)
    length: int = 0
    ne: float | None = None
    episode_id: int | None = None
    warning: str | None = None
    expansions: int = 0

    @property
    def alphas(self) -> list[list[float]]:
        return [s.alpha for s in self.steps if s.alpha is not None and s.event == "step"]

    @property
    def final_progress(self) -> float:
        return self.steps[-1].p_pm if self.steps else 0.0

    def add(self, t, v, k, scored: Scored, event="step") -> None:
        self.steps.append(StepLog(
            t, int(v), int(k), scored.p.tolist(),
            None if scored.alpha is None else scored.alpha.tolist(),
            None if scored.beta is None else scored.beta.tolist(), scored.p_pm, event))

    def records(self) -> list[dict]:
        return [s.to_dict() for s in self.steps]


def write_trajectory_logs(logs: list[TrajectoryLog], path, header: dict | None = None) -> None:
    """One JSON record per step; ``header`` (if given) is written first."""
    with open(path, "w") as f:
        if header is not None:
            f.write(json.dumps(header) + "\n")
        for lg in logs:
            for r in lg.records():
                f.write(json.dumps({"episode_id": lg.episode_id, **r}) + "\n")


def _target(graph: NavGraph, v: int, k: int) -> int:
    return graph.neighbors(v)[k - 1]


def greedy_decode(policy, graph: NavGraph, start: int, max_steps: int = 10) -> TrajectoryLog:
    state, v = policy.start(), start
    log = TrajectoryLog([start], length=getattr(policy, "length", 0))
    for t in range(max_steps):
        s = policy.score([state], [v])[0]
        k = int(np.argmax(s.p))
        log.add(t, v, k, s)
        if k == 0:
            break
        state, v = s.next(k), _target(graph, v, k)
        log.viewpoints.append(v)
    return log


@dataclass
class _Frame:
    viewpoint: int
    scored: Scored
    tried: set = field(default_factory=set)
    children: dict = field(default_factory=dict)


def progress_inference(policy, graph: NavGraph, start: int, max_steps: int = 10,
                       k_max: int | None = None) -> TrajectoryLog:
    """Greedy decoding that undoes any move after which the progress estimate drops.

    After a drop the agent returns to the previous viewpoint (restoring the
    saved state) and tries the next most probable untried direction. When
    every direction there has been tried, it takes the original best one and
    carries on.
    """
    k_max = k_max if k_max is not None else max(len(graph.neighbors(u)) for u in range(graph.n))
    budget = max_steps * (k_max + 1)
    log = TrajectoryLog([start], length=getattr(policy, "length", 0))
    frames = [_Frame(start, policy.score([policy.start()], [start])[0])]
    expansions = 1
    t = 0
    while len(frames) <= max_steps:
        f = frames[-1]
        order = [int(k) for k in np.argsort(-f.scored.p, kind="stable")]
        untried = [k for k in order if k not in f.tried]
        fallback = not untried
        k = order[0] if fallback else untried[0]
        f.tried.add(k)
        log.add(t, f.viewpoint, k, f.scored, "fallback" if fallback else "step")
        t += 1
        if k == 0:
            break
        target = _target(graph, f.viewpoint, k)
        log.viewpoints.append(target)
        if k in f.children:
            child = f.children[k]
        else:
            if expansions >= budget:
                log.warning = "expansion budget exhausted"
                break
            child = policy.score([f.scored.next(k)], [target])[0]
            expansions += 1
            f.children[k] = child
        if not fallback and child.p_pm < f.scored.p_pm:
            log.viewpoints.append(f.viewpoint)
            log.steps[-1].event = "backtrack"
            continue
        frames.append(_Frame(target, child))
    log.expansions = expansions
    return log


@dataclass
class Hypothesis:
    trajectory: tuple[int, ...]
    state: object
    score: float
    steps: list[tuple[int, int, Scored]] = field(default_factory=list)
    finished: bool = False
    depth: int = 0

    @property
    def viewpoint(self) -> int:
        return self.trajectory[-1]

    def key(self) -> tuple:
        return (-self.score, self.viewpoint, self.trajectory)


@dataclass
class BeamResult:
    best: Hypothesis
    retained: list[Hypothesis]
    warning: str | None = None
    max_pruned_finished: float = -math.inf
    depth_viewpoints: list[list[int]] = field(default_factory=list)
    log: TrajectoryLog | None = None


def beam_search(policy, graph: NavGraph, start: int, beam_size: int = 5, max_steps: int = 10,
                pm_score: bool = True) -> BeamResult:
    """State-factored beam search scoring each move by log(normalized p_pm * p_k).

    At every depth at most one active hypothesis per viewpoint survives (the
    best), likewise one finished hypothesis per viewpoint; the ``beam_size``
    best of those are kept. Finished hypotheses, once kept, stay kept.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    active = [Hypothesis((start,), policy.start(), 0.0)]
    finished: dict[int, Hypothesis] = {}
    retained: list[Hypothesis] = list(active)
    result = BeamResult(active[0], retained)
    for depth in range(max_steps):
        if not active:
            break
        best_fin = max((h.score for h in finished.values()), default=-math.inf)
        if best_fin >= max(h.score for h in active):
            break
        scored = policy.score([h.state for h in active], [h.viewpoint for h in active])
        moves: dict[int, Hypothesis] = {}
        stops: dict[int, Hypothesis] = {}
        for h, s in zip(active, scored):
            pm = normalize_progress(s.p_pm) if pm_score else 1.0
            for k in range(len(s.p)):
                record = h.steps + [(h.viewpoint, k, s)]
                if not pm * s.p[k] > 0:
                    continue  # impossible move
                score = h.score + math.log(pm * s.p[k])
                if k == 0:
                    c = Hypothesis(h.trajectory, (h, s, 0), score, record, True, depth + 1)
                    bucket = stops
                else:
                    c = Hypothesis(h.trajectory + (_target(graph, h.viewpoint, k),),
                                   (h, s, k), score, record, False, depth + 1)
                    bucket = moves
                cur = bucket.get(c.viewpoint)
                if cur is None or c.key() < cur.key():
                    if cur is not None and cur.finished:
                        result.max_pruned_finished = max(result.max_pruned_finished, cur.score)
                    bucket[c.viewpoint] = c
                elif c.finished:
                    result.max_pruned_finished = max(result.max_pruned_finished, c.score)
        for v, c in list(stops.items()):
            prev = finished.get(v)
            if prev is not None and prev.key() < c.key():
                result.max_pruned_finished = max(result.max_pruned_finished, c.score)
                del stops[v]
        pool = sorted(list(moves.values()) + list(stops.values()), key=Hypothesis.key)
        kept = pool[:beam_size]
        active = []
        for c in kept:
            parent, s, k = c.state
            c.state = None if c.finished else s.next(k)
            if c.finished:
                old = finished.get(c.viewpoint)
                if old is not None:
                    result.max_pruned_finished = max(result.max_pruned_finished, old.score)
                finished[c.viewpoint] = c
            else:
                active.append(c)
            retained.append(c)
        result.depth_viewpoints.append([c.viewpoint for c in active])
    if finished:
        result.best = min(finished.values(), key=Hypothesis.key)
    else:
        cands = active or retained
        result.best = min(cands, key=Hypothesis.key)
        result.warning = "no hypothesis finished within max_steps"
        warnings.warn(result.warning, RuntimeWarning, stacklevel=2)
    result.retained = retained
    return result


def _common_prefix(a, b) -> int:
    n = 0
    for x, y in zip(a, b):
        if x != y:
            break
        n += 1
    return n


def stitch_full_trajectory(retained: list[Hypothesis], final: Hypothesis,
                           graph: NavGraph | None = None) -> list[int]:
    """One walk through every recorded trajectory, ending on ``final``.

    Trajectories are visited in order of greatest shared prefix with the one
    just walked; switching backtracks along the walked trajectory to the fork.
    """
    start = final.trajectory[0]
    trajs = {tuple(h.trajectory) for h in retained}
    if any(t[0] != start for t in trajs):
        raise ContractError("hypotheses do not share a start viewpoint")
    final_t = tuple(final.trajectory)
    everything = trajs | {final_t}
    leaves = sorted(t for t in trajs if t != final_t and not any(
        len(o) > len(t) and o[:len(t)] == t for o in everything))
    walk = [start]
    cur: tuple[int, ...] = (start,)
    remaining = list(leaves)
    order = []
    while remaining:
        nxt = max(remaining, key=lambda t: (_common_prefix(cur, t), [-x for x in t]))
        remaining.remove(nxt)
        order.append(nxt)
        cur = nxt
    cur = (start,)
    for t in order + [final_t]:
        c = _common_prefix(cur, t)
        walk += list(reversed(cur[c - 1:-1]))
        walk += list(t[c:])
        cur = t
    if graph is not None and not graph.is_walk(walk):
        raise ContractError("stitched walk is not connected")
    return walk


def beam_log(result: BeamResult, length: int = 0) -> TrajectoryLog:
    """Trajectory log of the selected hypothesis."""
    h = result.best
    log = TrajectoryLog(list(h.trajectory), length=length, warning=result.warning)
    for t, (v, k, s) in enumerate(h.steps):
        log.add(t, v, k, s)
    return log
