"""Run an inference mode over a benchmark split and score it."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .agent import Agent
from .inference import (AgentPolicy, TrajectoryLog, beam_log, beam_search, greedy_decode,
                        progress_inference, stitch_full_trajectory)
from .metrics import EvalResult, score_episode
from .worldgen import Benchmark

MODES = ("greedy", "progress", "beam")


def run_episode(agent: Agent, bench: Benchmark, episode, mode: str, max_steps: int = 10,
                beam_size: int = 5, pm_score: bool = True):
    """Returns (trajectory log, executed walk, stitched walk or None)."""
    graph = bench.world(episode)
    policy = AgentPolicy(agent, episode.instruction, graph)
    stitched = None
    if mode == "greedy":
        log = greedy_decode(policy, graph, episode.start, max_steps)
    elif mode == "progress":
        log = progress_inference(policy, graph, episode.start, max_steps, agent.cfg.k_max)
    elif mode == "beam":
        res = beam_search(policy, graph, episode.start, beam_size, max_steps, pm_score)
        log = beam_log(res, policy.length)
        stitched = stitch_full_trajectory(res.retained, res.best, graph)
    else:
        raise ValueError(f"unknown inference mode {mode!r}; choose from {MODES}")
    log.episode_id = episode.episode_id
    return log, log.viewpoints, stitched


def evaluate_split(agent: Agent, bench: Benchmark, split: str, mode: str = "greedy",
                   max_steps: int = 10, beam_size: int = 5, pm_score: bool = True,
                   stitched: bool = False, episodes=None,
                   threads: int = 1) -> tuple[EvalResult, list[TrajectoryLog]]:
    """Score every episode of ``split``.

    With ``stitched`` (beam mode only) the taken length is that of the walk
    through all recorded beam trajectories; NE/SR still use its endpoint.
    """
    eps = bench.split(split) if episodes is None else episodes
    result = EvalResult(split)
    logs = []

    def one(ep):
        return run_episode(agent, bench, ep, mode, max_steps, beam_size, pm_score)

    # Episodes are independent and eval mode reads shared state only; map keeps the order.
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            runs = list(pool.map(one, eps))
    else:
        runs = [one(ep) for ep in eps]
    for ep, (log, walk, full) in zip(eps, runs):
        graph = bench.world(ep)
        if stitched and full is not None:
            r = score_episode(graph, ep, full, bench.success_threshold, walk=full)
        else:
            r = score_episode(graph, ep, walk, bench.success_threshold)
        log.ne = r.ne
        result.episodes.append(r)
        logs.append(log)
    return result, logs


def random_policy_sr(bench: Benchmark, split: str, n_rollouts: int = 10_000,
                     max_steps: int = 10, seed: int = 0) -> float:
    """Monte Carlo success rate of uniform choice over STOP and all directions."""
    eps = bench.split(split)
    rng = np.random.default_rng(seed)
    wins = 0
    for i in range(n_rollouts):
        ep = eps[i % len(eps)]
        g = bench.world(ep)
        v = ep.start
        for _ in range(max_steps):
            nbrs = g.neighbors(v)
            k = int(rng.integers(len(nbrs) + 1))
            if k == 0:
                break
            v = nbrs[k - 1]
        wins += g.distances()[v, ep.goal] < bench.success_threshold
    return wins / n_rollouts
