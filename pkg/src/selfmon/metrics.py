"""Navigation metrics (NE, SR, OSR, SPL) and the attention-diagonality audit."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import spearmanr

from .numcore import ContractError
from .worldgen import NavGraph, shortest_path_distance


def navigation_error(graph: NavGraph, final: int, goal: int) -> float:
    return shortest_path_distance(graph, final, goal)


def success(ne: float, threshold: float) -> bool:
    return ne < threshold


def oracle_success(graph: NavGraph, trajectory, goal: int, threshold: float) -> bool:
    if len(trajectory) == 0:
        raise ContractError("oracle success of an empty trajectory")
    d = graph.distances()[list(trajectory), goal]
    return bool(d.min() < threshold)


def spl(succeeded: bool, shortest: float, taken: float) -> float:
    if shortest <= 0:
        raise ContractError("SPL undefined for a zero-length shortest path")
    if taken < 0:
        raise ContractError("negative path length")
    return shortest / max(shortest, taken) if succeeded else 0.0


@dataclass
class EpisodeResult:
    episode_id: int
    ne: float
    success: bool
    oracle_success: bool
    spl: float
    path_length: float


@dataclass
class EvalResult:
    split: str
    episodes: list[EpisodeResult] = field(default_factory=list)

    def _mean(self, attr) -> float:
        if not self.episodes:
            return float("nan")
        return float(np.mean([float(getattr(e, attr)) for e in self.episodes]))

    @property
    def ne(self) -> float:
        return self._mean("ne")

    @property
    def sr(self) -> float:
        return self._mean("success")

    @property
    def osr(self) -> float:
        return self._mean("oracle_success")

    @property
    def spl(self) -> float:
        return self._mean("spl")

    def row(self) -> dict:
        return {"split": self.split, "NE": self.ne, "SR": self.sr, "OSR": self.osr, "SPL": self.spl}


def score_episode(graph: NavGraph, episode, trajectory, threshold: float,
                  walk=None) -> EpisodeResult:
    """Metrics of one run. ``walk`` (defaults to ``trajectory``) sets the taken length."""
    walk = trajectory if walk is None else walk
    ne = navigation_error(graph, walk[-1], episode.goal)
    ok = success(ne, threshold)
    taken = graph.walk_length(walk)
    shortest = shortest_path_distance(graph, episode.start, episode.goal)
    return EpisodeResult(episode.episode_id, ne, ok,
                         oracle_success(graph, trajectory, episode.goal, threshold),
                         spl(ok, shortest, taken), taken)


COLUMNS = ("NE", "SR", "OSR", "SPL")


def format_table(rows: list[dict], label_keys: tuple[str, ...] = ("split",)) -> str:
    """Aligned text table, metric columns in the order NE, SR, OSR, SPL."""
    header = list(label_keys) + list(COLUMNS)
    body = []
    for r in rows:
        cells = [str(r.get(k, "")) for k in label_keys]
        for c in COLUMNS:
            v = r.get(c)
            cells.append("-" if v is None or (isinstance(v, float) and np.isnan(v))
                         else f"{v:.2f}" if c == "NE" else f"{v:.3f}")
        body.append(cells)
    widths = [max(len(h), *(len(b[i]) for b in body)) if body else len(h)
              for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(c.ljust(w) for c, w in zip(b, widths)) for b in body]
    return "\n".join(lines)


@dataclass
class Diagonality:
    mean_position: list[float]
    correlation: float
    degenerate: bool
    n_points: int


def attention_diagonality(logs) -> Diagonality:
    """Rank correlation between step index and textual-attention center of mass.

    ``logs`` is a sequence of (alpha rows, instruction length) pairs or objects
    with ``alphas`` and ``length`` attributes.
    """
    steps, centers = [], []
    by_step: dict[int, list[float]] = {}
    n_logs = 0
    for log in logs:
        alphas, length = (log.alphas, log.length) if hasattr(log, "alphas") else log
        n_logs += 1
        for t, a in enumerate(alphas):
            a = np.asarray(a, dtype=np.float64)[:length]
            m = float((a * (np.arange(length) / length)).sum())
            steps.append(t)
            centers.append(m)
            by_step.setdefault(t, []).append(m)
    if n_logs == 0 or not steps:
        raise ContractError("attention diagonality needs at least one non-empty log")
    mean_pos = [float(np.mean(by_step[t])) for t in sorted(by_step)]
    if len(set(steps)) < 2 or np.ptp(centers) < 1e-12:
        return Diagonality(mean_pos, 0.0, True, len(steps))
    rho = spearmanr(steps, centers).statistic
    return Diagonality(mean_pos, float(rho), False, len(steps))
