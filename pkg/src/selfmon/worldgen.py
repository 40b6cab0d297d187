"""Synthetic navigation worlds, template instructions and the benchmark file."""

from __future__ import annotations

import hashlib
import heapq
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1
GRAMMAR_VERSION = 1

PAD, BOS, EOS, PERIOD = 0, 1, 2, 3

VERBS = ("go", "walk", "head", "move", "proceed", "continue", "travel", "step")
ADVERBS = ("left", "right", "straight")
LANDMARK_NAMES = ("table", "sofa", "bed", "stairs", "door", "window",
                  "lamp", "plant", "sink", "desk", "chair", "shelf")
TURN_THRESHOLD = math.radians(30.0)


class GenerationError(RuntimeError):
    pass


class SamplingError(RuntimeError):
    pass


class DistanceError(ValueError):
    pass


class DatasetError(ValueError):
    """Malformed benchmark or checkpoint file."""


class VersionError(DatasetError):
    pass


def landmark_name(i: int) -> str:
    return LANDMARK_NAMES[i] if i < len(LANDMARK_NAMES) else f"landmark{i}"


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]

    @classmethod
    def build(cls, n_landmarks: int) -> "Vocabulary":
        words = ["<pad>", "<bos>", "<eos>", ".", "stop", "to", "the", *VERBS, *ADVERBS]
        words += [landmark_name(i) for i in range(n_landmarks)]
        return cls(tuple(words))

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary tokens must be unique")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self._index[token]

    def encode(self, words: list[str]) -> list[int]:
        return [self._index[w] for w in words]

    def decode(self, ids) -> list[str]:
        return [self.tokens[i] for i in ids]


@dataclass(frozen=True)
class WorldParams:
    n_viewpoints: int = 25
    n_landmarks: int = 12
    k_max: int = 5
    extent: float = 20.0
    floor_height: float = 3.0
    n_floors: int = 2
    min_spacing: float = 2.0


@dataclass(frozen=True)
class FeatureParams:
    d_app: int = 24
    tile: int = 2
    noise: float = 0.05

    @property
    def d_v(self) -> int:
        return self.d_app + 4 * self.tile


@dataclass(frozen=True)
class Edge:
    target: int
    heading: float
    elevation: float
    length: float


class NavGraph:
    """Immutable navigation graph; neighbor lists are sorted by viewpoint id."""

    def __init__(self, world_id: int, positions: np.ndarray, landmarks: tuple[int, ...],
                 edges: tuple[tuple[Edge, ...], ...], features: FeatureParams):
        self.world_id = int(world_id)
        self.positions = np.array(positions, dtype=np.float64)
        self.positions.setflags(write=False)
        self.landmarks = tuple(int(x) for x in landmarks)
        self.edges = edges
        self.features = features
        self._dist: np.ndarray | None = None
        self._obs: dict[int, np.ndarray] = {}

    @property
    def n(self) -> int:
        return len(self.landmarks)

    def neighbors(self, u: int) -> tuple[int, ...]:
        return tuple(e.target for e in self.edges[u])

    def edge(self, u: int, v: int) -> Edge:
        for e in self.edges[u]:
            if e.target == v:
                return e
        raise KeyError(f"no edge {u}->{v} in world {self.world_id}")

    def has_edge(self, u: int, v: int) -> bool:
        return any(e.target == v for e in self.edges[u])

    def distances(self) -> np.ndarray:
        """All-pairs geodesic distances (Dijkstra from every source)."""
        if self._dist is None:
            d = np.vstack([_dijkstra(self, s) for s in range(self.n)])
            d.setflags(write=False)
            self._dist = d
        return self._dist

    def observation(self, u: int) -> np.ndarray:
        """Direction features at ``u``; row 0 is the all-zero STOP direction."""
        obs = self._obs.get(u)
        if obs is None:
            rows = [np.zeros(self.features.d_v)]
            for e in self.edges[u]:
                rows.append(direction_feature(
                    self.landmarks[e.target], e.heading, e.elevation, self.features,
                    noise_seed=_noise_seed(self.world_id, u, e.target)))
            obs = np.vstack(rows)
            obs.setflags(write=False)
            self._obs[u] = obs
        return obs

    def walk_length(self, walk) -> float:
        total = 0.0
        for a, b in zip(walk[:-1], walk[1:]):
            if a != b:
                total += self.edge(a, b).length
        return total

    def is_walk(self, walk) -> bool:
        return all(a == b or self.has_edge(a, b) for a, b in zip(walk[:-1], walk[1:]))

    def to_dict(self) -> dict:
        return {
            "world_id": self.world_id,
            "positions": self.positions.tolist(),
            "landmarks": list(self.landmarks),
            "edges": [[[e.target, e.heading, e.elevation, e.length] for e in es]
                      for es in self.edges],
            "features": {"d_app": self.features.d_app, "tile": self.features.tile,
                         "noise": self.features.noise},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NavGraph":
        edges = tuple(tuple(Edge(int(t), float(h), float(el), float(ln)) for t, h, el, ln in es)
                      for es in d["edges"])
        f = d["features"]
        return cls(d["world_id"], np.array(d["positions"], dtype=np.float64),
                   tuple(d["landmarks"]), edges,
                   FeatureParams(int(f["d_app"]), int(f["tile"]), float(f["noise"])))

    def __eq__(self, other) -> bool:
        return isinstance(other, NavGraph) and self.to_dict() == other.to_dict()

    def __hash__(self) -> int:
        return hash(self.world_id)


def _noise_seed(world_id: int, u: int, v: int) -> int:
    digest = hashlib.blake2b(f"{world_id}:{u}:{v}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def direction_feature(landmark: int, heading: float, elevation: float,
                      params: FeatureParams, noise_seed: int | None = None) -> np.ndarray:
    """Appearance block (unit-length noisy one-hot) + tiled orientation block."""
    if not 0 <= landmark:
        raise ValueError(f"invalid landmark id {landmark}")
    app = np.zeros(params.d_app)
    app[landmark % params.d_app] = 1.0
    if noise_seed is not None and params.noise > 0:
        app = app + np.random.default_rng(noise_seed).normal(0.0, params.noise, params.d_app)
    app = app / np.linalg.norm(app)
    orient = np.array([math.sin(heading), math.cos(heading),
                       math.sin(elevation), math.cos(elevation)])
    return np.concatenate([app, np.tile(orient, params.tile)])


def _dijkstra(graph: NavGraph, source: int) -> np.ndarray:
    dist = np.full(graph.n, np.inf)
    dist[source] = 0.0
    heap = [(0.0, source)]
    while heap:
        d, u = heapq.heappop(heap)
        if d > dist[u]:
            continue
        for e in graph.edges[u]:
            nd = d + e.length
            if nd < dist[e.target]:
                dist[e.target] = nd
                heapq.heappush(heap, (nd, e.target))
    return dist


def shortest_path_distance(graph: NavGraph, a: int, b: int) -> float:
    if not (0 <= a < graph.n and 0 <= b < graph.n):
        raise DistanceError(f"viewpoint ids {a}, {b} outside [0, {graph.n})")
    d = float(graph.distances()[a, b])
    if not math.isfinite(d):
        raise DistanceError(f"viewpoints {a} and {b} are disconnected in world {graph.world_id}")
    return d


def next_hop(graph: NavGraph, current: int, goal: int) -> int:
    """Neighbor that starts a shortest path to ``goal``; ties go to the lower id."""
    dist = graph.distances()[:, goal]
    best, best_key = -1, None
    for e in graph.edges[current]:
        key = (e.length + dist[e.target], e.target)
        if best_key is None or key < best_key:
            best, best_key = e.target, key
    return best


def shortest_path(graph: NavGraph, start: int, goal: int) -> list[int]:
    path = [start]
    while path[-1] != goal:
        path.append(next_hop(graph, path[-1], goal))
        if len(path) > graph.n:
            raise DistanceError("shortest path did not converge")
    return path


# --- world generation -------------------------------------------------------

def _layout(rng: np.random.Generator, p: WorldParams) -> np.ndarray:
    per_floor = [p.n_viewpoints // p.n_floors + (1 if i < p.n_viewpoints % p.n_floors else 0)
                 for i in range(p.n_floors)]
    pts = []
    for floor, count in enumerate(per_floor):
        placed: list[np.ndarray] = []
        tries = 0
        while len(placed) < count:
            tries += 1
            q = rng.uniform(0.0, p.extent, size=2)
            spacing = p.min_spacing if tries < 5000 else 0.0
            if all(np.linalg.norm(q - r) >= spacing for r in placed):
                placed.append(q)
        pts += [[x, y, floor * p.floor_height] for x, y in placed]
    return np.array(pts, dtype=np.float64)


def _components(n: int, adj: list[set[int]]) -> list[list[int]]:
    seen = [False] * n
    comps = []
    for s in range(n):
        if seen[s]:
            continue
        seen[s] = True
        stack, comp = [s], []
        while stack:
            u = stack.pop()
            comp.append(u)
            for v in adj[u]:
                if not seen[v]:
                    seen[v] = True
                    stack.append(v)
        comps.append(sorted(comp))
    return comps


def _try_world(rng: np.random.Generator, p: WorldParams) -> tuple[np.ndarray, list[set[int]]] | None:
    pos = _layout(rng, p)
    n = len(pos)
    floor = np.round(pos[:, 2] / p.floor_height).astype(int) if p.floor_height > 0 else np.zeros(n, int)
    diff = pos[:, None, :] - pos[None, :, :]
    dist = np.sqrt((diff ** 2).sum(-1))
    adj: list[set[int]] = [set() for _ in range(n)]
    # Same-floor edges, nearest pairs first, each node wiring to about three neighbors.
    pairs = sorted((dist[i, j], i, j) for i in range(n) for j in range(i + 1, n)
                   if floor[i] == floor[j])
    target = min(3, p.k_max)
    for _, i, j in pairs:
        if (len(adj[i]) < target or len(adj[j]) < target) and \
                len(adj[i]) < p.k_max and len(adj[j]) < p.k_max:
            adj[i].add(j)
            adj[j].add(i)
    # Join components (including floors, i.e. stairs) through the closest admissible pair.
    while True:
        comps = _components(n, adj)
        if len(comps) == 1:
            break
        a = comps[0]
        rest = [v for c in comps[1:] for v in c]
        cands = sorted((dist[i, j], i, j) for i in a for j in rest
                       if len(adj[i]) < p.k_max and len(adj[j]) < p.k_max)
        if not cands:
            return None
        _, i, j = cands[0]
        adj[i].add(j)
        adj[j].add(i)
    if any(not (1 <= len(s) <= p.k_max) for s in adj):
        return None
    return pos, adj


def _assign_landmarks(rng: np.random.Generator, adj: list[set[int]],
                      n_landmarks: int) -> tuple[int, ...]:
    """Random landmarks, avoiding repeats among the neighbors of any viewpoint when possible."""
    n = len(adj)
    labels = [-1] * n
    for u in rng.permutation(n):
        clash = {labels[w] for v in adj[u] for w in adj[v] if w != u}
        free = [k for k in range(n_landmarks) if k not in clash]
        labels[u] = int(rng.choice(free)) if free else int(rng.integers(n_landmarks))
    return tuple(labels)


def generate_world(seed: int, params: WorldParams = WorldParams(),
                   features: FeatureParams = FeatureParams(), max_retries: int = 20) -> NavGraph:
    if params.n_viewpoints < 2:
        raise GenerationError("need at least 2 viewpoints")
    if params.k_max < 1 or (params.k_max < 2 and params.n_viewpoints > 2):
        raise GenerationError(f"k_max={params.k_max} cannot connect {params.n_viewpoints} viewpoints")
    rng = np.random.default_rng(seed)
    for _ in range(max_retries):
        built = _try_world(rng, params)
        if built is None:
            continue
        pos, adj = built
        edges = []
        for u in range(len(pos)):
            row = []
            for v in sorted(adj[u]):
                d = pos[v] - pos[u]
                horiz = math.hypot(d[0], d[1])
                row.append(Edge(v, math.atan2(d[0], d[1]), math.atan2(d[2], horiz),
                                float(np.linalg.norm(d))))
            edges.append(tuple(row))
        landmarks = _assign_landmarks(rng, adj, params.n_landmarks)
        return NavGraph(seed, pos, landmarks, tuple(edges), features)
    raise GenerationError(f"no admissible world for seed {seed} after {max_retries} attempts")


# --- episodes and instructions ---------------------------------------------

@dataclass(frozen=True)
class Episode:
    episode_id: int
    world_id: int
    start: int
    goal: int
    path: tuple[int, ...]
    instruction: tuple[int, ...]
    split: str

    def to_dict(self) -> dict:
        return {"episode_id": self.episode_id, "world_id": self.world_id, "start": self.start,
                "goal": self.goal, "path": list(self.path),
                "instruction": list(self.instruction), "split": self.split}

    @classmethod
    def from_dict(cls, d: dict) -> "Episode":
        return cls(int(d["episode_id"]), int(d["world_id"]), int(d["start"]), int(d["goal"]),
                   tuple(d["path"]), tuple(d["instruction"]), str(d["split"]))


def turn_adverb(prev_heading: float, heading: float) -> str:
    delta = (heading - prev_heading + math.pi) % (2 * math.pi) - math.pi
    # Headings grow clockwise (atan2(dx, dy)), so a negative change is a left turn.
    if delta < -TURN_THRESHOLD:
        return "left"
    if delta > TURN_THRESHOLD:
        return "right"
    return "straight"


def render_instruction(graph: NavGraph, path, rng: np.random.Generator) -> list[str]:
    """One clause per segment: ``verb [adverb] to the <landmark> .`` then ``stop .``"""
    words = ["<bos>"]
    prev_heading = None
    for u, v in zip(path[:-1], path[1:]):
        e = graph.edge(u, v)
        words.append(VERBS[int(rng.integers(len(VERBS)))])
        if prev_heading is not None:
            words.append(turn_adverb(prev_heading, e.heading))
        words += ["to", "the", landmark_name(graph.landmarks[v]), "."]
        prev_heading = e.heading
    words += ["stop", ".", "<eos>"]
    return words


def parse_landmarks(words: list[str]) -> list[str]:
    """Landmark phrases in clause order (the word after each ``the``)."""
    return [words[i + 1] for i, w in enumerate(words[:-1]) if w == "the"]


def is_unambiguous(graph: NavGraph, path) -> bool:
    """Every segment's target landmark differs from all other neighbors' landmarks."""
    for u, v in zip(path[:-1], path[1:]):
        lm = graph.landmarks[v]
        if any(graph.landmarks[w] == lm for w in graph.neighbors(u) if w != v):
            return False
    return True


def sample_episode(graph: NavGraph, seed: int, vocab: Vocabulary, min_edges: int = 3,
                   max_edges: int = 6, l_max: int = 40, split: str = "train",
                   episode_id: int = 0, exclude: frozenset = frozenset()) -> Episode:
    """Pick a (start, goal) pair whose shortest path fits the constraints.

    Paths whose instruction would exceed ``l_max`` tokens, or whose clauses
    would not single out one neighbor, are rejected rather than truncated.
    """
    rng = np.random.default_rng(seed)
    pairs = [(a, b) for a in range(graph.n) for b in range(graph.n)
             if a != b and (a, b) not in exclude]
    order = rng.permutation(len(pairs))
    for idx in order:
        a, b = pairs[idx]
        path = shortest_path(graph, a, b)
        if not (min_edges <= len(path) - 1 <= max_edges) or not is_unambiguous(graph, path):
            continue
        words = render_instruction(graph, path, rng)
        if len(words) > l_max:
            continue
        return Episode(episode_id, graph.world_id, a, b, tuple(path),
                       tuple(vocab.encode(words)), split)
    raise SamplingError(f"no admissible start/goal pair in world {graph.world_id}")


# --- benchmark --------------------------------------------------------------

@dataclass(frozen=True)
class BenchmarkParams:
    seed: int = 7
    world: WorldParams = WorldParams()
    features: FeatureParams = FeatureParams()
    n_train_worlds: int = 40
    n_unseen_worlds: int = 10
    train_per_world: int = 20
    n_val_seen: int = 50
    unseen_per_world: int = 5
    min_edges: int = 3
    max_edges: int = 6
    l_max: int = 40
    threshold_ratio: float = 0.3


@dataclass
class Benchmark:
    vocab: Vocabulary
    worlds: dict[int, NavGraph]
    episodes: list[Episode]
    success_threshold: float
    meta: dict = field(default_factory=dict)

    def split(self, name: str) -> list[Episode]:
        return [e for e in self.episodes if e.split == name]

    def world(self, episode: Episode) -> NavGraph:
        return self.worlds[episode.world_id]

    def episode(self, episode_id: int) -> Episode:
        for e in self.episodes:
            if e.episode_id == episode_id:
                return e
        raise KeyError(f"no episode {episode_id}")

    def summary(self) -> dict:
        counts = {s: len(self.split(s)) for s in ("train", "val_seen", "val_unseen")}
        return {"worlds": len(self.worlds), "episodes": counts, "vocab_size": len(self.vocab),
                "success_threshold": self.success_threshold}


def _world_seed(bench_seed: int, index: int) -> int:
    digest = hashlib.blake2b(f"world:{bench_seed}:{index}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


def generate_benchmark(p: BenchmarkParams = BenchmarkParams()) -> Benchmark:
    vocab = Vocabulary.build(p.world.n_landmarks)
    worlds: dict[int, NavGraph] = {}
    train_ids, unseen_ids = [], []
    for i in range(p.n_train_worlds + p.n_unseen_worlds):
        g = generate_world(_world_seed(p.seed, i), p.world, p.features)
        worlds[g.world_id] = g
        (train_ids if i < p.n_train_worlds else unseen_ids).append(g.world_id)
    episodes: list[Episode] = []
    used: dict[int, set] = {w: set() for w in worlds}
    rng = np.random.default_rng(p.seed)

    def draw(world_id: int, split: str) -> None:
        g = worlds[world_id]
        ep = sample_episode(g, int(rng.integers(2 ** 62)), vocab, p.min_edges, p.max_edges,
                            p.l_max, split, len(episodes), frozenset(used[world_id]))
        used[world_id].add((ep.start, ep.goal))
        episodes.append(ep)

    for w in train_ids:
        for _ in range(p.train_per_world):
            draw(w, "train")
    for k in range(p.n_val_seen):
        draw(train_ids[k % len(train_ids)], "val_seen")
    for w in unseen_ids:
        for _ in range(p.unseen_per_world):
            draw(w, "val_unseen")
    mean_len = float(np.mean([shortest_path_distance(worlds[e.world_id], e.start, e.goal)
                              for e in episodes]))
    meta = {"params": params_to_dict(p), "grammar_version": GRAMMAR_VERSION}
    return Benchmark(vocab, worlds, episodes, p.threshold_ratio * mean_len, meta)


def params_to_dict(p: BenchmarkParams) -> dict:
    from dataclasses import asdict
    return asdict(p)


def save_dataset(bench: Benchmark, path) -> None:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "kind": "benchmark",
        "vocab": list(bench.vocab.tokens),
        "success_threshold": bench.success_threshold,
        "meta": bench.meta,
        "worlds": [bench.worlds[k].to_dict() for k in sorted(bench.worlds)],
        "episodes": [e.to_dict() for e in bench.episodes],
    }
    # json writes floats with repr(), the shortest string that round-trips exactly.
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def read_document(path, kind: str) -> dict:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: parse error at line {exc.lineno}, column {exc.colno} "
                           f"(offset {exc.pos}): {exc.msg}") from None
    if not isinstance(doc, dict) or "schema_version" not in doc:
        raise DatasetError(f"{path}: missing schema_version")
    if doc["schema_version"] != SCHEMA_VERSION:
        raise VersionError(f"{path}: schema version {doc['schema_version']} is not supported "
                           f"(this build reads version {SCHEMA_VERSION})")
    if doc.get("kind") != kind:
        raise DatasetError(f"{path}: expected a {kind} file, found {doc.get('kind')!r}")
    return doc


def load_dataset(path) -> Benchmark:
    doc = read_document(path, "benchmark")
    try:
        vocab = Vocabulary(tuple(doc["vocab"]))
        worlds = {}
        for w in doc["worlds"]:
            g = NavGraph.from_dict(w)
            worlds[g.world_id] = g
        episodes = [Episode.from_dict(e) for e in doc["episodes"]]
        thr = float(doc["success_threshold"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"{path}: malformed benchmark: {exc!r}") from None
    return Benchmark(vocab, worlds, episodes, thr, doc.get("meta", {}))
