import numpy as np
import pytest

from selfmon import numcore as nc


def central_diff(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` w.r.t. every entry of ``x`` (mutated in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def assert_grad_close(analytic, numeric, rel=1e-4, abs_=1e-7):
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    err = np.abs(analytic - numeric)
    tol = np.maximum(rel * np.maximum(np.abs(analytic), np.abs(numeric)), abs_)
    bad = err > tol
    assert not bad.any(), (
        f"{int(bad.sum())} entries off; worst abs err {err.max():.3e}, "
        f"analytic {analytic[bad][:3]}, numeric {numeric[bad][:3]}")


def grad_of(build, leaves):
    """Analytic gradients of scalar ``build()`` w.r.t. the given leaf tensors."""
    for t in leaves:
        t.grad = None
    with nc.Tape() as tape:
        out = build()
    nc.backward(tape, out)
    return [t.grad if t.grad is not None else np.zeros_like(t.value) for t in leaves]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_graph(positions, pairs, landmarks=None, world_id=0, features=None):
    """Hand-built NavGraph from 3-D positions and undirected (u, v) pairs."""
    import math
    from selfmon.worldgen import Edge, FeatureParams, NavGraph
    pos = np.asarray(positions, dtype=np.float64)
    n = len(pos)
    adj = [set() for _ in range(n)]
    for u, v in pairs:
        adj[u].add(v)
        adj[v].add(u)
    edges = []
    for u in range(n):
        row = []
        for v in sorted(adj[u]):
            d = pos[v] - pos[u]
            row.append(Edge(v, math.atan2(d[0], d[1]), math.atan2(d[2], math.hypot(d[0], d[1])),
                            float(np.linalg.norm(d))))
        edges.append(tuple(row))
    landmarks = tuple(range(n)) if landmarks is None else tuple(landmarks)
    return NavGraph(world_id, pos, landmarks, tuple(edges), features or FeatureParams())


@pytest.fixture(scope="session")
def desk_bench():
    from selfmon.worldgen import generate_benchmark
    return generate_benchmark()


TINY_BENCH_KW = dict(n_train_worlds=2, n_unseen_worlds=1, train_per_world=4, n_val_seen=2,
                     unseen_per_world=2)


@pytest.fixture(scope="session")
def tiny_bench():
    from dataclasses import replace
    from selfmon.worldgen import BenchmarkParams, generate_benchmark
    return generate_benchmark(replace(BenchmarkParams(), **TINY_BENCH_KW))


def tiny_config(**kw):
    from selfmon.config import ModelConfig
    base = dict(vocab_size=30, d_emb=4, d_x=4, d_h=4, d_v=32, d_g=6, d_a=5, l_max=40, k_max=5)
    base.update(kw)
    return ModelConfig(**base)


def rollout_loss(agent, bench, episodes, training=True, max_steps=2, lam=0.5, seed=5):
    """Scalar teacher-forced loss; dropout masks are redrawn identically on every call."""
    from selfmon.training import episode_loss, rollout_episode
    ro = rollout_episode(agent, episodes, bench, "teacher", None, training,
                         np.random.default_rng(seed), max_steps)
    return nc.sum_all(episode_loss(ro, lam))


def check_param_grads(agent, loss_fn, names=None, h=1e-5):
    """Compare analytic and central-difference gradients for every named parameter."""
    agent.params.zero_grad()
    with nc.Tape() as tape:
        out = loss_fn()
    nc.backward(tape, out)
    names = sorted(agent.params) if names is None else names
    checked = 0
    for name in names:
        p = agent.params[name]
        analytic = p.grad if p.grad is not None else np.zeros_like(p.value)

        def f():
            with nc.no_tape():
                return float(loss_fn().value)

        numeric = central_diff(f, p.value, h)
        try:
            assert_grad_close(analytic, numeric)
        except AssertionError as exc:
            raise AssertionError(f"{name}: {exc}") from None
        checked += p.value.size
    return checked


class ScriptedPolicy:
    """Policy whose outputs are functions of the visited history.

    ``probs(history)`` gives the (K+1,) action distribution at ``history[-1]``
    and ``progress(history)`` the raw progress estimate there.
    """

    def __init__(self, graph, probs, progress):
        self.graph = graph
        self.probs = probs
        self.progress = progress
        self.calls = 0

    def start(self):
        return ()

    def score(self, states, viewpoints):
        from selfmon.inference import Scored
        out = []
        for hist, v in zip(states, viewpoints):
            self.calls += 1
            hist = tuple(hist) + (v,)
            nbrs = self.graph.neighbors(v)
            out.append(Scored(np.asarray(self.probs(hist), dtype=float), float(self.progress(hist)),
                              lambda k, hist=hist: hist))
        return out


def markov_policy(graph, seed):
    """Scores that depend on the current viewpoint only."""
    r = np.random.default_rng(seed)
    probs = {v: r.dirichlet(np.ones(len(graph.neighbors(v)) + 1)) for v in range(graph.n)}
    prog = {v: float(r.uniform(-0.95, 0.95)) for v in range(graph.n)}
    return ScriptedPolicy(graph, lambda h: probs[h[-1]], lambda h: prog[h[-1]])


def random_tiny_graph(seed, n=None):
    r = np.random.default_rng(seed)
    n = n or int(r.integers(3, 5))
    pos = np.c_[r.uniform(0, 10, size=(n, 2)), np.zeros(n)]
    pairs = {(i, i + 1) for i in range(n - 1)}
    for _ in range(int(r.integers(0, n))):
        a, b = sorted(r.choice(n, 2, replace=False))
        pairs.add((int(a), int(b)))
    return make_graph(pos, sorted(pairs), world_id=seed)


def enumerate_best(policy, graph, start, horizon, pm_score=True):
    """Exhaustive search over every stopped trajectory within ``horizon`` decisions."""
    import math
    from selfmon.inference import normalize_progress
    trajs = []

    def visit(hist, score, depth):
        if depth == horizon:
            return
        s = policy.score([hist[:-1]], [hist[-1]])[0]
        pm = normalize_progress(s.p_pm) if pm_score else 1.0
        for k, pk in enumerate(s.p):
            sc = score + math.log(pm * pk)
            if k == 0:
                trajs.append((sc, hist))
            else:
                visit(hist + (graph.neighbors(hist[-1])[k - 1],), sc, depth + 1)

    visit((start,), 0.0, 0)
    return trajs


ACCEPTANCE_LINES: list[str] = []


def report(number, name, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'}  criterion {number:>2}  {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
