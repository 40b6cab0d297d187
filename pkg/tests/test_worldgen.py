import json
import math
from collections import deque
from dataclasses import replace

import numpy as np
import pytest
from scipy.sparse.csgraph import floyd_warshall

from selfmon import worldgen as wg
from selfmon.worldgen import (BenchmarkParams, FeatureParams, WorldParams, DatasetError,
                              GenerationError, VersionError)

from conftest import make_graph


def _reachable(graph):
    seen = {0}
    q = deque([0])
    while q:
        u = q.popleft()
        for v in graph.neighbors(u):
            if v not in seen:
                seen.add(v)
                q.append(v)
    return len(seen) == graph.n


def test_world_is_deterministic():
    a = json.dumps(wg.generate_world(7).to_dict())
    b = json.dumps(wg.generate_world(7).to_dict())
    assert a == b
    assert a != json.dumps(wg.generate_world(8).to_dict())


def test_two_viewpoints_single_edge():
    g = wg.generate_world(3, WorldParams(n_viewpoints=2, n_floors=1))
    assert g.neighbors(0) == (1,) and g.neighbors(1) == (0,)
    assert g.observation(0).shape[0] == 2


@pytest.mark.parametrize("seed", range(100))
def test_generated_worlds_connected_and_symmetric(seed):
    p = WorldParams()
    g = wg.generate_world(seed, p)
    assert _reachable(g)
    for u in range(g.n):
        assert 1 <= len(g.neighbors(u)) <= p.k_max
        for v in g.neighbors(u):
            assert g.has_edge(v, u)
            e, back = g.edge(u, v), g.edge(v, u)
            d = g.positions[v] - g.positions[u]
            assert e.length == pytest.approx(np.linalg.norm(d), abs=1e-12)
            assert e.heading == pytest.approx(math.atan2(d[0], d[1]), abs=1e-12)
            assert e.elevation == pytest.approx(-back.elevation, abs=1e-12)


def test_unsatisfiable_params_raise():
    with pytest.raises(GenerationError):
        wg.generate_world(0, WorldParams(n_viewpoints=5, k_max=1))
    with pytest.raises(GenerationError):
        wg.generate_world(0, WorldParams(n_viewpoints=1))


def test_orientation_block_examples():
    f = wg.direction_feature(0, 0.0, 0.0, FeatureParams(d_app=4, tile=2, noise=0.0))
    np.testing.assert_array_equal(f[4:], [0, 1, 0, 1, 0, 1, 0, 1])
    np.testing.assert_array_equal(f[:4], [1, 0, 0, 0])
    f = wg.direction_feature(2, math.pi / 2, 0.0, FeatureParams(d_app=4, tile=1, noise=0.0))
    np.testing.assert_allclose(f[4:], [1, 0, 0, 1], atol=1e-15)


def test_appearance_block_is_unit_length_with_noise():
    p = FeatureParams()
    f = wg.direction_feature(5, 0.3, 0.1, p, noise_seed=99)
    assert f.shape == (p.d_v,)
    assert np.linalg.norm(f[:p.d_app]) == pytest.approx(1.0, abs=1e-12)
    assert np.argmax(f[:p.d_app]) == 5


def test_paper_feature_width():
    assert FeatureParams(d_app=2048, tile=32).d_v == 2176


def test_observation_row_zero_is_stop():
    g = wg.generate_world(11)
    obs = g.observation(4)
    assert obs.shape == (len(g.neighbors(4)) + 1, g.features.d_v)
    assert not obs[0].any()
    assert obs is g.observation(4)


def test_grammar_hand_expansion_one_edge():
    g = make_graph([[0, 0, 0], [0, 5, 0]], [(0, 1)], landmarks=[3, 0])
    vocab = wg.Vocabulary.build(12)
    words = wg.render_instruction(g, [0, 1], np.random.default_rng(0))
    assert words[0] == "<bos>" and words[-1] == "<eos>"
    assert words[1] in wg.VERBS
    assert words[2:] == ["to", "the", "table", ".", "stop", ".", "<eos>"]
    ids = vocab.encode(words)
    assert vocab.decode(ids) == words
    assert ids[0] == wg.BOS and ids[-1] == wg.EOS and ids[-2] == wg.PERIOD


def test_adverbs_follow_turn_angle():
    assert wg.turn_adverb(0.0, math.radians(-45)) == "left"
    assert wg.turn_adverb(0.0, math.radians(45)) == "right"
    assert wg.turn_adverb(0.0, math.radians(20)) == "straight"
    assert wg.turn_adverb(math.radians(170), math.radians(-170)) == "straight"


def test_vocabulary_bijective():
    v = wg.Vocabulary.build(12)
    assert v.id("<pad>") == wg.PAD == 0
    assert len(set(v.tokens)) == len(v)
    assert v.decode(v.encode(list(v.tokens))) == list(v.tokens)


def test_sample_episode_deterministic_and_bounded():
    g = wg.generate_world(21)
    vocab = wg.Vocabulary.build(12)
    a = wg.sample_episode(g, 5, vocab)
    b = wg.sample_episode(g, 5, vocab)
    assert a == b
    assert len(a.instruction) <= 40
    assert 3 <= len(a.path) - 1 <= 6


def test_sampling_error_when_nothing_admissible():
    g = make_graph([[0, 0, 0], [0, 5, 0]], [(0, 1)])
    with pytest.raises(wg.SamplingError):
        wg.sample_episode(g, 0, wg.Vocabulary.build(12), min_edges=3)


def test_distance_examples():
    g = make_graph([[0, 0, 0], [0, 5, 0]], [(0, 1)])
    assert wg.shortest_path_distance(g, 0, 1) == 5.0
    assert wg.shortest_path_distance(g, 1, 1) == 0.0
    # right triangle: 0-1 is 3 m, 1-2 is 4 m, 0-2 is 5 m
    tri = make_graph([[0, 0, 0], [3, 0, 0], [3, 4, 0]], [(0, 1), (1, 2), (0, 2)])
    assert wg.shortest_path_distance(tri, 0, 2) == 5.0
    assert tri.walk_length([0, 1, 2]) == 7.0


def test_disconnected_pair_raises():
    g = make_graph([[0, 0, 0], [0, 5, 0], [9, 9, 0]], [(0, 1)])
    with pytest.raises(wg.DistanceError):
        wg.shortest_path_distance(g, 0, 2)


@pytest.mark.parametrize("seed", range(10))
def test_distances_match_floyd_warshall(seed):
    g = wg.generate_world(seed)
    w = np.zeros((g.n, g.n))
    for u in range(g.n):
        for e in g.edges[u]:
            w[u, e.target] = e.length
    np.testing.assert_allclose(g.distances(), floyd_warshall(w, directed=False), atol=1e-9)
    assert np.allclose(g.distances(), g.distances().T)


def test_benchmark_invariants(desk_bench):
    b = desk_bench
    train_worlds = {e.world_id for e in b.split("train")}
    unseen_worlds = {e.world_id for e in b.split("val_unseen")}
    assert not train_worlds & unseen_worlds
    assert {e.world_id for e in b.split("val_seen")} <= train_worlds
    assert b.summary()["episodes"] == {"train": 800, "val_seen": 50, "val_unseen": 50}
    for e in b.episodes:
        g = b.world(e)
        assert g.walk_length(e.path) == pytest.approx(
            wg.shortest_path_distance(g, e.start, e.goal), abs=1e-9)
        words = b.vocab.decode(e.instruction)
        names = wg.parse_landmarks(words)
        assert names == [wg.landmark_name(g.landmarks[v]) for v in e.path[1:]]
        assert len(e.instruction) <= BenchmarkParams().l_max


def test_round_trip(tmp_path, desk_bench):
    p = tmp_path / "bench.json"
    wg.save_dataset(desk_bench, p)
    loaded = wg.load_dataset(p)
    assert loaded.episodes == desk_bench.episodes
    assert loaded.worlds == desk_bench.worlds
    assert loaded.success_threshold == desk_bench.success_threshold
    for k, g in desk_bench.worlds.items():
        assert np.array_equal(loaded.worlds[k].positions, g.positions)
        assert np.array_equal(loaded.worlds[k].observation(0), g.observation(0))


def test_truncated_file_is_a_parse_error(tmp_path):
    small = wg.generate_benchmark(replace(BenchmarkParams(), n_train_worlds=2, n_unseen_worlds=1,
                                          train_per_world=2, n_val_seen=2, unseen_per_world=2))
    p = tmp_path / "bench.json"
    wg.save_dataset(small, p)
    text = p.read_text()
    p.write_text(text[: len(text) // 2])
    with pytest.raises(DatasetError, match="line"):
        wg.load_dataset(p)


def test_future_version_rejected(tmp_path):
    p = tmp_path / "bench.json"
    p.write_text(json.dumps({"schema_version": wg.SCHEMA_VERSION + 1, "kind": "benchmark"}))
    with pytest.raises(VersionError):
        wg.load_dataset(p)
