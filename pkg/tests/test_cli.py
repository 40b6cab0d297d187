import json

import numpy as np
import pytest

from selfmon.cli import EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, main
from selfmon.worldgen import load_dataset

from conftest import TINY_BENCH_KW

SMALL = {"benchmark": TINY_BENCH_KW, "model": {"d_h": 8, "d_x": 8, "d_g": 12, "d_a": 6}}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "cfg.json").write_text(json.dumps(SMALL))
    assert main(["gen", "--config", str(d / "cfg.json"), "--out", str(d / "b.json")]) == 0
    assert main(["train", "--config", str(d / "cfg.json"), "--benchmark", str(d / "b.json"),
                 "--epochs", "2", "--batch", "4", "--out-dir", str(d / "run"),
                 "--deterministic"]) == 0
    return d


def test_gen_is_reproducible(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(SMALL))
    for name in ("a.json", "b.json"):
        assert main(["gen", "--seed", "7", "--config", str(cfg), "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    out = capsys.readouterr().out
    bench = load_dataset(tmp_path / "a.json")
    for split, n in bench.summary()["episodes"].items():
        assert f"{split:<11} {n} episodes" in out


def test_paper_shapes_features(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"benchmark": {**TINY_BENCH_KW, "n_unseen_worlds": 1}}))
    assert main(["gen", "--preset", "paper-shapes", "--config", str(cfg),
                 "--out", str(tmp_path / "p.json")]) == 0
    bench = load_dataset(tmp_path / "p.json")
    g = next(iter(bench.worlds.values()))
    assert g.observation(0).shape[1] == 2176


def test_train_artifacts_embed_config(workdir):
    run = workdir / "run"
    for name in ("best.json", "last.json", "config.json", "metrics.jsonl"):
        assert (run / name).exists()
    ckpt = json.loads((run / "last.json").read_text())
    assert ckpt["extra"]["run"]["train"]["lam"] == 0.5
    assert ckpt["extra"]["run"]["model"]["d_h"] == 8
    recs = [json.loads(line) for line in (run / "metrics.jsonl").read_text().splitlines()]
    assert {r["split"] for r in recs} == {"train", "val_seen", "val_unseen"}
    assert set(recs[1]) == {"epoch", "split", "NE", "SR", "OSR", "SPL", "loss"}


def test_train_same_seed_same_log(workdir):
    d = workdir
    assert main(["train", "--config", str(d / "cfg.json"), "--benchmark", str(d / "b.json"),
                 "--epochs", "2", "--batch", "4", "--out-dir", str(d / "run_again"),
                 "--deterministic"]) == 0
    assert (d / "run" / "metrics.jsonl").read_bytes() == (d / "run_again" / "metrics.jsonl").read_bytes()
    assert (d / "run" / "last.json").read_bytes() == (d / "run_again" / "last.json").read_bytes()


def test_flags_override_config(workdir):
    d = workdir
    assert main(["train", "--config", str(d / "cfg.json"), "--benchmark", str(d / "b.json"),
                 "--epochs", "1", "--batch", "4", "--lam", "1.0", "--out-dir", str(d / "lam1")]) == 0
    run = json.loads((d / "lam1" / "config.json").read_text())
    assert run["train"]["lam"] == 1.0 and run["train"]["epochs"] == 1


def test_resume_continues_step_counter(workdir):
    d = workdir
    before = json.loads((d / "run" / "last.json").read_text())["state"]["step"]
    assert main(["train", "--benchmark", str(d / "b.json"), "--resume", str(d / "run" / "last.json"),
                 "--epochs", "3", "--out-dir", str(d / "resumed")]) == 0
    state = json.loads((d / "resumed" / "last.json").read_text())["state"]
    assert state["epoch"] == 3 and state["step"] == before + before // 2


@pytest.mark.parametrize("mode", ["greedy", "progress", "beam"])
def test_eval_modes(workdir, mode, capsys):
    d = workdir
    args = ["eval", "--checkpoint", str(d / "run" / "best.json"), "--benchmark", str(d / "b.json"),
            "--mode", mode, "--out-dir", str(d / f"eval_{mode}")]
    assert main(args) == 0
    first = capsys.readouterr().out
    header = first.splitlines()[0].split()
    assert header[2:] == ["NE", "SR", "OSR", "SPL"]
    lines = (d / f"eval_{mode}" / f"trajectories_val_seen_{mode}.jsonl").read_text().splitlines()
    head, step = json.loads(lines[0]), json.loads(lines[1])
    assert head["mode"] == mode and head["schema_version"] == 1
    assert {"t", "viewpoint", "action", "p", "alpha", "beta", "p_pm"} <= set(step)
    assert main(args) == 0
    assert capsys.readouterr().out == first


def test_eval_no_pm_score_and_threads(workdir):
    d = workdir
    base = ["eval", "--checkpoint", str(d / "run" / "best.json"), "--benchmark", str(d / "b.json"),
            "--mode", "beam", "--no-pm-score"]
    assert main(base + ["--out-dir", str(d / "np1")]) == 0
    assert main(base + ["--out-dir", str(d / "np2"), "--threads", "3"]) == 0
    a = json.loads((d / "np1" / "results_beam.json").read_text())
    b = json.loads((d / "np2" / "results_beam.json").read_text())
    assert a["inference"]["pm_score"] is False and a["rows"] == b["rows"]


def test_ablate_grid(workdir, capsys):
    d = workdir
    args = ["ablate", "--benchmark", str(d / "b.json"), "--co-grounding",
            str(d / "lam1" / "best.json") if (d / "lam1").exists() else str(d / "run" / "best.json"),
            "--progress-monitor", str(d / "run" / "best.json"), "--out-dir", str(d / "ab")]
    assert main(args) == 0
    rep = json.loads((d / "ab" / "ablation.json").read_text())
    assert [r["#"] for r in rep["rows"]] == [1, 2, 3, 4, 5, 6]
    assert rep["rows"][0]["progress_monitor"] == "" and rep["rows"][5]["beam_search"] == "x"
    assert main(args) == 0
    assert json.loads((d / "ab" / "ablation.json").read_text()) == rep


def test_ablate_missing_checkpoint_is_listed(workdir, capsys):
    d = workdir
    assert main(["ablate", "--benchmark", str(d / "b.json"), "--co-grounding", str(d / "nope.json"),
                 "--progress-monitor", str(d / "run" / "best.json"),
                 "--out-dir", str(d / "ab2")]) == 0
    assert "nope.json" in capsys.readouterr().err
    assert len(json.loads((d / "ab2" / "ablation.json").read_text())["rows"]) == 3


def test_trace(workdir, capsys):
    d = workdir
    bench = load_dataset(d / "b.json")
    ep = bench.split("val_seen")[0]
    out = d / "trace.jsonl"
    assert main(["trace", "--checkpoint", str(d / "run" / "best.json"), "--benchmark",
                 str(d / "b.json"), "--episode", str(ep.episode_id), "--out", str(out)]) == 0
    lines = [json.loads(x) for x in out.read_text().splitlines()]
    head, rows = lines[0], lines[1:]
    n_steps = int(capsys.readouterr().out.split(":")[1].split()[0])
    assert len(rows) == n_steps
    for r in rows:
        assert abs(sum(r["alpha"]) - 1) < 1e-6
    assert head["kind"] == "trace"


def test_exit_codes(workdir, tmp_path, monkeypatch):
    d = workdir
    assert main(["eval", "--checkpoint", str(d / "run" / "best.json"),
                 "--benchmark", str(tmp_path / "missing.json")]) == EXIT_DATA
    assert main(["eval", "--checkpoint", "x", "--benchmark", "y", "--mode", "bogus"]) == EXIT_CONFIG
    bad = tmp_path / "bad.json"
    bad.write_text('{"train": {"lr": -1}}')
    assert main(["train", "--config", str(bad), "--benchmark", str(d / "b.json"),
                 "--out-dir", str(tmp_path)]) == EXIT_CONFIG
    other = tmp_path / "other.json"
    other.write_text(json.dumps({"benchmark": {**TINY_BENCH_KW}}))
    assert main(["gen", "--config", str(other), "--preset", "paper-shapes",
                 "--out", str(tmp_path / "pb.json")]) == 0
    assert main(["eval", "--checkpoint", str(d / "run" / "best.json"),
                 "--benchmark", str(tmp_path / "pb.json")]) == EXIT_CONFIG

    import selfmon.training as training

    def boom(self, batch):
        raise training.NumericError("non-finite loss nan at step 0")

    monkeypatch.setattr(training.Trainer, "train_step", boom)
    assert main(["train", "--benchmark", str(d / "b.json"), "--epochs", "1",
                 "--out-dir", str(tmp_path / "nan")]) == EXIT_NUMERIC
    assert "non-finite" in (tmp_path / "nan" / "nan_dump.txt").read_text()
