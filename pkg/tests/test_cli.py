import json

import numpy as np
import pytest

from entrometa.cli import main
from entrometa.metalearn import load_checkpoint


@pytest.fixture
def tiny_config_file(tmp_path):
    config = {
        "kind": "noise_table",
        "dataset": {"num_classes": 10, "dim": 4, "per_class": 16, "separation": 6.0,
                    "nuisance_dim": 0, "seed": 0},
        "episodes": {"way": 2, "shot": 1, "query_per_class": 4, "n_eval_episodes": 4},
        "trainer": {"alpha": 0.1, "eta": 0.05, "inner_steps": 2, "meta_batch": 2,
                    "epochs": 6, "hidden": [8]},
        "wct": {"lr": 0.1, "batch_size": 16, "epochs": 30},
        "methods": ["wct"],
        "noise_levels": [0.0],
        "seeds": [0],
    }
    path = tmp_path / "config.json"
    path.write_text(json.dumps(config))
    return str(path)


def test_entropy_subcommand(capsys):
    assert main(["entropy", "--m", "100", "--C", "10", "--noise", "0.3"]) == 0
    out = capsys.readouterr().out
    assert "p_correct=0.700000" in out
    assert "expected_correct=70.000000" in out


def test_entropy_with_budget(capsys):
    import math
    H = 100 * math.log(10)
    assert main(["entropy", "--m", "100", "--C", "10", "--H", str(H)]) == 0
    assert "noise_probability=0.000000" in capsys.readouterr().out


def test_bounds_subcommand_csv(capsys):
    assert main(["bounds", "--m", "1000", "--C1", "1628", "--C2", "5", "--k", "2",
                 "--grid-points", "4"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "H,wct_bound,meta_bound,ratio"
    assert len(lines) == 6  # header + 4 rows + corollary comment
    assert lines[-1].startswith("# corollary holds=True lhs=50")
    wct_vals = [float(line.split(",")[1]) for line in lines[1:5]]
    assert all(b < a for a, b in zip(wct_vals, wct_vals[1:]))


def test_cluster_subcommand(tmp_path, capsys):
    rng = np.random.default_rng(0)
    pts = np.vstack([rng.normal(size=(10, 2)), rng.normal(size=(10, 2)) + 12.0])
    path = tmp_path / "points.csv"
    np.savetxt(path, pts, delimiter=",")
    assert main(["cluster", "--input", str(path), "--eps", "3.0",
                 "--min-samples", "3"]) == 0
    labels = [int(v) for v in capsys.readouterr().out.split()]
    assert len(labels) == 20
    assert len(set(labels[:10])) == 1 and len(set(labels[10:])) == 1
    assert labels[0] != labels[10]


def test_cluster_kmeans_mode(tmp_path, capsys):
    rng = np.random.default_rng(1)
    pts = np.vstack([rng.normal(size=(8, 3)), rng.normal(size=(8, 3)) + 9.0])
    path = tmp_path / "pts.csv"
    np.savetxt(path, pts, delimiter=",")
    assert main(["cluster", "--input", str(path), "--algorithm", "kmeans",
                 "--k", "2"]) == 0
    labels = [int(v) for v in capsys.readouterr().out.split()]
    assert sorted(set(labels)) == [0, 1]


def test_stability_subcommand(tmp_path, capsys):
    rng = np.random.default_rng(2)
    X = rng.normal(size=(60, 5))
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    np.savetxt(a, X, delimiter=",")
    np.savetxt(b, X @ (rng.normal(size=(5, 5)) + 4 * np.eye(5)), delimiter=",")
    assert main(["stability", "--x", str(a), "--y", str(b), "--threshold", "1.0"]) == 0
    assert abs(float(capsys.readouterr().out.strip()) - 1.0) < 1e-9


def test_run_subcommand(tiny_config_file, capsys):
    assert main(["run", "--config", tiny_config_file]) == 0
    out = capsys.readouterr().out
    assert "wct" in out and "status=ok" in out


def test_run_with_override(tiny_config_file, capsys):
    assert main(["run", "--config", tiny_config_file,
                 "--set", "episodes.n_eval_episodes=2"]) == 0
    assert "status=ok" in capsys.readouterr().out


def test_run_invalid_config(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"kind": "not_a_kind"}))
    assert main(["run", "--config", str(bad)]) == 2
    assert "config error" in capsys.readouterr().err


def test_run_missing_config_file(capsys):
    assert main(["run", "--config", "/nonexistent.json"]) == 2


def test_sweep_subcommand(tiny_config_file, tmp_path, capsys):
    grid = tmp_path / "grid.json"
    grid.write_text(json.dumps({"trainer.alpha": [0.1, 0.2]}))
    assert main(["sweep", "--config", tiny_config_file, "--grid", str(grid)]) == 0
    assert "2 rows" in capsys.readouterr().out


def test_train_subcommand(tiny_config_file, tmp_path, capsys):
    out = tmp_path / "model.bin"
    assert main(["train", "--config", tiny_config_file, "--method", "maml",
                 "--output", str(out)]) == 0
    loaded = load_checkpoint(str(out), [4, 8], num_groups=1, c_max=2)
    assert loaded.head_w.value.shape == (8, 2)
