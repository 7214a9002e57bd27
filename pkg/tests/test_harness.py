import json
import math
import os

import numpy as np
import pytest

from entrometa.cluster import DbscanParams
from entrometa.harness import (
    ConfigError,
    EpisodeSpec,
    ExperimentConfig,
    SyntheticSpec,
    TrainerSpec,
    UnsupSpec,
    WctSpec,
    apply_overrides,
    build_labeled_episodes,
    config_from_dict,
    config_hash,
    config_to_dict,
    gen_synthetic,
    run_experiment,
    split_classes,
    sweep,
    _annotate,
    _noise_for_fraction,
    _prepare_pool,
    _run_supervised_cell,
)
from entrometa.metalearn import _logistic_probe


def tiny_config(**kw):
    base = dict(
        kind="noise_table",
        dataset=SyntheticSpec(num_classes=10, dim=4, per_class=16, separation=6.0,
                              nuisance_dim=0, seed=0),
        episodes=EpisodeSpec(way=2, shot=1, query_per_class=4, n_eval_episodes=6),
        trainer=TrainerSpec(alpha=0.1, eta=0.05, inner_steps=2, meta_batch=2,
                            epochs=8, hidden=(8,)),
        wct=WctSpec(lr=0.1, batch_size=16, epochs=40),
        methods=("wct",),
        noise_levels=(0.0,),
        seeds=(0,),
    )
    base.update(kw)
    return ExperimentConfig(**base)


# -- synthetic pools ----------------------------------------------------------


def test_gen_synthetic_shapes_and_determinism():
    spec = SyntheticSpec(num_classes=5, dim=3, per_class=7, separation=4.0, seed=3)
    X, y = gen_synthetic(spec)
    X2, y2 = gen_synthetic(spec)
    assert X.shape == (35, 3) and y.shape == (35,)
    assert np.array_equal(X, X2) and np.array_equal(y, y2)


def test_gen_synthetic_centroid_spacing():
    spec = SyntheticSpec(num_classes=8, dim=5, per_class=50, separation=7.0, seed=1)
    X, y = gen_synthetic(spec)
    centroids = np.vstack([X[y == c].mean(axis=0) for c in range(8)])
    d = np.sqrt(((centroids[:, None] - centroids[None, :]) ** 2).sum(-1))
    np.fill_diagonal(d, np.inf)
    assert d.min() > 7.0 - 1.0  # sample means wobble around true centroids


def test_gen_synthetic_zero_separation_is_chance():
    spec = SyntheticSpec(num_classes=4, dim=6, per_class=60, separation=0.0, seed=0)
    X, y = gen_synthetic(spec)
    half = len(X) // 2
    rng = np.random.default_rng(0)
    order = rng.permutation(len(X))
    tr, te = order[:half], order[half:]
    pred = _logistic_probe(X[tr], y[tr], X[te], 4)
    acc = (pred == y[te]).mean()
    sigma = math.sqrt(0.25 * 0.75 / te.size)
    assert abs(acc - 0.25) <= 4 * sigma


def test_gen_synthetic_separated_probe_oracle():
    spec = SyntheticSpec(num_classes=10, dim=16, per_class=40, separation=6.0, seed=0)
    X, y = gen_synthetic(spec)
    rng = np.random.default_rng(1)
    order = rng.permutation(len(X))
    half = len(X) // 2
    tr, te = order[:half], order[half:]
    pred = _logistic_probe(X[tr], y[tr], X[te], 10, steps=300)
    assert (pred == y[te]).mean() >= 0.95


def test_gen_synthetic_imbalance_and_outliers():
    spec = SyntheticSpec(num_classes=6, dim=4, per_class=20, separation=5.0,
                         imbalance=0.5, outlier_fraction=0.2, seed=2)
    X, y = gen_synthetic(spec)
    counts = [(y == c).sum() for c in range(6)]
    assert min(counts) < max(counts)
    n_junk = (y == -1).sum()
    assert n_junk == round(0.2 * (len(X) - n_junk) / 0.8)


def test_gen_synthetic_nuisance_rotation_consistent():
    spec = SyntheticSpec(num_classes=4, dim=3, per_class=10, separation=5.0,
                         nuisance_dim=5, nuisance_scale=2.0, seed=7)
    X, y = gen_synthetic(spec)
    assert X.shape[1] == 8


def test_split_classes_disjoint():
    train, val, test = split_classes(25, seed=4)
    assert len(train) == 15 and len(val) == 5 and len(test) == 5
    assert not set(train) & set(val) and not set(train) & set(test)
    assert not set(val) & set(test)
    assert sorted([*train, *val, *test]) == list(range(25))


# -- episodes -----------------------------------------------------------------


def test_build_labeled_episodes_structure():
    spec = SyntheticSpec(num_classes=8, dim=4, per_class=20, separation=6.0, seed=0)
    X, y = gen_synthetic(spec)
    eps = build_labeled_episodes(
        X, y, np.arange(8), EpisodeSpec(way=3, shot=2, query_per_class=5),
        n_episodes=4, rng=np.random.default_rng(0), y_true=y,
    )
    assert len(eps) == 4
    for t in eps:
        assert t.way == 3
        assert t.support_x.shape == (6, 4) and t.query_x.shape == (15, 4)
        assert set(t.support_y) == {0, 1, 2}
        assert np.array_equal(t.support_true, t.support_y)  # clean annotations


def test_build_labeled_episodes_noisy_annotations_carry_truth():
    spec = SyntheticSpec(num_classes=6, dim=4, per_class=30, separation=6.0, seed=0)
    X, y = gen_synthetic(spec)
    from entrometa.entropy import EntropyBudget, corrupt_labels, entropy_for_noise

    H = entropy_for_noise(0.4, y.size, 6)
    y_annot = corrupt_labels(y, EntropyBudget(y.size, 6, H), seed=0)
    eps = build_labeled_episodes(
        X, y_annot, np.arange(6), EpisodeSpec(way=2, shot=3, query_per_class=5),
        n_episodes=6, rng=np.random.default_rng(1), y_true=y,
    )
    mismatch = np.concatenate([
        np.concatenate([t.support_y != t.support_true, t.query_y != t.query_true])
        for t in eps
    ])
    assert 0.1 < mismatch.mean() < 0.7  # noise visibly flows into episodes


def test_build_labeled_episodes_insufficient_samples():
    spec = SyntheticSpec(num_classes=3, dim=2, per_class=4, separation=5.0, seed=0)
    X, y = gen_synthetic(spec)
    with pytest.raises(ConfigError, match="needs"):
        build_labeled_episodes(
            X, y, np.arange(3), EpisodeSpec(way=2, shot=3, query_per_class=5),
            n_episodes=1, rng=np.random.default_rng(0),
        )


def test_annotate_deterministic_and_shared():
    y = np.arange(300) % 6
    a1, H1 = _annotate(y, 6, 0.3, seed=9)
    a2, H2 = _annotate(y, 6, 0.3, seed=9)
    assert np.array_equal(a1, a2) and H1 == H2
    assert 0.2 < (a1 != y).mean() < 0.4


def test_prepare_pool_class_disjointness():
    config = tiny_config()
    X, y, X_train, y_local, train_c, test_c = _prepare_pool(config, 0)
    assert not set(train_c) & set(test_c)
    assert y_local.max() < len(train_c)


# -- config plumbing ----------------------------------------------------------


def test_config_round_trip_and_hash():
    config = tiny_config()
    data = config_to_dict(config)
    again = config_from_dict(json.loads(json.dumps(data)))
    assert config_hash(again) == config_hash(config)


def test_config_rejects_bad_kind_and_fields():
    with pytest.raises(ConfigError):
        config_from_dict({"kind": "nope"})
    with pytest.raises(ConfigError):
        config_from_dict({"kind": "noise_table", "trainer": {"bogus": 1}})
    with pytest.raises(ConfigError):
        config_from_dict({"kind": "noise_table", "seeds": []})


def test_apply_overrides_dotted_paths():
    data = config_to_dict(tiny_config())
    out = apply_overrides(data, {"trainer.alpha": 0.5, "dataset.dim": 9})
    assert out["trainer"]["alpha"] == 0.5 and out["dataset"]["dim"] == 9
    assert data["trainer"]["alpha"] == 0.1  # original untouched


def test_noise_for_fraction_endpoints():
    config = tiny_config()
    assert _noise_for_fraction(config, 1.0) == pytest.approx(0.0, abs=1e-12)
    C = max(2, int(round(config.dataset.num_classes * 0.6)))
    assert _noise_for_fraction(config, 0.0) == pytest.approx((C - 1) / C, rel=1e-12)


# -- run_experiment -----------------------------------------------------------


def test_run_experiment_rows_and_outputs(tmp_path):
    out = tmp_path / "rows.csv"
    config = tiny_config(output=str(out), methods=("wct", "maml"), seeds=(0, 1))
    result = run_experiment(config)
    rows = result["rows"]
    assert len(rows) == 4  # 1 noise x 2 methods x 2 seeds
    for row in rows:
        assert row["status"] == "ok"
        assert row["config_hash"] == config_hash(config)
        assert 0.0 <= row["metric"] <= 1.0
        assert row["wall_clock_s"] > 0
    text = out.read_text().splitlines()
    assert text[0].startswith("kind,method,seed")
    assert len(text) == 5
    sidecar = json.loads((tmp_path / "rows.csv.config.json").read_text())
    assert sidecar["kind"] == "noise_table"


def test_run_experiment_metric_columns_bitwise_reproducible():
    config = tiny_config(methods=("wct", "maml"))
    a = run_experiment(config)["rows"]
    b = run_experiment(config)["rows"]
    for ra, rb in zip(a, b):
        assert repr(ra["metric"]) == repr(rb["metric"])
        assert repr(ra["ci95"]) == repr(rb["ci95"])


def test_run_experiment_failed_cells_are_rows():
    config = tiny_config(
        kind="ablation",
        methods=("unsup_meta",),
        dataset=SyntheticSpec(num_classes=10, dim=4, per_class=10, separation=6.0,
                              nuisance_dim=0, seed=0),
        unsup=UnsupSpec(samples_per_task=500, pretrain_epochs=5),  # > pool size
    )
    rows = run_experiment(config)["rows"]
    assert len(rows) == 1
    assert rows[0]["status"] == "failed"
    assert rows[0]["error"]


def test_run_experiment_emits_traces_when_enabled():
    config = tiny_config(trace_stability=True, trace_every=4, trace_noise=0.0)
    result = run_experiment(config)
    assert result["traces"], "expected stability trace records"
    rec = result["traces"][0]
    assert {"method", "seed", "layer", "epoch", "rs"} <= set(rec)


def test_run_experiment_bounds_sweep_rows():
    config = tiny_config(kind="bounds_sweep", entropy_points=5)
    rows = run_experiment(config)["rows"]
    assert len(rows) == 15  # 5 grid points x {wct_bound, meta_bound, ratio}
    wct_vals = [r["metric"] for r in rows if r["method"] == "wct_bound"]
    assert len(wct_vals) == 5
    assert all(b < a for a, b in zip(wct_vals, wct_vals[1:]))  # decreasing in H


def test_entropy_curve_grid_respects_bounds():
    config = tiny_config(kind="entropy_curve", entropy_points=3,
                         entropy_lo=0.5, entropy_hi=1.0, methods=("wct",))
    rows = run_experiment(config)["rows"]
    fractions = sorted({float(r["value"]) for r in rows})
    assert fractions == pytest.approx([0.5, 0.75, 1.0])


# -- sweep ----------------------------------------------------------------------


def test_sweep_single_cell_matches_run_experiment():
    config = tiny_config(methods=("wct",))
    direct = run_experiment(config)["rows"]
    swept = sweep(config, {"trainer.alpha": [0.1]})["rows"]
    assert len(swept) == len(direct)
    assert repr(swept[0]["metric"]) == repr(direct[0]["metric"])
    assert "trainer.alpha=0.1" in str(swept[0]["value"])


def test_sweep_empty_grid_rejected():
    with pytest.raises(ConfigError):
        sweep(tiny_config(), {})
    with pytest.raises(ConfigError):
        sweep(tiny_config(), {"trainer.alpha": []})


def test_sweep_eps_extremes_fail_midband_succeeds():
    config = ExperimentConfig(
        kind="ablation",
        dataset=SyntheticSpec(num_classes=10, dim=6, per_class=20, separation=8.0,
                              nuisance_dim=0, seed=0),
        episodes=EpisodeSpec(way=2, shot=1, query_per_class=3, n_eval_episodes=4),
        ways=(2,),
        trainer=TrainerSpec(alpha=0.2, eta=0.05, inner_steps=2, meta_batch=2,
                            epochs=4, hidden=(8,), clip_norm=1.0),
        dbscan=DbscanParams(eps=1.0, min_samples=4),
        unsup=UnsupSpec(samples_per_task=40, num_groups=1, c_max=6,
                        pretrain_epochs=30, auto_eps=False),
        methods=("unsup_meta",),
        seeds=(0,),
    )
    result = sweep(config, {"dbscan.eps": [1e-6, 1.5, 1e6]})
    status = {}
    for row in result["rows"]:
        for part in str(row["value"]).split("|")[-1].split(";"):
            if part.startswith("dbscan.eps="):
                status[float(part.split("=")[1])] = row["status"]
    assert status[1e-6] == "failed"
    assert status[1e6] == "failed"
    assert status[1.5] == "ok"


def test_fixed_entropy_dilution_trend():
    # one annotation budget, wider tasks: accuracy must not improve
    m = int(round(20 * 0.6)) * 16
    results = []
    for way in (2, 4):
        config = tiny_config(
            dataset=SyntheticSpec(num_classes=20, dim=4, per_class=16, separation=6.0,
                                  nuisance_dim=0, seed=0),
            episodes=EpisodeSpec(way=way, shot=1, query_per_class=4, n_eval_episodes=10),
            eval_way=4, eval_shot=1,
            fixed_H_nats=m * math.log(2),
            methods=("maml",),
            trainer=TrainerSpec(alpha=0.1, eta=0.05, inner_steps=3, meta_batch=2,
                                epochs=60, hidden=(16,)),
        )
        accs = [_run_supervised_cell(config, "maml", 0.0, s)[0] for s in (0, 1)]
        results.append(float(np.mean(accs)))
    assert results[1] <= results[0] + 0.05


def test_threaded_execution_matches_serial(monkeypatch):
    config = tiny_config(methods=("wct", "maml"), seeds=(0, 1))
    serial = run_experiment(config)["rows"]
    monkeypatch.setenv("ENTROMETA_THREADS", "2")
    threaded = run_experiment(config)["rows"]
    for ra, rb in zip(serial, threaded):
        assert ra["method"] == rb["method"] and ra["seed"] == rb["seed"]
        assert repr(ra["metric"]) == repr(rb["metric"])


def test_heterogeneous_cell_all_methods():
    from entrometa.harness import _run_heterogeneous_cell

    config = tiny_config(
        kind="heterogeneous",
        dataset=SyntheticSpec(num_classes=20, dim=4, per_class=20, separation=6.0,
                              nuisance_dim=0, seed=0),
        episodes=EpisodeSpec(way=3, shot=1, query_per_class=5, n_eval_episodes=6),
        ways=(2, 3),
        trainer=TrainerSpec(alpha=0.1, eta=0.05, inner_steps=2, meta_batch=2,
                            epochs=20, hidden=(12,)),
        methods=("mtl", "static_head", "dynamic_head"),
    )
    for method in ("dynamic_head", "static_head", "mtl"):
        acc, ci, traces = _run_heterogeneous_cell(config, method, 0)
        assert 0.0 <= acc <= 1.0 and ci >= 0.0 and traces == []
