"""Synthetic pools, experiment orchestration, sweeps, and CSV export.

Every experiment follows the same skeleton: generate a Gaussian-cluster
pool, split its classes 60/20/20 into train/val/test, spend an annotation
budget on the training labels, train each requested method on exactly the
same corrupted labels, and score on few-shot episodes drawn from the
held-out test classes.  One CSV row per (grid point, method, seed); a
failed sub-run becomes a ``status=failed`` row instead of aborting the
grid.  Metric columns are bitwise reproducible for a fixed config in
single-threaded mode (wall-clock obviously is not).

The ``ENTROMETA_THREADS`` environment variable sets the grid executor's
thread count (default 1, the deterministic reference mode; rows are
written in canonical order either way).
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .bounds import BoundInputs, corollary_check, dominant_term_ratio, meta_bound, wct_bound
from .cluster import DBSCAN, DbscanParams, KMeans, construct_pseudo_tasks
from .entropy import EntropyBudget, corrupt_labels, entropy_for_noise, noise_probability
from .metalearn import (
    MetaLearner,
    MultiTaskTrainer,
    WholeClassTrainer,
    evaluate_episodes,
    init_model,
    reconstruction_pretrain,
)
from .tasks import Task

__all__ = [
    "SyntheticSpec",
    "EpisodeSpec",
    "TrainerSpec",
    "WctSpec",
    "UnsupSpec",
    "ExperimentConfig",
    "ConfigError",
    "gen_synthetic",
    "build_labeled_episodes",
    "run_experiment",
    "sweep",
    "write_rows",
    "apply_overrides",
    "config_from_dict",
    "config_hash",
]

EXPERIMENT_KINDS = (
    "entropy_curve",
    "noise_table",
    "heterogeneous",
    "ablation",
    "sensitivity_sweep",
    "bounds_sweep",
)

CSV_COLUMNS = [
    "kind", "method", "seed", "grid", "value", "metric", "ci95",
    "status", "error", "wall_clock_s", "config_hash",
]


class ConfigError(ValueError):
    """An experiment configuration is structurally invalid."""


@dataclass(frozen=True)
class SyntheticSpec:
    """Isotropic Gaussian class clusters with unit within-class sigma.

    Class signal lives in the first ``dim`` coordinates; ``nuisance_dim``
    extra coordinates carry class-independent variance ``nuisance_scale``
    and the whole space is mixed by a fixed seeded rotation, so a useful
    embedding must actually be learned rather than read off the inputs.
    With ``nuisance_dim`` 0 the pool is plain separated Gaussians.
    """

    num_classes: int = 25
    dim: int = 16
    per_class: int = 40
    separation: float = 6.0
    nuisance_dim: int = 0
    nuisance_scale: float = 3.0
    imbalance: float = 0.0
    outlier_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2 or self.per_class < 2:
            raise ConfigError("need num_classes >= 2 and per_class >= 2")
        if self.dim < 1 or self.nuisance_dim < 0:
            raise ConfigError("dim must be >= 1 and nuisance_dim >= 0")
        if self.separation < 0:
            raise ConfigError("separation must be >= 0")
        if not (0.0 <= self.imbalance < 1.0):
            raise ConfigError("imbalance must be in [0, 1)")
        if not (0.0 <= self.outlier_fraction < 1.0):
            raise ConfigError("outlier_fraction must be in [0, 1)")

    @property
    def total_dim(self) -> int:
        return self.dim + self.nuisance_dim

    def class_counts(self) -> np.ndarray:
        """Samples per class: balanced, or a linear ramp from
        per_class*(1-imbalance) up to per_class*(1+imbalance)."""
        if self.imbalance == 0.0:
            return np.full(self.num_classes, self.per_class, dtype=np.int64)
        lo = self.per_class * (1.0 - self.imbalance)
        hi = self.per_class * (1.0 + self.imbalance)
        counts = np.rint(np.linspace(lo, hi, self.num_classes)).astype(np.int64)
        return np.maximum(counts, 2)


@dataclass(frozen=True)
class EpisodeSpec:
    way: int = 5
    shot: int = 1
    query_per_class: int = 10
    n_eval_episodes: int = 40
    adapt: bool = True


@dataclass(frozen=True)
class TrainerSpec:
    alpha: float = 0.05
    eta: float = 0.05
    inner_steps: int = 5
    meta_batch: int = 4
    epochs: int = 300
    mode: str = "second_order"
    scaler_enabled: bool = False
    clip_norm: float | None = None
    hidden: tuple = (64, 64)


@dataclass(frozen=True)
class WctSpec:
    lr: float = 0.1
    batch_size: int = 32
    epochs: int = 1500


@dataclass(frozen=True)
class UnsupSpec:
    samples_per_task: int = 120
    samples_per_task_min: int = 0
    support_fraction: float = 0.5
    num_groups: int = 1
    c_max: int = 6
    kmeans_k: int = 5
    noisy_task_fraction: float = 0.0
    noisy_task_level: float = 0.6
    pretrain_epochs: int = 400
    pretrain_lr: float = 0.01
    auto_eps: bool = True
    auto_eps_scale: float = 0.8
    group_policy: str = "by_way"


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str = "noise_table"
    dataset: SyntheticSpec = field(default_factory=lambda: SyntheticSpec(
        num_classes=30, dim=8, per_class=25, separation=6.0,
        nuisance_dim=24, nuisance_scale=3.0,
    ))
    episodes: EpisodeSpec = field(default_factory=EpisodeSpec)
    trainer: TrainerSpec = field(default_factory=TrainerSpec)
    wct: WctSpec = field(default_factory=WctSpec)
    dbscan: DbscanParams = field(default_factory=lambda: DbscanParams(eps=1.0, min_samples=15))
    unsup: UnsupSpec = field(default_factory=UnsupSpec)
    methods: tuple = ("wct", "maml")
    noise_levels: tuple = (0.0, 0.3)
    entropy_points: int = 8
    entropy_lo: float = 0.75
    entropy_hi: float = 1.0
    ways: tuple = (2, 3, 4)
    seeds: tuple = (0,)
    trace_stability: bool = False
    trace_every: int = 0
    trace_noise: float = 0.15
    eval_way: int | None = None
    eval_shot: int | None = None
    fixed_H_nats: float | None = None
    output: str | None = None

    def __post_init__(self):
        if self.kind not in EXPERIMENT_KINDS:
            raise ConfigError(f"kind must be one of {EXPERIMENT_KINDS}, got {self.kind!r}")
        if not self.seeds:
            raise ConfigError("need at least one seed")
        if self.kind == "noise_table" and not self.noise_levels:
            raise ConfigError("noise_table needs noise levels")
        if self.kind == "entropy_curve" and self.entropy_points < 2:
            raise ConfigError("entropy_curve needs >= 2 grid points")
        if not (0.0 <= self.entropy_lo < self.entropy_hi <= 1.0):
            raise ConfigError("need 0 <= entropy_lo < entropy_hi <= 1")


# -- config (de)serialization -------------------------------------------------


_SUBSPECS = {
    "dataset": SyntheticSpec,
    "episodes": EpisodeSpec,
    "trainer": TrainerSpec,
    "wct": WctSpec,
    "dbscan": DbscanParams,
    "unsup": UnsupSpec,
}

_TUPLE_FIELDS = {"methods", "noise_levels", "ways", "seeds", "hidden"}


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    kwargs = {}
    for key, value in data.items():
        if key in _SUBSPECS:
            if not isinstance(value, dict):
                raise ConfigError(f"{key} must be an object")
            sub = dict(value)
            for k, v in sub.items():
                if k in _TUPLE_FIELDS and isinstance(v, list):
                    sub[k] = tuple(v)
            try:
                kwargs[key] = _SUBSPECS[key](**sub)
            except TypeError as exc:
                raise ConfigError(f"bad field in {key}: {exc}") from None
        elif key in _TUPLE_FIELDS and isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return ExperimentConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad config field: {exc}") from None


def config_to_dict(config: ExperimentConfig) -> dict:
    return asdict(config)


def apply_overrides(data: dict, overrides: dict) -> dict:
    """Apply ``{"trainer.alpha": 0.1}``-style dotted-path overrides to a config dict."""
    out = json.loads(json.dumps(data))  # deep copy, JSON-typed
    for path, value in overrides.items():
        node = out
        parts = path.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override path {path!r} crosses a non-object")
        node[parts[-1]] = value
    return out


def config_hash(config: ExperimentConfig) -> str:
    payload = json.dumps(config_to_dict(config), sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


# -- synthetic data -----------------------------------------------------------


def gen_synthetic(spec: SyntheticSpec) -> tuple:
    """Pool of isotropic unit-sigma Gaussian clusters, centroid spacing >= separation."""
    rng = np.random.default_rng(spec.seed)
    for _ in range(50):
        raw = rng.normal(size=(spec.num_classes, spec.dim))
        diffs = raw[:, None, :] - raw[None, :, :]
        dists = np.sqrt((diffs**2).sum(axis=2))
        np.fill_diagonal(dists, np.inf)
        min_dist = dists.min()
        if np.isfinite(min_dist) and min_dist > 0:
            centroids = raw * (spec.separation / min_dist) if spec.separation > 0 else raw * 0.0
            break
    else:
        raise ConfigError(
            f"could not place {spec.num_classes} distinct centroids in dim {spec.dim}"
        )
    counts = spec.class_counts()
    X = np.vstack([
        centroids[c] + rng.normal(size=(counts[c], spec.dim))
        for c in range(spec.num_classes)
    ])
    y = np.repeat(np.arange(spec.num_classes), counts)
    if spec.outlier_fraction > 0:
        # unlabeled junk scattered across the signal space (label -1); it
        # pollutes the training pool but never appears in class episodes
        n_out = int(round(spec.outlier_fraction * X.shape[0] / (1 - spec.outlier_fraction)))
        spread = max(1.0, float(np.abs(centroids).max())) * 1.5
        junk = rng.uniform(-spread, spread, size=(n_out, spec.dim))
        X = np.vstack([X, junk])
        y = np.concatenate([y, np.full(n_out, -1, dtype=np.int64)])
    if spec.nuisance_dim > 0:
        noise = spec.nuisance_scale * rng.normal(size=(X.shape[0], spec.nuisance_dim))
        X = np.hstack([X, noise])
        # fixed rotation shared by every class, seeded independently of the
        # sample draws so train and held-out classes see the same mixing
        rot_rng = np.random.default_rng(spec.seed + 104729)
        Q, _ = np.linalg.qr(rot_rng.normal(size=(spec.total_dim, spec.total_dim)))
        X = X @ Q
    return X, y


def split_classes(num_classes: int, seed: int) -> tuple:
    """Deterministic 60/20/20 class-disjoint split (train, val, test)."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(num_classes)
    n_train = max(1, int(round(num_classes * 0.6)))
    n_val = max(1, int(round(num_classes * 0.2)))
    train = np.sort(order[:n_train])
    val = np.sort(order[n_train:n_train + n_val])
    test = np.sort(order[n_train + n_val:])
    if test.size == 0:
        raise ConfigError("class split left no test classes; increase num_classes")
    return train, val, test


def build_labeled_episodes(
    X, y_annot, classes, spec: EpisodeSpec, n_episodes, rng, y_true=None
) -> list[Task]:
    """Fixed-way episodes whose class structure follows the annotation labels.

    Support/query samples for class slot j are drawn from the points the
    annotation assigns to the j-th drawn class, so corrupted annotations
    produce honestly noisy episodes.  True labels ride along for scoring.
    """
    classes = np.asarray(classes)
    if classes.size < spec.way:
        raise ConfigError(f"need >= {spec.way} classes, got {classes.size}")
    need = spec.shot + spec.query_per_class
    episodes = []
    for _ in range(n_episodes):
        chosen = rng.choice(classes, size=spec.way, replace=False)
        sup_x, sup_y, qry_x, qry_y, sup_t, qry_t = [], [], [], [], [], []
        for slot, cls in enumerate(chosen):
            members = np.flatnonzero(y_annot == cls)
            if members.size < need:
                raise ConfigError(
                    f"class {cls} has {members.size} annotated samples, episode needs {need}"
                )
            pick = rng.choice(members, size=need, replace=False)
            sup_x.append(X[pick[:spec.shot]])
            qry_x.append(X[pick[spec.shot:]])
            sup_y.extend([slot] * spec.shot)
            qry_y.extend([slot] * spec.query_per_class)
            if y_true is not None:
                sup_t.extend(y_true[pick[:spec.shot]])
                qry_t.extend(y_true[pick[spec.shot:]])
        remap = None
        if y_true is not None:
            # relabel true ids to the episode's slot space where possible
            remap = {int(c): slot for slot, c in enumerate(chosen)}
            sup_t = [remap.get(int(t), spec.way) for t in sup_t]
            qry_t = [remap.get(int(t), spec.way) for t in qry_t]
        episodes.append(Task(
            support_x=np.vstack(sup_x),
            support_y=np.array(sup_y, dtype=np.int64),
            query_x=np.vstack(qry_x),
            query_y=np.array(qry_y, dtype=np.int64),
            way=spec.way,
            support_true=None if y_true is None else np.array(sup_t, dtype=np.int64),
            query_true=None if y_true is None else np.array(qry_t, dtype=np.int64),
        ))
    return episodes


# -- method construction ------------------------------------------------------

SUPERVISED_METHODS = ("wct", "mtl", "maml", "fomaml", "anil", "static_head", "dynamic_head")
UNSUPERVISED_METHODS = ("unsup_meta", "unsup_meta_kmeans", "wct_pseudo", "unsup_meta_noscaler")


def _meta_mode(method: str) -> str:
    return {"fomaml": "first_order", "anil": "head_only"}.get(method, "second_order")


def _layer_dims(config: ExperimentConfig) -> tuple:
    return (config.dataset.total_dim, *config.trainer.hidden)


def _train_supervised(
    method, config, X_train, y_annot_local, n_train_classes, seed, probe, trace_every
):
    """Train one supervised-analog method on the annotated training pool."""
    tr = config.trainer
    rng = np.random.default_rng(seed + 1)
    if method == "wct":
        model = WholeClassTrainer(
            layer_dims=_layer_dims(config), n_classes=n_train_classes,
            lr=config.wct.lr, batch_size=config.wct.batch_size,
            epochs=config.wct.epochs, seed=seed,
        )
        model.fit(X_train, y_annot_local, probe=probe, trace_every=trace_every)
        return model
    episode_spec = config.episodes
    train_classes = np.arange(n_train_classes)

    def source(task_rng, params):
        return build_labeled_episodes(
            X_train, y_annot_local, train_classes,
            episode_spec, tr.meta_batch, task_rng,
        )

    if method == "mtl":
        tasks = build_labeled_episodes(
            X_train, y_annot_local, train_classes, episode_spec,
            max(tr.epochs // 4, 8), rng,
        )
        model = MultiTaskTrainer(
            layer_dims=_layer_dims(config), lr=tr.alpha,
            meta_batch=tr.meta_batch, epochs=tr.epochs, seed=seed,
        )
        model.fit(tasks)
        return model
    model = MetaLearner(
        layer_dims=_layer_dims(config), num_groups=1,
        c_max=max(episode_spec.way, config.eval_way or 2),
        alpha=tr.alpha, eta=tr.eta, inner_steps=tr.inner_steps,
        meta_batch=tr.meta_batch, epochs=tr.epochs, mode=_meta_mode(method),
        scaler_enabled=tr.scaler_enabled, clip_norm=tr.clip_norm, seed=seed,
    )
    model.fit(source, probe=probe, trace_every=trace_every)
    return model


def _corrupt_tasks(tasks, unsup: UnsupSpec, rng) -> list:
    """Heavily corrupt the pseudo labels of a random fraction of tasks."""
    if unsup.noisy_task_fraction <= 0.0:
        return tasks
    out = []
    for task in tasks:
        if rng.random() < unsup.noisy_task_fraction:
            level = min(unsup.noisy_task_level, (task.way - 1) / task.way)
            m_s, m_q = len(task.support_y), len(task.query_y)
            b_s = EntropyBudget(m_s, task.way, entropy_for_noise(level, m_s, task.way))
            b_q = EntropyBudget(m_q, task.way, entropy_for_noise(level, m_q, task.way))
            sup_y = corrupt_labels(task.support_y, b_s, int(rng.integers(2**31)))
            qry_y = corrupt_labels(task.query_y, b_q, int(rng.integers(2**31)))
            if set(np.unique(sup_y)) != set(range(task.way)):
                out.append(task)  # corruption emptied a support class; keep original
                continue
            out.append(replace(task, support_y=sup_y, query_y=qry_y))
        else:
            out.append(task)
    return out


def _knn_eps(emb, subsample, k, scale, seed) -> float:
    """Density-derived scan radius: median distance to the k-th neighbour
    on task-sized subsamples of the embedding, times ``scale``."""
    rng = np.random.default_rng(seed + 4242)
    n = emb.shape[0]
    size = min(subsample, n)
    meds = []
    for _ in range(5):
        idx = rng.choice(n, size=size, replace=False)
        E = emb[idx]
        d = np.sqrt(np.maximum(
            ((E[:, None, :] - E[None, :, :]) ** 2).sum(axis=2), 0.0))
        d.sort(axis=1)
        meds.append(np.median(d[:, min(k, size - 1)]))
    return float(scale * np.median(meds))


def _normalize_body_scale(params, X) -> "ModelParams":
    """Rescale the last body layer so head-input features have unit std.

    Relu is positively homogeneous, so dividing the final body weights and
    bias by a constant rescales the embedding exactly; this pins the
    density scale for clustering and keeps inner-loop logits bounded.
    """
    if not params.body:
        return params
    from . import autodiff as ad

    emb = params.head_input(X)
    s = float(emb.std())
    if s <= 0:
        return params
    tensors = params.tensors()
    W, b = tensors[-4], tensors[-3]
    tensors = tensors[:-4] + [
        ad.Tensor(W.value / s, requires_grad=True),
        ad.Tensor(b.value / s, requires_grad=True),
        tensors[-2], tensors[-1],
    ]
    return params.with_tensors(tensors)


def _train_unsupervised(method, config, X_train, seed):
    """Train one unsupervised method on the raw training pool (labels unseen).

    All variants share one reconstruction warm start of the body, so the
    embedding that seeds clustering is identical across ablations; the
    labels never enter.
    """
    tr, unsup = config.trainer, config.unsup
    params = config.dbscan
    c_max = max(unsup.c_max, config.episodes.way)
    num_groups = unsup.num_groups if method in ("unsup_meta", "unsup_meta_noscaler") else 1
    proto = init_model(_layer_dims(config), num_groups, c_max, seed)
    warm = reconstruction_pretrain(
        proto, X_train, lr=unsup.pretrain_lr, epochs=unsup.pretrain_epochs, seed=seed
    )
    warm = _normalize_body_scale(warm, X_train)
    if unsup.auto_eps:
        params = replace(params, eps=_knn_eps(
            warm.head_input(X_train), unsup.samples_per_task,
            params.min_samples, unsup.auto_eps_scale, seed,
        ))

    if method == "wct_pseudo":
        emb = warm.head_input(X_train)
        eps_global = (
            _knn_eps(emb, emb.shape[0], params.min_samples, unsup.auto_eps_scale, seed)
            if unsup.auto_eps else params.eps
        )
        pseudo = np.full(emb.shape[0], -1, dtype=np.int64)
        for factor in (1.0, 0.8, 1.25, 0.6, 1.6):  # bounded eps retry ladder
            pseudo = DBSCAN(
                eps=eps_global * factor, min_samples=params.min_samples
            ).fit_predict(emb)
            keep = pseudo >= 0
            if keep.sum() >= 2 and len(np.unique(pseudo[keep])) >= 2:
                break
        keep = pseudo >= 0
        if keep.sum() < 2 or len(np.unique(pseudo[keep])) < 2:
            raise RuntimeError(
                "global clustering found < 2 clusters; adjust eps/min_samples"
            )
        labels = pseudo[keep].copy()
        if unsup.noisy_task_fraction > 0:
            n_cls = int(labels.max()) + 1
            level = min(
                unsup.noisy_task_fraction * unsup.noisy_task_level,
                (n_cls - 1) / n_cls,
            )
            if level > 0 and n_cls >= 2:
                budget = EntropyBudget(
                    labels.size, n_cls, entropy_for_noise(level, labels.size, n_cls)
                )
                labels = corrupt_labels(labels, budget, seed + 77)
        model = WholeClassTrainer(
            layer_dims=_layer_dims(config), n_classes=int(labels.max()) + 1,
            lr=config.wct.lr, batch_size=config.wct.batch_size,
            epochs=config.wct.epochs, seed=seed,
        )
        model.fit(X_train[keep], labels)
        return model

    noise_rng = np.random.default_rng(seed + 77)
    # clustering always embeds through the fixed pretrained body, so the
    # density scale stays calibrated while the trained body drifts
    if method == "unsup_meta_kmeans":
        spt_lo_km = unsup.samples_per_task_min or unsup.samples_per_task

        def source(task_rng, model_params):
            tasks = []
            for _ in range(tr.meta_batch):
                spt = int(task_rng.integers(spt_lo_km, unsup.samples_per_task + 1))
                idx = task_rng.choice(X_train.shape[0], size=spt, replace=False)
                emb = warm.head_input(X_train[idx])
                labels = KMeans(
                    n_clusters=unsup.kmeans_k, seed=int(task_rng.integers(2**31))
                ).fit_predict(emb)
                half = []
                sup_rows, qry_rows, sup_y, qry_y = [], [], [], []
                ok = True
                for c in range(unsup.kmeans_k):
                    members = np.flatnonzero(labels == c)
                    if members.size < 2:
                        ok = False
                        break
                    members = members[task_rng.permutation(members.size)]
                    n_sup = max(1, int(round(unsup.support_fraction * members.size)))
                    n_sup = min(members.size - 1, n_sup)
                    sup_rows.extend(members[:n_sup])
                    qry_rows.extend(members[n_sup:])
                    sup_y.extend([c] * n_sup)
                    qry_y.extend([c] * (members.size - n_sup))
                if not ok:
                    continue
                tasks.append(Task(
                    support_x=X_train[idx][sup_rows],
                    support_y=np.array(sup_y, dtype=np.int64),
                    query_x=X_train[idx][qry_rows],
                    query_y=np.array(qry_y, dtype=np.int64),
                    way=unsup.kmeans_k,
                ))
            if not tasks:
                raise RuntimeError("kmeans task construction produced no usable task")
            return _corrupt_tasks(tasks, unsup, noise_rng)

        model = MetaLearner(
            layer_dims=_layer_dims(config), num_groups=1, c_max=c_max,
            alpha=tr.alpha, eta=tr.eta, inner_steps=tr.inner_steps,
            meta_batch=tr.meta_batch, epochs=tr.epochs, mode=_meta_mode(method),
            scaler_enabled=True, clip_norm=tr.clip_norm, seed=seed,
        )
        model.fit(source, init_params=warm)
        return model

    scaler_on = method != "unsup_meta_noscaler"

    spt_lo = unsup.samples_per_task_min or unsup.samples_per_task

    def source(task_rng, model_params):
        tasks = []
        for _ in range(tr.meta_batch):
            spt = int(task_rng.integers(spt_lo, unsup.samples_per_task + 1))
            tasks.extend(construct_pseudo_tasks(
                X_train,
                embed=warm.head_input,
                num_tasks=1,
                samples_per_task=spt,
                support_fraction=unsup.support_fraction,
                params=params,
                seed=int(task_rng.integers(2**31)),
                max_way=c_max,
            ))
        return _corrupt_tasks(tasks, unsup, noise_rng)

    model = MetaLearner(
        layer_dims=_layer_dims(config), num_groups=num_groups, c_max=c_max,
        alpha=tr.alpha, eta=tr.eta, inner_steps=tr.inner_steps,
        meta_batch=tr.meta_batch, epochs=tr.epochs, mode=_meta_mode(method),
        scaler_enabled=scaler_on, clip_norm=tr.clip_norm,
        group_policy=unsup.group_policy, seed=seed,
    )
    model.fit(source, init_params=warm)
    return model


# -- single cells -------------------------------------------------------------


def _prepare_pool(config: ExperimentConfig, seed: int):
    dataset = replace(config.dataset, seed=seed)
    X, y = gen_synthetic(dataset)
    train_c, val_c, test_c = split_classes(dataset.num_classes, seed)
    train_mask = np.isin(y, train_c)
    test_ok = np.isin(y, test_c)
    assert not np.any(np.isin(y[train_mask], test_c)), "class split leaked"
    # local relabel of training classes to 0..n-1
    lut = {int(c): i for i, c in enumerate(train_c)}
    X_train = X[train_mask]
    y_train_local = np.array([lut[int(c)] for c in y[train_mask]], dtype=np.int64)
    return X, y, X_train, y_train_local, train_c, test_c


def _eval_episodes_for(config, X, y, test_c, seed):
    rng = np.random.default_rng(seed + 5000)
    spec = config.episodes
    if config.eval_way is not None or config.eval_shot is not None:
        spec = replace(
            spec,
            way=config.eval_way or spec.way,
            shot=config.eval_shot or spec.shot,
        )
    return build_labeled_episodes(
        X, y, test_c, spec, spec.n_eval_episodes, rng, y_true=y
    )


def _annotate(y_local, n_classes, noise, seed):
    """Corrupt local training labels at the given expected noise fraction."""
    if noise <= 0.0:
        return y_local.copy(), y_local.size * math.log(n_classes)
    H = entropy_for_noise(noise, y_local.size, n_classes)
    budget = EntropyBudget(y_local.size, n_classes, H)
    return corrupt_labels(y_local, budget, seed + 31), H


def _run_supervised_cell(config, method, noise, seed, trace=False):
    X, y, X_train, y_local, train_c, test_c = _prepare_pool(config, seed)
    if config.fixed_H_nats is not None:
        # one annotation budget shared by every cell: more classes per task
        # dilute it into more label noise (budget domain caps H per way)
        m, way = y_local.size, config.episodes.way
        H_cell = min(config.fixed_H_nats, m * math.log(way))
        noise = noise_probability(EntropyBudget(m, way, H_cell))
    y_annot, H = _annotate(y_local, len(train_c), noise, seed)
    probe, every = None, 0
    if trace:
        probe_rng = np.random.default_rng(seed + 999)
        probe = X_train[probe_rng.choice(len(X_train), size=min(256, len(X_train)), replace=False)]
        every = config.trace_every or max(1, (
            config.wct.epochs if method == "wct" else config.trainer.epochs) // 20)
    model = _train_supervised(
        method, config, X_train, y_annot, len(train_c), seed, probe, every
    )
    episodes = _eval_episodes_for(config, X, y, test_c, seed)
    acc, ci = evaluate_episodes(model, episodes, adapt=config.episodes.adapt)
    traces = getattr(model, "stability_trace_", [])
    return acc, ci, traces


def _run_unsupervised_cell(config, method, seed):
    """Train unsupervised, score across the way grid under both protocols.

    The cell metric is the mean over (way x {few-shot adapted, zero-shot
    cluster-accuracy}) scores: adaptive task construction pays off on way
    coverage, the stability scaler on raw embedding quality, and a single
    protocol would hide one or the other.
    """
    X, y, X_train, y_local, train_c, test_c = _prepare_pool(config, seed)
    # the unlabeled pool also holds any junk samples (label -1); labels of
    # real samples are never consumed here
    unsup_mask = np.isin(y, train_c) | (y == -1)
    model = _train_unsupervised(method, config, X[unsup_mask], seed)
    ways = config.ways or (config.episodes.way,)
    accs = []
    for way in ways:
        for adapt in (True, False):
            spec = replace(config.episodes, way=way, adapt=adapt)
            rng = np.random.default_rng(seed + 5000 + way)
            episodes = build_labeled_episodes(
                X, y, test_c, spec, spec.n_eval_episodes, rng, y_true=y
            )
            acc, _ = evaluate_episodes(model, episodes, adapt=adapt)
            accs.append(acc)
    mean = float(np.mean(accs))
    ci = 1.96 * float(np.std(accs)) / math.sqrt(len(accs))
    return mean, ci, []


def _run_heterogeneous_cell(config, method, seed):
    """Variable-way training: dynamic head (dhm) and single-level multi-task
    (mtl) train once on mixed-way episodes; static-head meta (shm) trains one
    model per way.  Scored as the mean over the eval way grid."""
    X, y, X_train, y_local, train_c, test_c = _prepare_pool(config, seed)
    tr = config.trainer
    train_classes = np.arange(len(train_c))

    def mixed_episodes(task_rng, count):
        tasks = []
        for _ in range(count):
            w = int(task_rng.choice(np.array(config.ways)))
            sp = replace(config.episodes, way=w)
            tasks.extend(build_labeled_episodes(
                X_train, y_local, train_classes, sp, 1, task_rng
            ))
        return tasks

    per_way_models = {}
    if method == "dynamic_head":
        model = MetaLearner(
            layer_dims=_layer_dims(config), num_groups=len(config.ways),
            c_max=max(config.ways), group_policy="by_way",
            alpha=tr.alpha, eta=tr.eta, inner_steps=tr.inner_steps,
            meta_batch=tr.meta_batch, epochs=tr.epochs, mode=tr.mode,
            scaler_enabled=tr.scaler_enabled, clip_norm=tr.clip_norm, seed=seed,
        )
        model.fit(lambda task_rng, params: mixed_episodes(task_rng, tr.meta_batch))
    elif method == "mtl":
        rng = np.random.default_rng(seed + 1)
        tasks = mixed_episodes(rng, max(tr.epochs // 4, 8))
        model = MultiTaskTrainer(
            layer_dims=_layer_dims(config), lr=tr.alpha,
            meta_batch=tr.meta_batch, epochs=tr.epochs, seed=seed,
        )
        model.fit(tasks)
    elif method == "static_head":
        for way in config.ways:
            cfg_w = replace(config, episodes=replace(config.episodes, way=way))
            per_way_models[way] = _train_supervised(
                "maml", cfg_w, X_train, y_local, len(train_c), seed, None, 0
            )
    else:
        raise ConfigError(f"unknown heterogeneous method {method!r}")

    accs = []
    for way in config.ways:
        spec = replace(config.episodes, way=way)
        rng = np.random.default_rng(seed + 5000 + way)
        episodes = build_labeled_episodes(X, y, test_c, spec, spec.n_eval_episodes,
                                          rng, y_true=y)
        scorer = per_way_models.get(way, per_way_models.get(max(config.ways))) \
            if method == "static_head" else model
        acc, _ = evaluate_episodes(scorer, episodes, adapt=spec.adapt)
        accs.append(acc)
    mean = float(np.mean(accs))
    ci = 1.96 * float(np.std(accs)) / math.sqrt(len(accs))
    return mean, ci, []


def _run_bounds_cell(config, seed):
    ds = config.dataset
    ep = config.episodes
    m = ds.per_class * max(1, int(round(ds.num_classes * 0.6)))
    C1 = max(2, int(round(ds.num_classes * 0.6)))
    C2, k = ep.way, max(1, ep.shot)
    rows = []
    H_max = m * math.log(min(C1, C2))
    for H in np.linspace(0.0, H_max, config.entropy_points):
        inp = BoundInputs(m=m, C1=C1, C2=C2, k=k, H=float(H))
        rows.append({
            "H": float(H),
            "wct_bound": wct_bound(inp),
            "meta_bound": meta_bound(inp),
            "ratio": dominant_term_ratio(inp),
            "holds": corollary_check(C1, C2, k).holds,
        })
    return rows


# -- experiment driver --------------------------------------------------------


def _grid_for(config: ExperimentConfig):
    """(grid_name, values, cell_runner) per experiment kind."""
    if config.kind == "noise_table":
        return "noise", list(config.noise_levels), _run_supervised_cell
    if config.kind == "entropy_curve":
        # the H range defaults to the regime where the episodic advantage is
        # claimed to hold (upper quarter of [0, m*ln C]); widen via config
        fractions = np.linspace(config.entropy_lo, config.entropy_hi, config.entropy_points)
        return "H_fraction", [float(f) for f in fractions], _run_supervised_cell
    if config.kind == "heterogeneous":
        return "ways", [",".join(map(str, config.ways))], None
    if config.kind == "ablation":
        return "variant", list(config.methods), None
    if config.kind == "sensitivity_sweep":
        return "cell", ["base"], None
    if config.kind == "bounds_sweep":
        return "H", [], None
    raise ConfigError(f"unhandled kind {config.kind}")


def _noise_for_fraction(config: ExperimentConfig, fraction: float) -> float:
    n_train_classes = max(2, int(round(config.dataset.num_classes * 0.6)))
    m = config.dataset.per_class * n_train_classes
    H = fraction * m * math.log(n_train_classes)
    return noise_probability(EntropyBudget(m, n_train_classes, H))


def run_experiment(config: ExperimentConfig) -> dict:
    """Execute one experiment; returns {"rows": [...], "traces": [...]}.

    Appends one row per (grid value, method, seed).  Failures are caught
    per cell and recorded with ``status=failed``.  When ``config.output``
    is set the rows are also written as CSV (plus a JSON sidecar with the
    resolved config and a ``.trace.csv`` when tracing produced records).
    """
    chash = config_hash(config)
    rows, traces = [], []

    if config.kind == "bounds_sweep":
        for seed in config.seeds:
            started = time.perf_counter()
            for cell in _run_bounds_cell(config, seed):
                for name in ("wct_bound", "meta_bound", "ratio"):
                    rows.append({
                        "kind": config.kind, "method": name, "seed": seed,
                        "grid": "H", "value": repr(cell["H"]),
                        "metric": cell[name], "ci95": 0.0,
                        "status": "ok", "error": "",
                        "wall_clock_s": time.perf_counter() - started,
                        "config_hash": chash,
                    })
        _finalize(config, rows, traces)
        return {"rows": rows, "traces": traces}

    cells = _enumerate_cells(config)
    n_threads = max(1, int(os.environ.get("ENTROMETA_THREADS", "1")))
    if n_threads == 1:
        results = [_run_cell_safely(config, cell, chash) for cell in cells]
    else:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            results = list(pool.map(lambda c: _run_cell_safely(config, c, chash), cells))
    for row, cell_traces in results:
        rows.append(row)
        traces.extend(cell_traces)
    _finalize(config, rows, traces)
    return {"rows": rows, "traces": traces}


def _enumerate_cells(config: ExperimentConfig) -> list:
    cells = []
    if config.kind in ("noise_table", "entropy_curve"):
        name, values, _ = _grid_for(config)
        for value in values:
            for method in config.methods:
                for seed in config.seeds:
                    cells.append((name, value, method, seed))
    elif config.kind == "heterogeneous":
        for method in config.methods:
            for seed in config.seeds:
                cells.append(("ways", ",".join(map(str, config.ways)), method, seed))
    elif config.kind in ("ablation", "sensitivity_sweep"):
        for method in config.methods:
            for seed in config.seeds:
                cells.append(("variant", method, method, seed))
    return cells


def _run_cell_safely(config, cell, chash):
    grid_name, grid_value, method, seed = cell
    started = time.perf_counter()
    status, error, acc, ci, cell_traces = "ok", "", float("nan"), float("nan"), []
    try:
        if config.kind == "noise_table":
            trace = config.trace_stability and float(grid_value) in (0.0, config.trace_noise)
            acc, ci, tr = _run_supervised_cell(config, method, float(grid_value), seed, trace)
            cell_traces = [
                {"method": method, "seed": seed, "grid": grid_name,
                 "value": grid_value, "layer": t.layer, "epoch": t.epoch, "rs": t.rs}
                for t in tr
            ]
        elif config.kind == "entropy_curve":
            noise = _noise_for_fraction(config, float(grid_value))
            acc, ci, _ = _run_supervised_cell(config, method, noise, seed, False)
        elif config.kind == "heterogeneous":
            acc, ci, _ = _run_heterogeneous_cell(config, method, seed)
        elif config.kind in ("ablation", "sensitivity_sweep"):
            if method in UNSUPERVISED_METHODS:
                acc, ci, _ = _run_unsupervised_cell(config, method, seed)
            else:
                acc, ci, _ = _run_supervised_cell(config, method, 0.0, seed, False)
        else:
            raise ConfigError(f"unhandled kind {config.kind}")
    except Exception as exc:  # cell isolation: a failed run becomes a failed row
        status, error = "failed", f"{type(exc).__name__}: {exc}"
    row = {
        "kind": config.kind, "method": method, "seed": seed,
        "grid": grid_name, "value": grid_value,
        "metric": acc, "ci95": ci, "status": status, "error": error,
        "wall_clock_s": time.perf_counter() - started, "config_hash": chash,
    }
    return row, cell_traces


def _finalize(config: ExperimentConfig, rows, traces):
    if config.output:
        write_rows(config.output, rows)
        sidecar = config.output + ".config.json"
        with open(sidecar, "w") as fh:
            json.dump(config_to_dict(config), fh, indent=2, sort_keys=True)
        if traces:
            _write_traces(config.output + ".trace.csv", traces)


def write_rows(path: str, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for row in rows:
            writer.writerow([
                row["kind"], row["method"], row["seed"], row["grid"], row["value"],
                repr(row["metric"]), repr(row["ci95"]), row["status"],
                row["error"], f"{row['wall_clock_s']:.3f}", row["config_hash"],
            ])


def _write_traces(path: str, traces):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "seed", "grid", "value", "layer", "epoch", "rs"])
        for t in traces:
            writer.writerow([
                t["method"], t["seed"], t["grid"], t["value"],
                t["layer"], t["epoch"], repr(t["rs"]),
            ])


def sweep(config: ExperimentConfig, grid: dict) -> dict:
    """Cross-product of dotted-path overrides, one run_experiment per cell.

    ``grid`` maps override paths to value lists, e.g.
    ``{"dbscan.eps": [0.5, 1.0, 2.0], "dbscan.min_samples": [5, 15]}``.
    Rows gain ``sweep:<path>`` annotations in the value column.
    """
    if not grid:
        raise ConfigError("sweep grid is empty")
    paths = sorted(grid)
    for p in paths:
        if not grid[p]:
            raise ConfigError(f"sweep grid for {p!r} is empty")
    base = config_to_dict(config)
    all_rows, all_traces = [], []

    def recurse(i, chosen):
        if i == len(paths):
            overridden = apply_overrides(base, dict(chosen))
            overridden["output"] = None
            sub = config_from_dict(overridden)
            result = run_experiment(sub)
            tag = ";".join(f"{p}={v}" for p, v in chosen)
            for row in result["rows"]:
                row = dict(row)
                row["value"] = f"{row['value']}|{tag}" if tag else row["value"]
                all_rows.append(row)
            all_traces.extend(result["traces"])
            return
        for v in grid[paths[i]]:
            recurse(i + 1, chosen + [(paths[i], v)])

    recurse(0, [])
    _finalize(config, all_rows, all_traces)
    return {"rows": all_rows, "traces": all_traces}
