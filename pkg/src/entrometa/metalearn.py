"""Bi-level episodic training with a grouped dynamic head, and its baselines.

The meta-model is an MLP body shared across tasks plus one wide head whose
columns are partitioned into groups; a c-way task trains columns
``[group*c_max, group*c_max + c)`` only, so episodes with different class
counts coexist on one parameter set.  Inner adaptation unrolls plain SGD
steps as graph nodes, which keeps the outer gradient exact through the
inner loop (second-order); first-order and head-only variants sever or
restrict that path.  Each task's query loss enters the outer sum weighted
by a stability scaler computed from its own adaptation trajectory.

Baselines: :class:`WholeClassTrainer` (single-level training over all
classes at once, episodic evaluation through a logistic probe on its
embedding) and :class:`MultiTaskTrainer` (shared body, one fixed head per
task, single-level updates).
"""

from __future__ import annotations

import itertools
import math
import struct
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from ._base import BaseEstimator, check_labels, check_matrix
from .stability import StabilityTrace, meta_scaler, representation_stability
from .tasks import Task

__all__ = [
    "TrainConfig",
    "ModelParams",
    "TrainingDivergedError",
    "CheckpointError",
    "init_model",
    "dynamic_head_view",
    "inner_adapt",
    "query_loss",
    "meta_gradients",
    "meta_step",
    "MetaLearner",
    "WholeClassTrainer",
    "MultiTaskTrainer",
    "reconstruction_pretrain",
    "evaluate_episodes",
    "save_checkpoint",
    "load_checkpoint",
]

MODES = ("second_order", "first_order", "head_only")

CHECKPOINT_MAGIC = b"EMCK"
CHECKPOINT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    """A loss went non-finite during training."""


class CheckpointError(ValueError):
    """A checkpoint file is malformed or inconsistent with the model config."""


@dataclass(frozen=True)
class TrainConfig:
    """Bi-level training knobs; defaults follow the reference configuration.

    ``alpha``/``eta`` of zero are allowed for the degenerate identity
    cases (they make the corresponding update a no-op).
    """

    alpha: float = 0.05
    eta: float = 0.001
    inner_steps: int = 5
    meta_batch: int = 8
    epochs: int = 30_000
    mode: str = "second_order"
    scaler_enabled: bool = True
    variance_threshold: float = 0.99
    clip_norm: float | None = None
    group_policy: str = "random"
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0 or self.eta < 0:
            raise ValueError("learning rates must be non-negative")
        if self.inner_steps < 1:
            raise ValueError(f"inner_steps must be >= 1, got {self.inner_steps}")
        if self.meta_batch < 1:
            raise ValueError(f"meta_batch must be >= 1, got {self.meta_batch}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError(f"clip_norm must be positive, got {self.clip_norm}")
        if self.group_policy not in ("random", "by_way"):
            raise ValueError(f"group_policy must be random or by_way, got {self.group_policy!r}")


@dataclass
class ModelParams:
    """Body weight/bias tensors plus one grouped head; immutable by convention.

    Also serves as a numpy-side forward for stability probes: layer index
    0..len(body)-1 gives the relu output of that body layer, index
    len(body) gives the full-width head logits.
    """

    body: list
    head_w: ad.Tensor
    head_b: ad.Tensor
    layer_dims: tuple
    num_groups: int
    c_max: int

    @property
    def num_layers(self) -> int:
        return len(self.body) + 1

    def tensors(self) -> list:
        flat = [t for pair in self.body for t in pair]
        return flat + [self.head_w, self.head_b]

    def _body_values(self, X: np.ndarray) -> list:
        outs = []
        h = X
        for W, b in self.body:
            h = np.maximum(h @ W.value + b.value, 0.0)
            outs.append(h)
        return outs

    def layer_output(self, X: np.ndarray, layer: int) -> np.ndarray:
        X = check_matrix(X, "X")
        if not (0 <= layer < self.num_layers):
            raise ValueError(f"layer {layer} out of range [0, {self.num_layers})")
        outs = self._body_values(X)
        if layer < len(self.body):
            return outs[layer]
        h = outs[-1] if outs else X
        return h @ self.head_w.value + self.head_b.value

    def head_input(self, X: np.ndarray) -> np.ndarray:
        X = check_matrix(X, "X")
        outs = self._body_values(X)
        return outs[-1] if outs else X

    def body_node(self, X: np.ndarray) -> ad.Tensor:
        h = ad.Tensor(X)
        for W, b in self.body:
            h = ad.relu(ad.add(ad.matmul(h, W), b))
        return h

    def with_tensors(self, tensors: Sequence[ad.Tensor]) -> "ModelParams":
        body = [(tensors[2 * i], tensors[2 * i + 1]) for i in range(len(self.body))]
        return ModelParams(
            body=body,
            head_w=tensors[-2],
            head_b=tensors[-1],
            layer_dims=self.layer_dims,
            num_groups=self.num_groups,
            c_max=self.c_max,
        )


def init_model(layer_dims, num_groups: int, c_max: int, seed: int) -> ModelParams:
    """Fan-in-scaled uniform init; head width is num_groups * c_max.

    ``layer_dims`` is (input_dim, hidden widths...); with no hidden widths
    the head sits directly on the inputs.
    """
    dims = tuple(int(d) for d in layer_dims)
    if not dims or any(d < 1 for d in dims):
        raise ValueError(f"layer_dims must be positive, got {layer_dims}")
    if num_groups < 1 or c_max < 1:
        raise ValueError(f"need num_groups >= 1 and c_max >= 1, got {num_groups}, {c_max}")
    rng = np.random.default_rng(seed)

    def pair(d_in, d_out):
        bound = 1.0 / np.sqrt(d_in)
        W = ad.Tensor(rng.uniform(-bound, bound, size=(d_in, d_out)), requires_grad=True)
        b = ad.Tensor(rng.uniform(-bound, bound, size=(1, d_out)), requires_grad=True)
        return W, b

    body = [pair(dims[i], dims[i + 1]) for i in range(len(dims) - 1)]
    head_w, head_b = pair(dims[-1], num_groups * c_max)
    return ModelParams(
        body=body, head_w=head_w, head_b=head_b,
        layer_dims=dims, num_groups=num_groups, c_max=c_max,
    )


def dynamic_head_view(params: ModelParams, c: int, group_id: int) -> Callable:
    """Logits function restricted to the c columns of one head group.

    Gradients flow only into the selected columns and the shared body;
    the other head columns stay untouched bitwise through updates.
    """
    if not (2 <= c <= params.c_max):
        raise ValueError(f"way c={c} outside [2, c_max={params.c_max}]")
    if not (0 <= group_id < params.num_groups):
        raise ValueError(f"group_id {group_id} outside [0, {params.num_groups})")
    start = group_id * params.c_max

    def logits(X: np.ndarray) -> ad.Tensor:
        h = params.body_node(np.asarray(X, dtype=np.float64))
        full = ad.add(ad.matmul(h, params.head_w), params.head_b)
        return ad.slice_cols(full, start, start + c)

    return logits


def _task_loss(params: ModelParams, X, y, c: int, group_id: int) -> ad.Tensor:
    return ad.softmax_xent(dynamic_head_view(params, c, group_id)(X), y)


def inner_adapt(
    params: ModelParams, task: Task, config: TrainConfig, group_id: int = 0
) -> tuple:
    """Unrolled SGD adaptation on the support set; returns (adapted, trajectory).

    The trajectory holds the state after every step (initial state first)
    for the stability scaler.  second_order keeps the update nodes
    differentiable; first_order detaches the inner gradients; head_only
    updates only the head columns (the body adapts in the outer loop only).
    """
    trajectory = [params]
    current = params
    for step in range(config.inner_steps):
        loss = _task_loss(current, task.support_x, task.support_y, task.way, group_id)
        if not np.isfinite(loss.value):
            raise TrainingDivergedError(
                f"non-finite support loss at inner step {step} (way={task.way}, "
                f"group={group_id}, alpha={config.alpha})"
            )
        tensors = current.tensors()
        if config.mode == "head_only":
            trainable = tensors[-2:]
        else:
            trainable = tensors
        grads = ad.grad(loss, trainable)
        if config.mode == "first_order":
            grads = [g.detach() for g in grads]
        updated = {id(t): ad.sub(t, ad.scale(g, config.alpha)) for t, g in zip(trainable, grads)}
        current = current.with_tensors([updated.get(id(t), t) for t in tensors])
        trajectory.append(current)
    return current, trajectory


def query_loss(adapted: ModelParams, task: Task, group_id: int = 0) -> ad.Tensor:
    """Mean cross-entropy of the adapted model on the query set (same group)."""
    if task.query_x.shape[0] == 0:
        raise ValueError("query set is empty")
    return _task_loss(adapted, task.query_x, task.query_y, task.way, group_id)


def _remap_labels(task: Task, perm: np.ndarray) -> Task:
    return replace(
        task,
        support_y=perm[task.support_y],
        query_y=perm[task.query_y],
    )


def _group_for(meta: ModelParams, config: TrainConfig, way: int, rng) -> int:
    """Head group for a task: drawn uniformly, or indexed by the task's way
    (way w -> group w-2, clamped) so each way trains a consistent slice."""
    if meta.num_groups <= 1:
        return 0
    if config.group_policy == "by_way":
        return min(way - 2, meta.num_groups - 1)
    return int(rng.integers(meta.num_groups))


def meta_gradients(
    meta: ModelParams, tasks: Sequence[Task], config: TrainConfig, rng
) -> tuple:
    """Outer gradient of the scaler-weighted query-loss sum over one meta-batch.

    Per task: draw a head group and a cluster-to-output permutation, adapt
    a base model from the shared meta parameters, weight its query loss by
    the stability scaler (a constant in the graph, never differentiated
    through), and accumulate.  Returns (grad arrays aligned with
    ``meta.tensors()``, sigmas, mean unweighted query loss).
    """
    if len(tasks) == 0:
        raise ValueError("meta-batch is empty")
    total = None
    sigmas = []
    loss_acc = 0.0
    for task in tasks:
        group_id = _group_for(meta, config, task.way, rng)
        perm = rng.permutation(task.way) if meta.num_groups > 1 else np.arange(task.way)
        mapped = _remap_labels(task, perm)
        adapted, traj = inner_adapt(meta, mapped, config, group_id)
        if config.scaler_enabled and config.inner_steps >= 2:
            sigma = meta_scaler(
                traj[-1], traj[-2], mapped.query_x, config.variance_threshold
            )
        else:
            sigma = 1.0
        sigmas.append(sigma)
        q = query_loss(adapted, mapped, group_id)
        if not np.isfinite(q.value):
            raise TrainingDivergedError("non-finite query loss in outer step")
        loss_acc += q.item()
        weighted = ad.scale(q, sigma)
        total = weighted if total is None else ad.add(total, weighted)
    grads = [g.value for g in ad.grad(total, meta.tensors())]
    return grads, sigmas, loss_acc / len(tasks)


def meta_step(
    meta: ModelParams, tasks: Sequence[Task], config: TrainConfig, rng
) -> tuple:
    """One outer update: meta <- meta - (eta/n) * grad(sum sigma_i * L_i).

    With ``clip_norm`` set, the stacked outer gradient is rescaled to that
    global norm when it exceeds it (unrolled second-order gradients can
    spike by orders of magnitude on hard meta-batches).
    """
    grads, sigmas, mean_loss = meta_gradients(meta, tasks, config, rng)
    if config.clip_norm is not None:
        total = math.sqrt(sum(float((g ** 2).sum()) for g in grads))
        if total > config.clip_norm:
            scale_by = config.clip_norm / total
            grads = [g * scale_by for g in grads]
    step = config.eta / len(tasks)
    new_tensors = [
        ad.Tensor(t.value - step * g, requires_grad=True)
        for t, g in zip(meta.tensors(), grads)
    ]
    return meta.with_tensors(new_tensors), sigmas, mean_loss


# -- estimators --------------------------------------------------------------


def _predict_from_logits(logits: np.ndarray) -> np.ndarray:
    return logits.argmax(axis=1).astype(np.int64)


def _cluster_queries(emb_q: np.ndarray, way: int) -> np.ndarray:
    """Label-free zero-shot predictions: cluster the query embedding into
    ``way`` groups (scored downstream via optimal assignment)."""
    from .cluster import KMeans

    k = min(way, emb_q.shape[0])
    return KMeans(n_clusters=k, seed=0).fit_predict(emb_q)


def _optimal_label_match(pred: np.ndarray, true: np.ndarray, way: int) -> float:
    """Accuracy under the best prediction->label assignment (way <= 8)."""
    if way > 8:
        raise ValueError("optimal matching supported for way <= 8")
    classes = np.unique(true)
    best = 0.0
    for perm in itertools.permutations(classes.tolist(), min(way, classes.size)):
        mapping = {p: t for p, t in zip(range(way), perm)}
        acc = np.mean([mapping.get(p, -1) == t for p, t in zip(pred, true)])
        best = max(best, float(acc))
    return best


class MetaLearner(BaseEstimator):
    """Episodic bi-level trainer over heterogeneous tasks.

    ``fit`` consumes either a list of tasks (resampled each outer step) or
    a callable ``(rng, model) -> list[Task]`` producing one meta-batch,
    which lets pseudo-task construction track the current embedding.
    Passing ``probe`` with ``trace_every > 0`` records per-layer
    representation-stability traces across outer steps.
    """

    def __init__(
        self,
        layer_dims=(16, 32, 32),
        num_groups: int = 1,
        c_max: int = 5,
        alpha: float = 0.05,
        eta: float = 0.001,
        inner_steps: int = 5,
        meta_batch: int = 8,
        epochs: int = 1000,
        mode: str = "second_order",
        scaler_enabled: bool = True,
        variance_threshold: float = 0.99,
        clip_norm: float | None = None,
        group_policy: str = "random",
        seed: int = 0,
    ):
        self.layer_dims = layer_dims
        self.num_groups = num_groups
        self.c_max = c_max
        self.alpha = alpha
        self.eta = eta
        self.inner_steps = inner_steps
        self.meta_batch = meta_batch
        self.epochs = epochs
        self.mode = mode
        self.scaler_enabled = scaler_enabled
        self.variance_threshold = variance_threshold
        self.clip_norm = clip_norm
        self.group_policy = group_policy
        self.seed = seed

    def _config(self) -> TrainConfig:
        return TrainConfig(
            alpha=self.alpha,
            eta=self.eta,
            inner_steps=self.inner_steps,
            meta_batch=self.meta_batch,
            epochs=self.epochs,
            mode=self.mode,
            scaler_enabled=self.scaler_enabled,
            variance_threshold=self.variance_threshold,
            clip_norm=self.clip_norm,
            group_policy=self.group_policy,
            seed=self.seed,
        )

    def fit(self, task_source, probe: np.ndarray | None = None, trace_every: int = 0,
            init_params: ModelParams | None = None):
        config = self._config()
        rng = np.random.default_rng(self.seed)
        if init_params is not None:
            want = (tuple(self.layer_dims), self.num_groups * self.c_max)
            got = (init_params.layer_dims, init_params.head_w.value.shape[1])
            if want != got:
                raise ValueError(f"init_params architecture {got} != expected {want}")
            params = init_params
        else:
            params = init_model(self.layer_dims, self.num_groups, self.c_max, self.seed)
        self.stability_trace_ = []
        self.sigma_history_ = []
        self.loss_history_ = []
        prev_snapshot = params
        for epoch in range(self.epochs):
            tasks = self._draw_tasks(task_source, rng, params, config.meta_batch)
            params, sigmas, mean_loss = meta_step(params, tasks, config, rng)
            self.sigma_history_.append(sigmas)
            self.loss_history_.append(mean_loss)
            if probe is not None and trace_every > 0 and (epoch + 1) % trace_every == 0:
                for layer in range(params.num_layers):
                    rs = representation_stability(
                        params, prev_snapshot, probe, layer, self.variance_threshold
                    )
                    self.stability_trace_.append(StabilityTrace(layer, epoch + 1, rs))
                prev_snapshot = params
        self.params_ = params
        return self

    @staticmethod
    def _draw_tasks(task_source, rng, params, n):
        if callable(task_source):
            tasks = task_source(rng, params)
        else:
            idx = rng.integers(0, len(task_source), size=n)
            tasks = [task_source[int(i)] for i in idx]
        if len(tasks) == 0:
            raise ValueError("task source produced an empty meta-batch")
        return tasks

    def eval_group(self, way: int) -> int:
        if self.num_groups <= 1:
            return 0
        if self.group_policy == "by_way":
            return min(way - 2, self.num_groups - 1)
        return 0

    def adapt(self, support_x, support_y, way: int, group_id: int = 0) -> ModelParams:
        support_x = check_matrix(support_x, "support_x")
        support_y = check_labels(support_y, support_x.shape[0], "support_y")
        task = Task(
            support_x=support_x, support_y=support_y,
            query_x=support_x[:1], query_y=np.zeros(1, dtype=np.int64), way=way,
        )
        adapted, _ = inner_adapt(self.params_, task, self._config(), group_id)
        return adapted

    def embed(self, X) -> np.ndarray:
        return self.params_.head_input(check_matrix(X, "X"))

    def predict_episode(self, task: Task, adapt: bool = True) -> np.ndarray:
        if not adapt:
            return _cluster_queries(self.embed(task.query_x), task.way)
        group = self.eval_group(task.way)
        params = self.adapt(task.support_x, task.support_y, task.way, group_id=group)
        h = params.head_input(task.query_x)
        start = group * self.c_max
        logits = h @ params.head_w.value[:, start:start + task.way] \
            + params.head_b.value[:, start:start + task.way]
        return _predict_from_logits(logits)


def reconstruction_pretrain(
    params: ModelParams, X, lr: float = 0.01, batch_size: int = 64,
    epochs: int = 300, seed: int = 0,
) -> ModelParams:
    """Warm-start the body by input reconstruction through its output layer.

    Trains body plus a throwaway linear decoder with mean-squared error, so
    the body output concentrates on the high-variance structure of the
    pool; useful before clustering-based task construction, where a random
    body gives density scans nothing to grip.  Head parameters and all
    metadata are kept; only body tensors are replaced.
    """
    X = check_matrix(X, "X")
    if not params.body:
        return params
    rng = np.random.default_rng(seed)
    d_out = params.layer_dims[-1]
    bound = 1.0 / np.sqrt(d_out)
    dec_w = ad.Tensor(rng.uniform(-bound, bound, (d_out, X.shape[1])), requires_grad=True)
    dec_b = ad.Tensor(rng.uniform(-bound, bound, (1, X.shape[1])), requires_grad=True)
    body = [pair for pair in params.body]
    for epoch in range(epochs):
        idx = rng.integers(0, X.shape[0], size=min(batch_size, X.shape[0]))
        batch = X[idx]
        h = ad.Tensor(batch)
        for W, b in body:
            h = ad.relu(ad.add(ad.matmul(h, W), b))
        recon = ad.add(ad.matmul(h, dec_w), dec_b)
        diff = ad.sub(recon, ad.Tensor(batch))
        loss = ad.mean_all(ad.mul(diff, diff))
        if not np.isfinite(loss.value):
            raise TrainingDivergedError(f"non-finite reconstruction loss at epoch {epoch}")
        leaves = [t for pair in body for t in pair] + [dec_w, dec_b]
        grads = ad.grad(loss, leaves)
        new = [ad.Tensor(t.value - lr * g.value, requires_grad=True)
               for t, g in zip(leaves, grads)]
        body = [(new[2 * i], new[2 * i + 1]) for i in range(len(body))]
        dec_w, dec_b = new[-2], new[-1]
    return params.with_tensors([t for pair in body for t in pair]
                               + [params.head_w, params.head_b])


def _sgd_minibatch_fit(params: ModelParams, X, y, lr, batch_size, epochs,
                       rng, probe, trace_every, variance_threshold):
    """Single-level cross-entropy SGD shared by WCT; returns (params, traces)."""
    traces = []
    prev_snapshot = params
    n = X.shape[0]
    for epoch in range(epochs):
        idx = rng.integers(0, n, size=min(batch_size, n))
        h = params.body_node(X[idx])
        logits = ad.add(ad.matmul(h, params.head_w), params.head_b)
        loss = ad.softmax_xent(logits, y[idx])
        if not np.isfinite(loss.value):
            raise TrainingDivergedError(f"non-finite loss at epoch {epoch}")
        grads = ad.grad(loss, params.tensors())
        params = params.with_tensors([
            ad.Tensor(t.value - lr * g.value, requires_grad=True)
            for t, g in zip(params.tensors(), grads)
        ])
        if probe is not None and trace_every > 0 and (epoch + 1) % trace_every == 0:
            for layer in range(params.num_layers):
                rs = representation_stability(
                    params, prev_snapshot, probe, layer, variance_threshold
                )
                traces.append(StabilityTrace(layer, epoch + 1, rs))
            prev_snapshot = params
    return params, traces


def _logistic_probe(emb_s, y_s, emb_q, way, lr=0.5, steps=100):
    """Deterministic logistic-regression head on support embeddings."""
    W = np.zeros((emb_s.shape[1], way))
    b = np.zeros((1, way))
    onehot = np.zeros((emb_s.shape[0], way))
    onehot[np.arange(emb_s.shape[0]), y_s] = 1.0
    n = emb_s.shape[0]
    for _ in range(steps):
        z = emb_s @ W + b
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        gz = (p - onehot) / n
        W -= lr * emb_s.T @ gz
        b -= lr * gz.sum(axis=0, keepdims=True)
    return _predict_from_logits(emb_q @ W + b)


class WholeClassTrainer(BaseEstimator):
    """Single-level supervised training over all classes at once.

    The classifier head is fixed at ``n_classes`` outputs; episodic
    evaluation reuses the body embedding with a logistic head fit on each
    episode's support set (100 steps).
    """

    def __init__(
        self,
        layer_dims=(16, 32, 32),
        n_classes: int = 10,
        lr: float = 0.05,
        batch_size: int = 32,
        epochs: int = 1000,
        variance_threshold: float = 0.99,
        seed: int = 0,
    ):
        self.layer_dims = layer_dims
        self.n_classes = n_classes
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.variance_threshold = variance_threshold
        self.seed = seed

    def fit(self, X, y, probe: np.ndarray | None = None, trace_every: int = 0):
        X = check_matrix(X, "X")
        y = check_labels(y, X.shape[0], "y")
        if y.size and (y.min() < 0 or y.max() >= self.n_classes):
            raise ValueError(f"labels outside [0, {self.n_classes})")
        rng = np.random.default_rng(self.seed)
        params = init_model(self.layer_dims, num_groups=1, c_max=self.n_classes, seed=self.seed)
        params, traces = _sgd_minibatch_fit(
            params, X, y, self.lr, self.batch_size, self.epochs,
            rng, probe, trace_every, self.variance_threshold,
        )
        self.params_ = params
        self.stability_trace_ = traces
        return self

    def embed(self, X) -> np.ndarray:
        return self.params_.head_input(check_matrix(X, "X"))

    def predict(self, X) -> np.ndarray:
        logits = self.params_.layer_output(check_matrix(X, "X"), self.params_.num_layers - 1)
        return _predict_from_logits(logits)

    def predict_episode(self, task: Task, adapt: bool = True) -> np.ndarray:
        emb_q = self.embed(task.query_x)
        if adapt:
            return _logistic_probe(self.embed(task.support_x), task.support_y,
                                   emb_q, task.way)
        return _cluster_queries(emb_q, task.way)


class MultiTaskTrainer(BaseEstimator):
    """Shared body with one fixed head per task, single-level updates.

    Every outer step draws ``meta_batch`` tasks and applies one SGD update
    of the body and each drawn task's own head on its pooled support and
    query samples; no inner/outer split.  Episodic evaluation matches the
    whole-class protocol (logistic probe on the embedding).
    """

    def __init__(
        self,
        layer_dims=(16, 32, 32),
        lr: float = 0.05,
        meta_batch: int = 8,
        epochs: int = 1000,
        seed: int = 0,
    ):
        self.layer_dims = layer_dims
        self.lr = lr
        self.meta_batch = meta_batch
        self.epochs = epochs
        self.seed = seed

    def fit(self, tasks: Sequence[Task]):
        if len(tasks) == 0:
            raise ValueError("need at least one task")
        rng = np.random.default_rng(self.seed)
        body_proto = init_model(self.layer_dims, num_groups=1, c_max=2, seed=self.seed)
        body = body_proto.body
        heads = []
        head_rng = np.random.default_rng(self.seed + 1)
        d = self.layer_dims[-1] if len(self.layer_dims) > 1 else self.layer_dims[0]
        bound = 1.0 / np.sqrt(d)
        for task in tasks:
            heads.append((
                ad.Tensor(head_rng.uniform(-bound, bound, (d, task.way)), requires_grad=True),
                ad.Tensor(head_rng.uniform(-bound, bound, (1, task.way)), requires_grad=True),
            ))
        for _ in range(self.epochs):
            for t_idx in rng.integers(0, len(tasks), size=self.meta_batch):
                task = tasks[int(t_idx)]
                hw, hb = heads[int(t_idx)]
                X = np.vstack([task.support_x, task.query_x])
                y = np.concatenate([task.support_y, task.query_y])
                h = ad.Tensor(X)
                for W, b in body:
                    h = ad.relu(ad.add(ad.matmul(h, W), b))
                loss = ad.softmax_xent(ad.add(ad.matmul(h, hw), hb), y)
                if not np.isfinite(loss.value):
                    raise TrainingDivergedError("non-finite loss in multi-task step")
                leaves = [t for pair in body for t in pair] + [hw, hb]
                grads = ad.grad(loss, leaves)
                new = [ad.Tensor(t.value - self.lr * g.value, requires_grad=True)
                       for t, g in zip(leaves, grads)]
                body = [(new[2 * i], new[2 * i + 1]) for i in range(len(body))]
                heads[int(t_idx)] = (new[-2], new[-1])
        self.params_ = body_proto.with_tensors(
            [t for pair in body for t in pair] + list(body_proto.tensors()[-2:])
        )
        return self

    def embed(self, X) -> np.ndarray:
        return self.params_.head_input(check_matrix(X, "X"))

    def predict_episode(self, task: Task, adapt: bool = True) -> np.ndarray:
        emb_q = self.embed(task.query_x)
        if adapt:
            return _logistic_probe(self.embed(task.support_x), task.support_y,
                                   emb_q, task.way)
        return _cluster_queries(emb_q, task.way)


def evaluate_episodes(model, episodes: Sequence[Task], adapt: bool = True) -> tuple:
    """Mean accuracy and normal-approximation 95% CI over evaluation episodes.

    Episodes must carry true query labels.  With ``adapt`` False the raw
    predictions are matched to true labels by optimal assignment before
    scoring (unsupervised zero-shot protocol); with ``adapt`` True the
    support labels are trusted and accuracy is direct.
    """
    if len(episodes) == 0:
        raise ValueError("no evaluation episodes")
    accs = []
    for task in episodes:
        true = task.query_true if task.query_true is not None else task.query_y
        pred = model.predict_episode(task, adapt=adapt)
        if adapt:
            accs.append(float(np.mean(pred == true)))
        else:
            accs.append(_optimal_label_match(pred, true, task.way))
    accs = np.asarray(accs)
    ci = 1.96 * accs.std(ddof=0) / np.sqrt(len(accs))
    return float(accs.mean()), float(ci)


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(params: ModelParams, path: str):
    """Versioned flat binary: magic, version, tensor count, then per tensor
    rank, dims, and raw little-endian float64 data."""
    tensors = params.tensors()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(tensors)))
        for t in tensors:
            dims = t.value.shape
            fh.write(struct.pack("<I", len(dims)))
            fh.write(struct.pack(f"<{len(dims)}I", *dims))
            fh.write(t.value.astype("<f8").tobytes(order="C"))


def load_checkpoint(path: str, layer_dims, num_groups: int, c_max: int) -> ModelParams:
    """Load and validate a checkpoint against the expected architecture."""
    proto = init_model(layer_dims, num_groups, c_max, seed=0)
    expected = [t.value.shape for t in proto.tensors()]
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise CheckpointError("bad magic; not a model checkpoint")
        version, count = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        if count != len(expected):
            raise CheckpointError(
                f"checkpoint holds {count} tensors, config expects {len(expected)}"
            )
        tensors = []
        for shape in expected:
            (rank,) = struct.unpack("<I", fh.read(4))
            dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
            if tuple(dims) != shape:
                raise CheckpointError(f"tensor shape {dims} does not match config {shape}")
            n = int(np.prod(dims))
            raw = fh.read(8 * n)
            if len(raw) != 8 * n:
                raise CheckpointError("truncated checkpoint")
            tensors.append(
                ad.Tensor(np.frombuffer(raw, dtype="<f8").reshape(dims), requires_grad=True)
            )
        if fh.read(1):
            raise CheckpointError("trailing bytes after last tensor")
    return proto.with_tensors(tensors)
