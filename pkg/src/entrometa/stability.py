"""SVCCA similarity, per-layer representation stability, and the task scaler.

SVCCA here: center each representation matrix (rows = probe samples),
prune to the smallest leading singular subspace holding the requested
variance fraction, then run CCA between the two pruned subspaces and
average the canonical correlations.  Whitening falls out of the SVD (the
retained left-singular columns are orthonormal), so no ridge term is
needed and exact subspace equality scores exactly 1.

The per-task scaler compares the model's head-input representation after
the last and next-to-last adaptation steps on the task's own query
inputs: noisy pseudo labels keep the representation moving, clean ones
let it settle, so a low score marks a task whose gradient the outer loop
should trust less.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from ._base import check_matrix

__all__ = [
    "ZeroVarianceWarning",
    "StabilityTrace",
    "svcca",
    "representation_stability",
    "meta_scaler",
]


@dataclass(frozen=True)
class StabilityTrace:
    """One similarity reading: layer index, training epoch, rs in [0, 1]."""

    layer: int
    epoch: int
    rs: float

# relative cutoff separating real singular directions from rank-deficiency noise
_RANK_RTOL = 1e-12


class ZeroVarianceWarning(UserWarning):
    """A representation matrix had no variance; similarity defined as 0."""


def _pruned_basis(X: np.ndarray, variance_threshold: float) -> np.ndarray | None:
    """Orthonormal basis of the leading singular subspace, or None if degenerate."""
    Xc = X - X.mean(axis=0, keepdims=True)
    U, s, _ = np.linalg.svd(Xc, full_matrices=False)
    power = s**2
    total = power.sum()
    if total <= 0.0:
        return None
    keep = power > _RANK_RTOL * power[0]
    cum = np.cumsum(power[keep])
    d = int(np.searchsorted(cum, variance_threshold * total - 1e-12 * total) + 1)
    d = min(d, int(keep.sum()))
    return U[:, :d]


def svcca(X, Y, variance_threshold: float = 0.99) -> float:
    """Mean canonical correlation between pruned singular subspaces, in [0, 1].

    Rows of X and Y are paired probe samples; columns are features.  With
    ``variance_threshold`` 1.0 only numerically-zero directions are
    pruned and the score is invariant to invertible linear maps of either
    matrix.  A zero-variance input scores 0 and raises
    :class:`ZeroVarianceWarning`.
    """
    X = check_matrix(X, "X", min_rows=2)
    Y = check_matrix(Y, "Y", min_rows=2)
    if X.shape[0] != Y.shape[0]:
        raise ValueError(f"row counts differ: {X.shape[0]} vs {Y.shape[0]}")
    if not (0.0 < variance_threshold <= 1.0):
        raise ValueError(f"variance_threshold must be in (0, 1], got {variance_threshold}")
    if X.shape == Y.shape and np.array_equal(X, Y):
        # identical representations are perfectly similar by definition;
        # skipping the SVD keeps the self-similarity contract exact
        if not (X - X.mean(axis=0, keepdims=True)).any():
            warnings.warn(
                "zero-variance representation; similarity set to 0", ZeroVarianceWarning
            )
            return 0.0
        return 1.0
    Ux = _pruned_basis(X, variance_threshold)
    Uy = _pruned_basis(Y, variance_threshold)
    if Ux is None or Uy is None:
        warnings.warn("zero-variance representation; similarity set to 0", ZeroVarianceWarning)
        return 0.0
    corr = np.linalg.svd(Ux.T @ Uy, compute_uv=False)
    return float(np.clip(corr, 0.0, 1.0).mean())


def representation_stability(
    model_t,
    model_prev,
    probe: np.ndarray,
    layer: int,
    variance_threshold: float = 0.99,
) -> float:
    """SVCCA similarity of one layer's activations between two model states.

    Models must expose ``layer_output(X, index)`` and ``num_layers`` (the
    trainers' parameter containers do); the probe batch must be the same
    fixed set of samples across a whole training run for the per-epoch
    trace to be meaningful.
    """
    probe = check_matrix(probe, "probe", min_rows=2)
    for m in (model_t, model_prev):
        if not (0 <= layer < m.num_layers):
            raise ValueError(f"layer {layer} out of range [0, {m.num_layers})")
    return svcca(
        model_t.layer_output(probe, layer),
        model_prev.layer_output(probe, layer),
        variance_threshold,
    )


def meta_scaler(
    adapted_final,
    adapted_prev,
    query_x: np.ndarray,
    variance_threshold: float = 0.99,
) -> float:
    """Stability weight for one task's outer-loop loss, in [0, 1].

    Compares the head-input representation of the final and penultimate
    adaptation states on the task's query inputs.  With no previous state
    (single inner step, or no adaptation at all) there is no evidence of
    instability and the weight is 1.
    """
    if adapted_prev is None:
        return 1.0
    query_x = check_matrix(query_x, "query_x", min_rows=2)
    a = adapted_final.head_input(query_x)
    b = adapted_prev.head_input(query_x)
    if np.array_equal(a, b):
        return 1.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ZeroVarianceWarning)
        return svcca(a, b, variance_threshold)
