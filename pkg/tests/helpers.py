"""Shared test utilities: tiny random MLP builders and unrolled meta losses."""

import numpy as np

from entrometa import autodiff as ad


def random_mlp_params(rng, dims):
    """Weight/bias arrays for an MLP with layer widths ``dims`` (in->...->out)."""
    params = []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(d_in)
        params.append(rng.uniform(-bound, bound, size=(d_in, d_out)))
        params.append(rng.uniform(-bound, bound, size=(1, d_out)))
    return params


def mlp_logits(leaves, X):
    """Forward an MLP given interleaved weight/bias leaf tensors."""
    h = ad.Tensor(X)
    n_layers = len(leaves) // 2
    for i in range(n_layers):
        W, b = leaves[2 * i], leaves[2 * i + 1]
        h = ad.add(ad.matmul(h, W), b)
        if i < n_layers - 1:
            h = ad.relu(h)
    return h


def unrolled_meta_loss(leaves, Xs, ys, Xq, yq, alpha, inner_steps, first_order=False):
    """Query loss after ``inner_steps`` unrolled support-gradient updates."""
    params = list(leaves)
    for _ in range(inner_steps):
        inner = ad.softmax_xent(mlp_logits(params, Xs), ys)
        grads = ad.grad(inner, params)
        if first_order:
            grads = [g.detach() for g in grads]
        params = [ad.sub(p, ad.scale(g, alpha)) for p, g in zip(params, grads)]
    return ad.softmax_xent(mlp_logits(params, Xq), yq)
