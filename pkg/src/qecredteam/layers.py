"""GATv2 message passing shared by the decoder and the actor.

For target node ``i`` and source ``j`` (every pair in a complete graph)::

    m_j   = W_t h_j + c
    s_ij  = a . LeakyReLU(W_s h_i + m_j + b)
    alpha = softmax_j(s_ij)
    h'_i  = sum_j alpha_ij m_j

followed by layer norm and ReLU.  The source-projection bias ``c`` matters:
without it every aggregate is a convex combination of ``W_t h_j`` and, when a
graph holds a single event pattern, the row-wise layer norm divides out how
many nodes carry it.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .graphrep import batch_structure


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def add_linear(params: ParamStore, prefix: str, in_dim: int, out_dim: int, rng: np.random.Generator) -> None:
    params.add(f"{prefix}.weight", uniform_init(rng, in_dim, (in_dim, out_dim)))
    params.add(f"{prefix}.bias", uniform_init(rng, in_dim, (out_dim,)))


def linear(params: ParamStore, prefix: str, x: Tensor) -> Tensor:
    return ad.add(ad.matmul(x, params[f"{prefix}.weight"]), params[f"{prefix}.bias"])


def add_gat_layer(params: ParamStore, prefix: str, in_dim: int, out_dim: int, rng: np.random.Generator) -> None:
    params.add(f"{prefix}.w_s", uniform_init(rng, in_dim, (in_dim, out_dim)))
    params.add(f"{prefix}.w_t", uniform_init(rng, in_dim, (in_dim, out_dim)))
    params.add(f"{prefix}.bias", uniform_init(rng, in_dim, (out_dim,)))
    params.add(f"{prefix}.msg_bias", uniform_init(rng, in_dim, (out_dim,)))
    params.add(f"{prefix}.att", uniform_init(rng, out_dim, (out_dim, 1)))
    params.add(f"{prefix}.ln_gain", np.ones(out_dim))
    params.add(f"{prefix}.ln_shift", np.zeros(out_dim))


def gat_layer(
    params: ParamStore,
    prefix: str,
    x: Tensor,
    src: np.ndarray,
    dst: np.ndarray,
    attention: list | None = None,
) -> Tensor:
    """One GATv2 convolution + layer norm + ReLU over a batch of node rows."""
    n_nodes = x.shape[0]
    source = ad.add(ad.matmul(x, params[f"{prefix}.w_t"]), params[f"{prefix}.msg_bias"])
    target = ad.matmul(x, params[f"{prefix}.w_s"])
    pre = ad.add(ad.add(ad.gather_rows(target, dst), ad.gather_rows(source, src)), params[f"{prefix}.bias"])
    scores = ad.matmul(ad.leaky_relu(pre), params[f"{prefix}.att"])
    alpha = ad.segment_softmax(scores, dst, n_nodes)
    if attention is not None:
        attention.append(alpha.data.reshape(-1))
    messages = ad.mul(ad.gather_rows(source, src), alpha)
    out = ad.segment_sum(messages, dst, n_nodes)
    return ad.relu(ad.layer_norm(out, params[f"{prefix}.ln_gain"], params[f"{prefix}.ln_shift"]))


def encode_nodes(
    params: ParamStore,
    features: np.ndarray,
    n_layers: int = 2,
    attention: list | None = None,
) -> tuple[Tensor, np.ndarray]:
    """Run the GATv2 stack on a (B, n, t) feature batch.

    Returns node embeddings of shape (B * n, hidden) and the node -> graph ids.
    """
    n_graphs, n_nodes, t = features.shape
    src, dst, graph_of = batch_structure(n_graphs, n_nodes)
    h = Tensor(features.reshape(n_graphs * n_nodes, t))
    for layer in range(n_layers):
        h = gat_layer(params, f"gat{layer}", h, src, dst, attention)
    return h, graph_of
