"""User embedding tables from the social graph and the temporal diffusion hypergraphs.

Both tables have ``N + 1`` rows; the extra last row is the MASK token used by
sequence augmentation and is passed through untouched by both encoders.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .data import DiffusionHypergraphs, SocialGraph
from .tensor import Tensor, broadcast_to, concat, relu, sigmoid, spmm


@dataclass
class GraphContext:
    """Precomputed constant matrices for one dataset split."""
    num_users: int
    adj_norm: object                 # scipy sparse N x N
    intervals: list[tuple]           # (edge_mean, node_mean, active) per nonempty interval

    @classmethod
    def build(cls, graph: SocialGraph, hypergraphs: DiffusionHypergraphs) -> "GraphContext":
        mats = []
        for t, iv in enumerate(hypergraphs.intervals):
            if iv.hyperedges:
                mats.append(hypergraphs.propagation_matrices(t))
        return cls(num_users=graph.num_users, adj_norm=graph.normalized_adjacency(), intervals=mats)


def init_user_rep(num_users: int, dim: int, rng: np.random.Generator, gcn_layers: int = 2,
                  hgnn_layers: int = 1, shared_embedding: bool = True,
                  init_std: float = 0.1) -> dict[str, np.ndarray]:
    scale = 1.0 / np.sqrt(dim)
    p = {"embedding": rng.normal(0.0, init_std, size=(num_users + 1, dim))}
    if not shared_embedding:
        p["embedding_diffusion"] = rng.normal(0.0, init_std, size=(num_users + 1, dim))
    for layer in range(gcn_layers):
        p[f"gcn_W{layer}"] = rng.normal(0.0, scale, size=(dim, dim))
        p[f"gcn_b{layer}"] = np.zeros(dim)
    for layer in range(hgnn_layers):
        p[f"hgnn_Wu{layer}"] = rng.normal(0.0, scale, size=(dim, dim))
        p[f"hgnn_We{layer}"] = rng.normal(0.0, scale, size=(dim, dim))
    p["gate_w"] = rng.normal(0.0, scale, size=(2 * dim, 1))
    p["gate_b"] = np.zeros(1)
    return p


def _layer_count(p: Mapping[str, Tensor], prefix: str) -> int:
    n = 0
    while f"{prefix}{n}" in p:
        n += 1
    return n


def encode_social(adj_norm, x0: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    """Stacked GCN: ReLU(Â X W + b) per layer, last layer linear."""
    n, d = x0.shape
    x = x0
    layers = _layer_count(p, "gcn_W")
    for layer in range(layers):
        b = broadcast_to(p[f"gcn_b{layer}"], (n, d))
        x = spmm(adj_norm, x) @ p[f"gcn_W{layer}"] + b
        if layer < layers - 1:
            x = relu(x)
    return x


def hgnn_layer(edge_mean, node_mean, x: Tensor, w_u: Tensor, w_e: Tensor) -> Tensor:
    """Node -> hyperedge mean (through W_u) then hyperedge -> node mean (through W_e)."""
    messages = relu(spmm(edge_mean, x) @ w_u)
    return relu(spmm(node_mean, messages) @ w_e)


def gated_fusion(x_prev: Tensor, x_new: Tensor, active: np.ndarray, p: Mapping[str, Tensor]) -> Tensor:
    """Scalar sigmoid gate per user; inactive users keep ``x_prev`` exactly."""
    n, d = x_prev.shape
    g = sigmoid(concat([x_prev, x_new], axis=1) @ p["gate_w"] + broadcast_to(p["gate_b"], (n, 1)))
    g = broadcast_to(g, (n, d))
    fused = g * x_prev + (1.0 - g) * x_new
    act = Tensor(np.repeat(active[:, None], d, axis=1))
    return x_prev + act * (fused - x_prev)


def encode_diffusion(intervals, x0: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    layers = _layer_count(p, "hgnn_Wu")
    x = x0
    for edge_mean, node_mean, active in intervals:
        h = x
        for layer in range(layers):
            h = hgnn_layer(edge_mean, node_mean, h, p[f"hgnn_Wu{layer}"], p[f"hgnn_We{layer}"])
        x = gated_fusion(x, h, active, p)
    return x


def user_embeddings(ctx: GraphContext, p: Mapping[str, Tensor]) -> tuple[Tensor, Tensor]:
    """Return ``(X_S, X_D)``, each ``(N + 1) x d`` with the MASK row last."""
    n = ctx.num_users
    emb = p["embedding"]
    emb_d = p.get("embedding_diffusion", emb)
    xs = encode_social(ctx.adj_norm, emb[0:n], p)
    xd = encode_diffusion(ctx.intervals, emb_d[0:n], p)
    return concat([xs, emb[n:n + 1]], axis=0), concat([xd, emb_d[n:n + 1]], axis=0)
