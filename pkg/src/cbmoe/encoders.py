"""Modality encoders: gated-attention MIL over patch bags, mean-aggregation
message passing with attention pooling over cell graphs.

Attention-weighted sums run over a canonical (lexicographically sorted)
item order, so encoding is exactly permutation invariant at fp64 rather
than merely invariant up to rounding.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .synthcohort import CohortSample, Graph

LEAKY_SLOPE = 0.01


@dataclass
class MILParams:
    V: Tensor       # (d, patch_dim)
    U: Tensor       # (d, patch_dim)
    w: Tensor       # (d, 1)
    proj_W: Tensor  # (d, patch_dim)
    proj_b: Tensor  # (d,)


@dataclass
class GNNLayer:
    W_self: Tensor  # (out, in)
    W_nbr: Tensor   # (out, in)
    b: Tensor       # (out,)


@dataclass
class GNNParams:
    layers: list[GNNLayer]
    pool_V: Tensor   # (d, hidden)
    pool_U: Tensor   # (d, hidden)
    pool_w: Tensor   # (d, 1)
    proj_W: Tensor   # (d, hidden)
    proj_b: Tensor   # (d,)
    dropout: float = 0.0


@dataclass
class EncoderParams:
    d: int
    mil: MILParams
    gnn: GNNParams
    patch_cap: int = 16


def _canonical_order(rows: np.ndarray) -> np.ndarray:
    """Lexicographic row order; fixes the summation order of pooling."""
    return np.lexsort(rows.T[::-1])




def _gated_attention_pool(items: Tensor, V: Tensor, U: Tensor, w: Tensor):
    """softmax_i( w . (tanh(V h_i) * sigmoid(U h_i)) ) weighted sum of h_i."""
    gate = ad.mul(ad.tanh(ad.matmul(items, ad.transpose(V))),
                  ad.sigmoid(ad.matmul(items, ad.transpose(U))))
    scores = ad.matmul(gate, w)                     # (n, 1)
    att = ad.softmax(scores, axis=0)                # (n, 1), sums to 1
    pooled = ad.matmul(ad.transpose(att), items)              # (1, dim)
    return pooled, att


def mil_encode(patches: np.ndarray, params: EncoderParams, *,
               training: bool = False, rng: np.random.Generator | None = None
               ) -> tuple[Tensor, Tensor]:
    """Encode one patch bag to a d-vector; returns (embedding (1,d), attention).

    At training time bags larger than `patch_cap` are subsampled to the cap;
    evaluation always uses the full bag.
    """
    patches = np.asarray(patches, dtype=np.float64)
    if patches.ndim != 2 or patches.shape[0] < 1:
        raise ValueError("patch bag must be a nonempty (n, patch_dim) array")
    if training and params.patch_cap and patches.shape[0] > params.patch_cap:
        if rng is None:
            raise ValueError("training-time patch subsampling needs an rng")
        keep = rng.choice(patches.shape[0], size=params.patch_cap, replace=False)
        patches = patches[np.sort(keep)]
    patches = patches[_canonical_order(patches)]
    h = Tensor(patches)
    pooled, att = _gated_attention_pool(h, params.mil.V, params.mil.U, params.mil.w)
    emb = ad.add(ad.matmul(pooled, ad.transpose(params.mil.proj_W)),
                 ad.reshape(params.mil.proj_b, (1, -1)))
    return emb, att


def _neighbor_operator(n_nodes: int, edges: list[tuple[int, int]]) -> np.ndarray:
    """Row-normalized adjacency; isolated nodes get an all-zero row."""
    A = np.zeros((n_nodes, n_nodes), dtype=np.float64)
    for i, j in edges:
        if not (0 <= i < n_nodes and 0 <= j < n_nodes) or i == j:
            raise ValueError(f"invalid edge ({i}, {j}) for {n_nodes} nodes")
        A[i, j] = 1.0
        A[j, i] = 1.0
    deg = A.sum(axis=1, keepdims=True)
    return A / np.maximum(deg, 1.0)


def graph_encode(graph: Graph, params: EncoderParams, *,
                 training: bool = False, rng: np.random.Generator | None = None
                 ) -> tuple[Tensor, Tensor]:
    """Encode one cell graph to a d-vector; returns (embedding (1,d), attention).

    Per layer: h_v <- LeakyReLU(W_self h_v + W_nbr mean_{u in N(v)} h_u),
    followed by gated-attention pooling over final node states and an
    affine projection to d.
    """
    nodes = np.asarray(graph.nodes, dtype=np.float64)
    if nodes.ndim != 2 or nodes.shape[0] < 1:
        raise ValueError("graph must contain at least one node")
    n = nodes.shape[0]
    for i, j in graph.edges:
        if not (0 <= i < n and 0 <= j < n) or i == j:
            raise ValueError(f"invalid edge ({i}, {j}) for {n} nodes")
    order = _canonical_order(nodes)
    remap = np.empty(len(order), dtype=np.intp)
    remap[order] = np.arange(len(order))
    edges = [(int(remap[i]), int(remap[j])) for i, j in graph.edges]
    A = _neighbor_operator(nodes.shape[0], edges)
    h = Tensor(nodes[order])
    A_t = Tensor(A)
    for li, layer in enumerate(params.gnn.layers):
        nbr = ad.matmul(A_t, h)
        pre = ad.add(ad.add(ad.matmul(h, ad.transpose(layer.W_self)),
                            ad.matmul(nbr, ad.transpose(layer.W_nbr))),
                     ad.reshape(layer.b, (1, -1)))
        h = ad.leaky_relu(pre, LEAKY_SLOPE)
        if training and params.gnn.dropout > 0.0 and li < len(params.gnn.layers) - 1:
            if rng is None:
                raise ValueError("training-time dropout needs an rng")
            keep = (rng.random(h.shape) >= params.gnn.dropout) / (1.0 - params.gnn.dropout)
            h = ad.mul(h, Tensor(keep))
    pooled, att = _gated_attention_pool(h, params.gnn.pool_V, params.gnn.pool_U,
                                        params.gnn.pool_w)
    emb = ad.add(ad.matmul(pooled, ad.transpose(params.gnn.proj_W)),
                 ad.reshape(params.gnn.proj_b, (1, -1)))
    return emb, att


def encode_all(sample: CohortSample, params: EncoderParams, *,
               training: bool = False, rng: np.random.Generator | None = None
               ) -> tuple[Tensor, Tensor]:
    """Encode both modalities of a sample; returns (e_1, e_2), each (1, d)."""
    e1, _ = mil_encode(sample.patches, params, training=training, rng=rng)
    e2, _ = graph_encode(sample.graph, params, training=training, rng=rng)
    return e1, e2


def encode_batch(samples, params: EncoderParams, *,
                 training: bool = False, rng: np.random.Generator | None = None
                 ) -> tuple[Tensor, Tensor]:
    """Stack per-sample embeddings into (N, d) tensors for each modality."""
    e1s, e2s = [], []
    for s in samples:
        e1, e2 = encode_all(s, params, training=training, rng=rng)
        e1s.append(e1)
        e2s.append(e2)
    return ad.concat(e1s, axis=0), ad.concat(e2s, axis=0)
