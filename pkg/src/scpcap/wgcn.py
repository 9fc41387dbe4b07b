"""Concept graphs and the relation-weighted graph convolution over them."""

import enum
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import LayerNorm, Linear, Module

MAX_NODES = 64
NO_EDGE = -1


class RelationTag(enum.IntEnum):
    LEFT = 0
    RIGHT = 1
    SELF = 2


class GraphMode(str, enum.Enum):
    THRESHOLD = "threshold"
    RANDOM = "random"
    ONE_FOR_ALL = "one_for_all"
    MLP = "mlp"


@dataclass(frozen=True)
class ConceptGraph:
    """k concept word ids, a 0/1 adjacency with ones on the diagonal, and a
    relation tag per edge (``NO_EDGE`` where the adjacency is 0)."""

    nodes: tuple
    adjacency: np.ndarray
    tags: np.ndarray

    def __len__(self):
        return len(self.nodes)

    def permuted(self, perm):
        perm = np.asarray(perm)
        return ConceptGraph(tuple(self.nodes[i] for i in perm),
                            self.adjacency[np.ix_(perm, perm)], self.tags[np.ix_(perm, perm)])


def _check_nodes(concepts):
    if len(concepts) == 0:
        raise ValueError("concept list is empty")
    if len(concepts) > MAX_NODES:
        raise ValueError(f"at most {MAX_NODES} concepts per graph, got {len(concepts)}")


def build_adjacency(concepts, lexicon):
    """Connect concepts i != j when either ordered pair is in the lexicon.

    From node i's side, j is RIGHT when (g_i, g_j) is a lexicon pair and LEFT
    when only (g_j, g_i) is. With both directions present the higher PMI wins,
    RIGHT on an exact tie.
    """
    _check_nodes(concepts)
    k = len(concepts)
    adj = np.eye(k, dtype=np.int64)
    tags = np.full((k, k), NO_EDGE, dtype=np.int64)
    np.fill_diagonal(tags, RelationTag.SELF)
    for i, gi in enumerate(concepts):
        for j, gj in enumerate(concepts):
            if i == j:
                continue
            fwd = lexicon.score(gi, gj)
            rev = lexicon.score(gj, gi)
            if fwd is None and rev is None:
                continue
            adj[i, j] = 1
            if rev is None or (fwd is not None and fwd >= rev):
                tags[i, j] = RelationTag.RIGHT
            else:
                tags[i, j] = RelationTag.LEFT
    return ConceptGraph(tuple(concepts), adj, tags)


def build_adjacency_ablation(concepts, mode, seed=0):
    """Graphs for the construction ablations.

    RANDOM draws each off-diagonal entry independently with probability 0.5;
    ONE_FOR_ALL and MLP connect everything (MLP replaces the attention at
    forward time). Off-diagonal tags follow node order: j > i is RIGHT.
    """
    _check_nodes(concepts)
    mode = GraphMode(mode)
    k = len(concepts)
    if mode is GraphMode.RANDOM:
        rng = np.random.default_rng(seed)
        adj = (rng.random((k, k)) < 0.5).astype(np.int64)
        np.fill_diagonal(adj, 1)
    elif mode in (GraphMode.ONE_FOR_ALL, GraphMode.MLP):
        adj = np.ones((k, k), dtype=np.int64)
    else:
        raise ValueError(f"{mode.value} is not an ablation mode")
    order = np.arange(k)
    tags = np.where(order[None, :] > order[:, None], RelationTag.RIGHT, RelationTag.LEFT)
    np.fill_diagonal(tags, RelationTag.SELF)
    tags = np.where(adj == 1, tags, NO_EDGE).astype(np.int64)
    return ConceptGraph(tuple(concepts), adj, tags)


def stack_graphs(graphs):
    """Batch same-size graphs into [B, k, k] adjacency and tag arrays."""
    return (np.stack([g.adjacency for g in graphs]), np.stack([g.tags for g in graphs]))


class WgcnLayer(Module):
    def __init__(self, rng, d):
        self.linear = Linear(rng, d, d)
        # W_left, W_right, W_self stacked in RelationTag order. Bound 1/d rather
        # than 1/sqrt(d): h_i W h_j sums d^2 terms, so this keeps initial scores
        # O(1) and the neighbourhood softmax unsaturated.
        self.w_pos = Tensor(rng.uniform(-1.0 / d, 1.0 / d, size=(3, d, d)), requires_grad=True)
        self.norm = LayerNorm(d)


class PairScorer(Module):
    """Two-layer perceptron on concatenated (h_i, h_j) giving a scalar score."""

    def __init__(self, rng, d):
        self.left = Linear(rng, d, d)
        self.right = Linear(rng, d, d, bias=False)
        # a bias here would be constant along each softmax row
        self.out = Linear(rng, d, 1, bias=False)

    def __call__(self, h):
        *lead, k, d = h.shape
        u = self.left(h).reshape(*lead, k, 1, d)
        v = self.right(h).reshape(*lead, 1, k, d)
        s = self.out(ad.relu(u + v))
        return s.reshape(*lead, k, k)


def _batched(h, adjacency, tags):
    """Lift a single [k, d] node set to a batch of one."""
    if h.ndim == 2:
        return h.reshape(1, *h.shape), adjacency[None], tags[None], True
    return h, adjacency, tags, False


def wgcn_attention(h, adjacency, tags, layer):
    """Attention weights over each node's neighbourhood, [.., k, k].

    The score for (i, j) is the bilinear form h_i . W_tag(i,j) . h_j; weights
    are a softmax over the adjacency support and exactly zero elsewhere.
    """
    h, adjacency, tags, single = _batched(h, np.asarray(adjacency), np.asarray(tags))
    scores = ad.tag_bilinear(h, layer.w_pos, tags)
    alpha = ad.masked_softmax(scores, adjacency, axis=-1)
    return alpha.reshape(*alpha.shape[1:]) if single else alpha


def wgcn_layer(h, alpha, layer):
    """h_i' = ReLU(LN(sum_j alpha_ij (W h_j + b)))."""
    return ad.relu(layer.norm(ad.matmul(alpha, layer.linear(h))))


class WGCN(Module):
    def __init__(self, rng, d, n_layers=2, mode=GraphMode.THRESHOLD):
        if n_layers < 1:
            raise ValueError("W-GCN needs at least one layer")
        self.mode = GraphMode(mode)
        self.layers = [WgcnLayer(rng, d) for _ in range(n_layers)]
        self.scorers = [PairScorer(rng, d) for _ in range(n_layers)] if self.mode is GraphMode.MLP else []

    def __call__(self, h, adjacency, tags, return_alphas=False):
        alphas = []
        for i, layer in enumerate(self.layers):
            if self.mode is GraphMode.MLP:
                alpha = ad.softmax(self.scorers[i](h), axis=-1)
            else:
                alpha = wgcn_attention(h, adjacency, tags, layer)
            alphas.append(alpha)
            h = wgcn_layer(h, alpha, layer)
        return (h, alphas) if return_alphas else h


def wgcn_forward(concept_features, graph, params):
    """Structured concept features for one graph (or a batch of stacked arrays)."""
    if isinstance(graph, ConceptGraph):
        return params(concept_features, graph.adjacency, graph.tags)
    adjacency, tags = graph
    return params(concept_features, adjacency, tags)


def dump_graph(path, graph, alpha, words):
    """Write ``gi gj tag alpha_layer1`` rows for every edge of ``graph``."""
    alpha = np.asarray(alpha.data if isinstance(alpha, Tensor) else alpha)
    lines = ["gi\tgj\ttag\talpha_layer1"]
    for i, gi in enumerate(graph.nodes):
        for j, gj in enumerate(graph.nodes):
            if graph.adjacency[i, j]:
                tag = RelationTag(graph.tags[i, j]).name
                lines.append(f"{words[gi]}\t{words[gj]}\t{tag}\t{alpha[i, j]:.6f}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
