import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scpcap import autodiff as ad
from scpcap.autodiff import Tensor, finite_difference_check
from scpcap.corpus import SPECIALS, PmiLexicon, Vocabulary, build_lexicon, count_cooccurrence, tokenize
from scpcap.harness import SyntheticSpec, generate_dataset
from scpcap.wgcn import (NO_EDGE, WGCN, ConceptGraph, GraphMode, RelationTag, WgcnLayer,
                         build_adjacency, build_adjacency_ablation, dump_graph, stack_graphs,
                         wgcn_attention, wgcn_forward, wgcn_layer)

L, R, S = RelationTag.LEFT, RelationTag.RIGHT, RelationTag.SELF


def lexicon_of(pairs, words=("girl", "eating", "food", "red", "ball", "cat")):
    vocab = Vocabulary(list(SPECIALS) + list(words))
    ix = vocab.index
    entries = {(ix[a], ix[b]): s for (a, b), s in pairs.items()}
    return PmiLexicon(dict(sorted(entries.items())), 0.5, 3, vocab), vocab


def random_graph(rng, k):
    adj = rng.random((k, k)) < 0.4
    adj = (adj | adj.T | np.eye(k, dtype=bool)).astype(np.int64)
    tags = np.where(rng.random((k, k)) < 0.5, L, R)
    tags = np.where(np.triu(np.ones((k, k), dtype=bool), 1), tags, 1 - tags.T)
    np.fill_diagonal(tags, S)
    return ConceptGraph(tuple(range(k)), adj, np.where(adj == 1, tags, NO_EDGE))


# -- construction -----------------------------------------------------------

def test_single_concept():
    lex, vocab = lexicon_of({})
    g = build_adjacency([vocab.index["girl"]], lex)
    assert g.adjacency.tolist() == [[1]]
    assert g.tags.tolist() == [[S]]


def test_one_directional_pair():
    lex, vocab = lexicon_of({("girl", "eating"): 1.2})
    g = build_adjacency([vocab.index["girl"], vocab.index["eating"]], lex)
    assert g.adjacency.tolist() == [[1, 1], [1, 1]]
    assert g.tags[0, 1] == R and g.tags[1, 0] == L


def test_both_directions_higher_pmi_wins():
    lex, vocab = lexicon_of({("girl", "eating"): 0.7, ("eating", "girl"): 1.5})
    g = build_adjacency([vocab.index["girl"], vocab.index["eating"]], lex)
    assert g.tags[0, 1] == L and g.tags[1, 0] == R


def test_both_directions_tie_is_right():
    lex, vocab = lexicon_of({("girl", "eating"): 1.0, ("eating", "girl"): 1.0})
    g = build_adjacency([vocab.index["girl"], vocab.index["eating"]], lex)
    assert g.tags[0, 1] == R and g.tags[1, 0] == R


def test_unrelated_concepts_unconnected():
    lex, vocab = lexicon_of({("girl", "eating"): 1.0})
    g = build_adjacency([vocab.index["red"], vocab.index["cat"]], lex)
    assert g.adjacency.tolist() == [[1, 0], [0, 1]]
    assert g.tags[0, 1] == NO_EDGE


def test_empty_and_oversized_are_errors():
    lex, _ = lexicon_of({})
    with pytest.raises(ValueError):
        build_adjacency([], lex)
    with pytest.raises(ValueError):
        build_adjacency(list(range(65)), lex)


def test_planted_concepts_match_membership_oracle():
    ds = generate_dataset(SyntheticSpec(n_samples=300, seed=5))
    sents = [tokenize(c) for c in ds.corpus]
    table = count_cooccurrence(sents, 3)
    lex = build_lexicon(table, 0.5)
    ix = table.vocab.index
    words = list(dict.fromkeys(w for p in ds.planted[:4] for w in p))[:6]
    assert len(words) == 6
    ids = [ix[w] for w in words]
    g = build_adjacency(ids, lex)
    for i, a in enumerate(ids):
        for j, b in enumerate(ids):
            expected = i == j or (a, b) in lex.entries or (b, a) in lex.entries
            assert g.adjacency[i, j] == int(expected)
            assert (g.tags[i, j] != NO_EDGE) == expected


def test_tag_consistency_on_synthetic_lexicon():
    ds = generate_dataset(SyntheticSpec(n_samples=300, seed=6))
    table = count_cooccurrence([tokenize(c) for c in ds.corpus], 3)
    lex = build_lexicon(table, 0.5)
    ids = sorted({a for a, _ in lex.entries})[:20]
    g = build_adjacency(ids, lex)
    for i, a in enumerate(ids):
        for j, b in enumerate(ids):
            one_way = ((a, b) in lex.entries) != ((b, a) in lex.entries)
            if i != j and one_way:
                assert {g.tags[i, j], g.tags[j, i]} == {L, R}
    assert np.array_equal(g.adjacency, g.adjacency.T)
    assert np.all(np.diag(g.tags) == S)


def test_one_for_all():
    g = build_adjacency_ablation([7, 8, 9], GraphMode.ONE_FOR_ALL)
    assert g.adjacency.tolist() == [[1] * 3] * 3


def test_random_is_seeded():
    a = build_adjacency_ablation(list(range(12)), GraphMode.RANDOM, seed=3)
    b = build_adjacency_ablation(list(range(12)), GraphMode.RANDOM, seed=3)
    c = build_adjacency_ablation(list(range(12)), GraphMode.RANDOM, seed=4)
    assert np.array_equal(a.adjacency, b.adjacency) and np.array_equal(a.tags, b.tags)
    assert not np.array_equal(a.adjacency, c.adjacency)


def test_random_density_monte_carlo():
    k, draws = 6, 10_000
    off = ~np.eye(k, dtype=bool)
    total = sum(build_adjacency_ablation(list(range(k)), GraphMode.RANDOM, seed=s).adjacency[off].sum()
                for s in range(draws))
    assert abs(total / (draws * off.sum()) - 0.5) <= 0.02


@pytest.mark.parametrize("mode", [GraphMode.RANDOM, GraphMode.ONE_FOR_ALL, GraphMode.MLP])
def test_ablation_graph_invariants(mode):
    g = build_adjacency_ablation(list(range(9)), mode, seed=1)
    assert np.all(np.diag(g.adjacency) == 1)
    assert np.all(np.diag(g.tags) == S)
    assert np.array_equal(g.tags != NO_EDGE, g.adjacency == 1)


def test_threshold_is_not_an_ablation_mode():
    with pytest.raises(ValueError):
        build_adjacency_ablation([1, 2], GraphMode.THRESHOLD)


def test_stack_graphs_shapes():
    rng = np.random.default_rng(0)
    adj, tags = stack_graphs([random_graph(rng, 4) for _ in range(3)])
    assert adj.shape == tags.shape == (3, 4, 4)


# -- attention and layers ---------------------------------------------------

def direct_alpha(h, graph, w_pos):
    """Neighbourhood softmax written out term by term."""
    k = h.shape[0]
    alpha = np.zeros((k, k))
    for i in range(k):
        terms = {j: math.exp(h[i] @ w_pos[graph.tags[i, j]] @ h[j])
                 for j in range(k) if graph.adjacency[i, j]}
        z = sum(terms.values())
        for j, t in terms.items():
            alpha[i, j] = t / z
    return alpha


def test_self_loop_only_gives_one():
    layer = WgcnLayer(np.random.default_rng(0), 4)
    g = build_adjacency_ablation([0], GraphMode.ONE_FOR_ALL)
    alpha = wgcn_attention(Tensor(np.ones((1, 4))), g.adjacency, g.tags, layer).data
    assert alpha.tolist() == [[1.0]]


def test_equal_exponents_are_uniform():
    layer = WgcnLayer(np.random.default_rng(0), 4)
    layer.w_pos.data = np.zeros((3, 4, 4))
    g = random_graph(np.random.default_rng(1), 6)
    alpha = wgcn_attention(Tensor(np.random.default_rng(2).normal(size=(6, 4))), g.adjacency, g.tags, layer).data
    deg = g.adjacency.sum(1, keepdims=True)
    assert np.allclose(alpha, g.adjacency / deg, rtol=0, atol=1e-15)


def test_attention_matches_direct_formula():
    rng = np.random.default_rng(3)
    layer = WgcnLayer(rng, 6)
    g = random_graph(rng, 5)
    h = rng.normal(size=(5, 6))
    alpha = wgcn_attention(Tensor(h), g.adjacency, g.tags, layer).data
    assert np.allclose(alpha, direct_alpha(h, g, layer.w_pos.data), rtol=1e-12, atol=1e-14)
    assert np.all(np.abs(alpha.sum(1) - 1) <= 1e-12)
    assert np.all(alpha[g.adjacency == 0] == 0.0)


@given(st.integers(1, 12), st.integers(0, 2**31))
@settings(max_examples=40, deadline=None)
def test_attention_row_stochastic_on_support(k, seed):
    rng = np.random.default_rng(seed)
    layer = WgcnLayer(rng, 5)
    g = random_graph(rng, k)
    alpha = wgcn_attention(Tensor(rng.normal(size=(k, 5)) * 3), g.adjacency, g.tags, layer).data
    assert np.all(np.abs(alpha.sum(-1) - 1) <= 1e-12)
    assert np.array_equal(alpha > 0, g.adjacency == 1) or np.all(alpha[g.adjacency == 0] == 0)


def test_single_node_layer_collapse():
    rng = np.random.default_rng(4)
    layer = WgcnLayer(rng, 4)
    h = Tensor(rng.normal(size=(1, 4)))
    out = wgcn_layer(h, Tensor(np.ones((1, 1))), layer).data
    ref = ad.relu(layer.norm(layer.linear(h))).data
    assert np.array_equal(out, ref)


def test_identical_nodes_aggregate_to_shared_vector():
    rng = np.random.default_rng(5)
    layer = WgcnLayer(rng, 4)
    layer.linear.weight.data = np.eye(4)
    layer.linear.bias.data = np.zeros(4)
    v = rng.normal(size=4)
    h = Tensor(np.stack([v, v]))
    agg = ad.matmul(Tensor(np.full((2, 2), 0.5)), layer.linear(h)).data
    assert np.allclose(agg, np.stack([v, v]), rtol=0, atol=1e-15)


def test_layer_and_stack_gradcheck():
    rng = np.random.default_rng(6)
    net = WGCN(rng, 6, n_layers=2)
    g = random_graph(rng, 5)
    h = Tensor(rng.normal(size=(5, 6)))
    w = rng.normal(size=(5, 6))
    err = finite_difference_check(lambda x, *_: ad.tsum(wgcn_forward(x, g, net) * Tensor(w)),
                                  [h] + net.parameters())
    assert err < 1e-5


def test_mlp_mode_gradcheck():
    rng = np.random.default_rng(7)
    net = WGCN(rng, 4, n_layers=1, mode=GraphMode.MLP)
    g = build_adjacency_ablation(list(range(3)), GraphMode.MLP)
    h = Tensor(rng.normal(size=(3, 4)))
    w = rng.normal(size=(3, 4))
    err = finite_difference_check(lambda x, *_: ad.tsum(wgcn_forward(x, g, net) * Tensor(w)),
                                  [h] + net.parameters())
    assert err < 1e-5


def test_zero_layers_is_error():
    with pytest.raises(ValueError):
        WGCN(np.random.default_rng(0), 4, n_layers=0)


@pytest.mark.parametrize("k", [1, 2, 17, 64])
def test_output_shape(k):
    rng = np.random.default_rng(k)
    net = WGCN(rng, 8)
    out = wgcn_forward(Tensor(rng.normal(size=(k, 8))), random_graph(rng, k), net)
    assert out.shape == (k, 8)


def test_permutation_equivariance():
    rng = np.random.default_rng(8)
    net = WGCN(rng, 8)
    g = random_graph(rng, 7)
    h = rng.normal(size=(7, 8))
    base = wgcn_forward(Tensor(h), g, net).data
    for _ in range(20):
        perm = rng.permutation(7)
        out = wgcn_forward(Tensor(h[perm]), g.permuted(perm), net).data
        assert np.max(np.abs(out - base[perm])) <= 1e-10


def test_batched_matches_single():
    rng = np.random.default_rng(9)
    net = WGCN(rng, 8)
    graphs = [random_graph(rng, 5) for _ in range(3)]
    h = rng.normal(size=(3, 5, 8))
    batched = wgcn_forward(Tensor(h), stack_graphs(graphs), net).data
    for b, g in enumerate(graphs):
        assert np.allclose(batched[b], wgcn_forward(Tensor(h[b]), g, net).data, rtol=0, atol=1e-13)


def test_dump_graph(tmp_path):
    lex, vocab = lexicon_of({("girl", "eating"): 1.2})
    g = build_adjacency([vocab.index["girl"], vocab.index["eating"], vocab.index["cat"]], lex)
    rng = np.random.default_rng(0)
    net = WGCN(rng, 4)
    _, alphas = net(Tensor(rng.normal(size=(3, 4))), g.adjacency, g.tags, return_alphas=True)
    path = tmp_path / "g.tsv"
    dump_graph(path, g, alphas[0], vocab.words)
    lines = path.read_text().splitlines()
    assert lines[0] == "gi\tgj\ttag\talpha_layer1"
    assert "girl\teating\tRIGHT" in "\n".join(lines)
    assert len(lines) == 1 + int(g.adjacency.sum())
