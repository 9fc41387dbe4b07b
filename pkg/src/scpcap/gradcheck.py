"""Registered finite-difference suites for every differentiable building block."""

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, finite_difference_check
from .layers import LayerNorm, MultiHeadAttention, causal_mask

PRIMITIVE_TOL = 1e-5
END_TO_END_TOL = 1e-4


def _weighted_sum(out, rng):
    # a random projection keeps symmetric outputs (e.g. softmax rows) from hiding errors
    return ad.tsum(out * Tensor(rng.normal(size=out.shape)))


def check_matmul(rng):
    a = Tensor(rng.normal(size=(2, 3, 4)))
    b = Tensor(rng.normal(size=(4, 5)))
    r = rng.normal(size=(2, 3, 5))
    return finite_difference_check(lambda x, y: ad.tsum(ad.matmul(x, y) * Tensor(r)), [a, b])


def check_softmax(rng):
    x = Tensor(rng.normal(size=(3, 6)))
    r = rng.normal(size=(3, 6))
    support = rng.random((3, 6)) < 0.6
    support[:, 0] = True
    return max(
        finite_difference_check(lambda t: ad.tsum(ad.softmax(t) * Tensor(r)), x),
        finite_difference_check(lambda t: ad.tsum(ad.masked_softmax(t, support) * Tensor(r)), x),
        finite_difference_check(lambda t: ad.tsum(ad.log_softmax(t) * Tensor(r)), x),
    )


def check_layer_norm(rng):
    ln = LayerNorm(6)
    ln.gain.data = rng.normal(size=6)
    ln.bias.data = rng.normal(size=6)
    x = Tensor(rng.normal(size=(4, 6)))
    r = rng.normal(size=(4, 6))
    return finite_difference_check(lambda t, g, b: ad.tsum(ln(t) * Tensor(r)), [x, ln.gain, ln.bias])


def check_mha(rng):
    mha = MultiHeadAttention(rng, 8, 2)
    x = Tensor(rng.normal(size=(2, 4, 8)))
    mem = Tensor(rng.normal(size=(2, 5, 8)))
    r1 = rng.normal(size=(2, 4, 8))
    r2 = rng.normal(size=(2, 4, 8))
    mask = causal_mask(4)

    def f(q, m, *_):
        return ad.tsum(mha(q, q, q, mask) * Tensor(r1)) + ad.tsum(mha(q, m, m) * Tensor(r2))

    return finite_difference_check(f, [x, mem] + mha.parameters())


def check_cross_entropy(rng):
    logits = Tensor(rng.normal(size=(2, 4, 7)))
    targets = rng.integers(1, 7, size=(2, 4))
    targets[1, 3] = 0
    return finite_difference_check(lambda z: ad.cross_entropy(z, targets, pad_id=0), logits)


def check_asymmetric_loss(rng):
    # logits kept away from the clip kink at p = 0.05 and from saturation
    z = Tensor(rng.uniform(-2.0, 2.0, size=(3, 8)))
    labels = (rng.random((3, 8)) < 0.4).astype(np.float64)
    return max(
        finite_difference_check(lambda t: ad.asymmetric_loss(ad.sigmoid(t), labels), z),
        finite_difference_check(lambda t: ad.asymmetric_loss(ad.sigmoid(t), labels, 1.0, 2.0, 0.0), z),
    )


def check_wgcn_layer(rng):
    from .wgcn import WGCN

    k, d = 5, 8
    net = WGCN(rng, d, n_layers=2)
    h = Tensor(rng.normal(size=(2, k, d)))
    adjacency = rng.random((2, k, k)) < 0.5
    adjacency = adjacency | adjacency.transpose(0, 2, 1) | np.eye(k, dtype=bool)
    tags = np.where(adjacency, rng.integers(0, 2, size=(2, k, k)), -1)
    idx = np.arange(k)
    tags[:, idx, idx] = 2
    r = rng.normal(size=(2, k, d))
    return finite_difference_check(lambda x, *_: ad.tsum(net(x, adjacency, tags) * Tensor(r)),
                                   [h] + net.parameters())


def check_end_to_end(rng, n_coords=32):
    """total_loss of a tiny full model against a random subsample of parameter coordinates."""
    from .captioner import Arm, Captioner, collate
    from .harness import SyntheticSpec, build_resources, config_for, generate_dataset, make_samples

    ds = generate_dataset(SyntheticSpec(n_concepts=10, n_samples=12, feature_dim=6, grid_size=5,
                                        seed=int(rng.integers(1 << 16))))
    res = build_resources(ds.corpus)
    samples = make_samples(ds.records, res.vocab, res.cv)
    cfg = config_for(res, samples, d_model=8, heads=2, ffn_dim=12, n_enc_layers=1,
                     n_concept_layers=1, n_dec_layers=1, query_count=3, gcn_layers=2, top_k=4,
                     arm=Arm.CP_WGCN.value, seed=int(rng.integers(1 << 16)))
    model = Captioner(cfg, res.cv.concept_ids)
    batch = collate(samples[:3])
    params = model.parameters()
    sizes = np.array([p.size for p in params])
    flat = rng.choice(int(sizes.sum()), size=n_coords, replace=False)
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    which = np.searchsorted(starts, flat, side="right") - 1
    coords = [(int(i), int(j - starts[i])) for i, j in zip(which, flat)]
    return finite_difference_check(lambda *_: model.forward_train(batch, res.lexicon).total,
                                   params, coords=coords)


SUITES = {
    "matmul": (check_matmul, PRIMITIVE_TOL),
    "softmax": (check_softmax, PRIMITIVE_TOL),
    "layer_norm": (check_layer_norm, PRIMITIVE_TOL),
    "mha": (check_mha, PRIMITIVE_TOL),
    "cross_entropy": (check_cross_entropy, PRIMITIVE_TOL),
    "asymmetric_loss": (check_asymmetric_loss, PRIMITIVE_TOL),
    "wgcn_layer": (check_wgcn_layer, PRIMITIVE_TOL),
    "end_to_end": (check_end_to_end, END_TO_END_TOL),
}


def run_suites(names=None, seed=0):
    """{name: (max relative error, tolerance)} for the selected suites."""
    names = list(SUITES) if names is None else names
    out = {}
    for name in names:
        fn, tol = SUITES[name]
        out[name] = (fn(np.random.default_rng([seed, len(name)])), tol)
    return out
