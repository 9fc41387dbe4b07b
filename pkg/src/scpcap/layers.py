"""Parameter containers and the transformer building blocks."""

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Anything holding parameters. Parameters are discovered by walking
    attributes in definition order: Tensors with ``requires_grad``, nested
    Modules, and lists of Modules."""

    def named_parameters(self, prefix=""):
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def uniform_weight(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Linear(Module):
    def __init__(self, rng, d_in, d_out, bias=True):
        self.weight = uniform_weight(rng, d_in, (d_in, d_out))
        self.bias = Tensor(np.zeros(d_out), requires_grad=True) if bias else None

    def __call__(self, x):
        y = ad.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d, eps=1e-5):
        self.gain = Tensor(np.ones(d), requires_grad=True)
        self.bias = Tensor(np.zeros(d), requires_grad=True)
        self.eps = eps

    def __call__(self, x):
        return ad.layer_norm(x, self.gain, self.bias, self.eps)


class FeedForward(Module):
    def __init__(self, rng, d, hidden):
        self.fc1 = Linear(rng, d, hidden)
        self.fc2 = Linear(rng, hidden, d)

    def __call__(self, x):
        return self.fc2(ad.relu(self.fc1(x)))


def causal_mask(t):
    """Additive [t, t] mask: 0 on and below the diagonal, a large negative above."""
    return np.triu(np.full((t, t), ad.MASK_VALUE), k=1)


class MultiHeadAttention(Module):
    def __init__(self, rng, d, heads):
        if d % heads:
            raise ValueError(f"model dim {d} is not divisible by {heads} heads")
        self.heads = heads
        self.q_proj = Linear(rng, d, d)
        # no key bias: it shifts every score in a row equally, so its gradient is 0
        self.k_proj = Linear(rng, d, d, bias=False)
        self.v_proj = Linear(rng, d, d)
        self.out_proj = Linear(rng, d, d)

    def _split(self, x):
        # [..., T, d] -> [..., h, T, d/h]
        *lead, t, d = x.shape
        x = x.reshape(*lead, t, self.heads, d // self.heads)
        n = len(lead)
        return ad.transpose(x, tuple(range(n)) + (n + 1, n, n + 2))

    def __call__(self, q, k, v, mask=None):
        """Scaled dot-product attention over all heads.

        ``q`` is [..., Tq, d]; ``k`` and ``v`` are [..., Tk, d] with leading dims
        broadcastable to those of ``q``. ``mask`` is an additive array
        broadcastable to [..., h, Tq, Tk].
        """
        qh = self._split(self.q_proj(q))
        kh = self._split(self.k_proj(k))
        vh = self._split(self.v_proj(v))
        scale = 1.0 / math.sqrt(qh.shape[-1])
        scores = ad.matmul(qh, ad.transpose(kh)) * scale
        if mask is not None:
            scores = scores + mask
        ctx = ad.matmul(ad.softmax(scores, axis=-1), vh)
        *lead, h, t, dh = ctx.shape
        n = len(lead)
        ctx = ad.transpose(ctx, tuple(range(n)) + (n + 1, n, n + 2)).reshape(*lead, t, h * dh)
        return self.out_proj(ctx)


def multi_head_attention(q, k, v, params, mask=None):
    return params(q, k, v, mask)
