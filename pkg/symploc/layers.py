"""
Small differentiable building blocks shared by the branches.

Linear maps use the row-vector convention y = x @ W + b with W shaped (in, out).
"""

import math

import numpy as np

from . import autodiff as ad
from .params import ModelParams, glorot


class Linear:
    def __init__(self, store: ModelParams, name: str, d_in: int, d_out: int,
                 rng: np.random.Generator, bias: bool = True):
        self.weight = store.add(f"{name}.weight", glorot(rng, d_in, d_out))
        self.bias = store.add(f"{name}.bias", np.zeros(d_out)) if bias else None

    def __call__(self, x):
        out = ad.matmul(x, self.weight) if x.ndim >= 2 else ad.matmul(ad.reshape(x, (1, -1)), self.weight)
        return out + self.bias if self.bias is not None else out


class MLP:
    """Two linear layers with a tanh hidden activation."""

    def __init__(self, store: ModelParams, name: str, d_in: int, d_hidden: int, d_out: int,
                 rng: np.random.Generator):
        self.hidden = Linear(store, f"{name}.hidden", d_in, d_hidden, rng)
        self.out = Linear(store, f"{name}.out", d_hidden, d_out, rng)

    def __call__(self, x):
        return self.out(ad.tanh(self.hidden(x)))


def attention(queries, keys, values):
    """Single-head scaled dot-product attention; rows of the weights sum to 1."""
    scale = 1.0 / math.sqrt(queries.shape[-1])
    weights = ad.softmax(ad.matmul(queries, ad.swap_last(keys)) * scale, axis=-1)
    return ad.matmul(weights, values)


class GRU:
    """
    Single-layer gated recurrent unit.

    run() returns the hidden state after every step, shape (N, hidden).
    """

    def __init__(self, store: ModelParams, name: str, d_in: int, d_hidden: int,
                 rng: np.random.Generator):
        self.d_hidden = d_hidden
        self.input_map = Linear(store, f"{name}.input", d_in, 3 * d_hidden, rng)
        self.hidden_map = Linear(store, f"{name}.hidden", d_hidden, 3 * d_hidden, rng)

    def run(self, sequence, reverse: bool = False):
        steps = range(sequence.shape[0])
        if reverse:
            steps = reversed(steps)
        projected = self.input_map(sequence)
        h = ad.Tensor(np.zeros((1, self.d_hidden)))
        H = self.d_hidden
        outputs = {}
        for t in steps:
            x_t = projected[t:t + 1]
            h_t = self.hidden_map(h)
            z = ad.sigmoid(x_t[:, :H] + h_t[:, :H])
            r = ad.sigmoid(x_t[:, H:2 * H] + h_t[:, H:2 * H])
            n = ad.tanh(x_t[:, 2 * H:] + r * h_t[:, 2 * H:])
            h = (1.0 - z) * n + z * h
            outputs[t] = h
        return ad.concat([outputs[t] for t in range(sequence.shape[0])], axis=0)


class EncoderBlock:
    """Post-norm self-attention encoder block with a tanh feed-forward."""

    def __init__(self, store: ModelParams, name: str, width: int, rng: np.random.Generator):
        self.q = Linear(store, f"{name}.q", width, width, rng, bias=False)
        self.k = Linear(store, f"{name}.k", width, width, rng, bias=False)
        self.v = Linear(store, f"{name}.v", width, width, rng, bias=False)
        self.ffn = MLP(store, f"{name}.ffn", width, width, width, rng)

    def __call__(self, x):
        x = ad.layer_norm(x + attention(self.q(x), self.k(x), self.v(x)))
        return ad.layer_norm(x + self.ffn(x))
