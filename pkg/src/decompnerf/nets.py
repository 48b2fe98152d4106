"""Linear layers and MLP stacks on top of the autodiff engine."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad


def he_uniform(rng, n_in, n_out):
    bound = np.sqrt(6.0 / n_in)
    return rng.uniform(-bound, bound, size=(n_in, n_out))


def glorot_uniform(rng, n_in, n_out):
    bound = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-bound, bound, size=(n_in, n_out))


class Linear:
    def __init__(self, rng, n_in, n_out, init="he", zero=False, bias=0.0):
        if zero:
            w = np.zeros((n_in, n_out))
        elif init == "he":
            w = he_uniform(rng, n_in, n_out)
        else:
            w = glorot_uniform(rng, n_in, n_out)
        self.w = ad.Tensor(w, requires_grad=True)
        self.b = ad.Tensor(np.full(n_out, bias, dtype=np.float64), requires_grad=True)
        self.n_in = n_in
        self.n_out = n_out

    def __call__(self, x):
        return x @ self.w + self.b

    def params(self, prefix):
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


class MLP:
    """relu-activated stack; the caller applies any output nonlinearity."""

    def __init__(self, rng, n_in, hidden, depth, n_out=None, out_init="glorot"):
        dims = [n_in] + [hidden] * depth
        self.hidden_layers = [Linear(rng, dims[i], dims[i + 1]) for i in range(depth)]
        self.out = Linear(rng, dims[-1], n_out, init=out_init) if n_out else None

    def __call__(self, x):
        for layer in self.hidden_layers:
            x = ad.relu(layer(x))
        return self.out(x) if self.out is not None else x

    def hidden(self, x):
        """Activations of the last hidden layer (pre-output)."""
        for layer in self.hidden_layers:
            x = ad.relu(layer(x))
        return x

    def params(self, prefix):
        out = {}
        for i, layer in enumerate(self.hidden_layers):
            out.update(layer.params(f"{prefix}.h{i}"))
        if self.out is not None:
            out.update(self.out.params(f"{prefix}.out"))
        return out


def collect_values(params):
    """name -> ndarray snapshot of a parameter dict."""
    return {k: v.values.copy() for k, v in params.items()}
