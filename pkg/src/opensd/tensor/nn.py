"""Parameter containers and the few layers the model is built from."""

from __future__ import annotations

import numpy as np

from .core import Tensor, gelu, layer_norm, matmul, relu


class Module:
    """Walks attributes to collect parameters, in the order they were assigned."""

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{full}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"checkpoint is missing parameters: {sorted(missing)}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
            p.data = arr.copy()

    def num_parameters(self):
        return sum(p.size for p in self.parameters())


def param(values):
    return Tensor(values, requires_grad=True)


class Linear(Module):
    def __init__(self, d_in, d_out, rng, bias=True):
        bound = 1.0 / np.sqrt(d_in)
        self.weight = param(rng.uniform(-bound, bound, size=(d_in, d_out)))
        self.bias = param(np.zeros(d_out)) if bias else None

    def __call__(self, x):
        y = matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d):
        self.weight = param(np.ones(d))
        self.bias = param(np.zeros(d))

    def __call__(self, x):
        return layer_norm(x, self.weight, self.bias)


class MLP(Module):
    """Stack of linear layers with ReLU between them (none after the last)."""

    def __init__(self, dims, rng, activation="relu"):
        self.layers = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]
        self.activation = activation

    def __call__(self, x):
        act = relu if self.activation == "relu" else gelu
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = act(x)
        return x
