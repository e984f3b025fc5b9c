"""Parameter containers, standard layers and optimizers on top of :mod:`cpdg.tensor`."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ParamStore(OrderedDict):
    """Ordered ``name -> Tensor`` mapping shared by all layers of a model."""

    def __init__(self, rng: np.random.Generator | None = None, dtype=None):
        super().__init__()
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.dtype = dtype or T.default_dtype()

    def new(self, name: str, value) -> Tensor:
        if name in self:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=self.dtype), requires_grad=True, name=name)
        self[name] = t
        return t

    def xavier(self, name: str, fan_in: int, fan_out: int) -> Tensor:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return self.new(name, self.rng.uniform(-limit, limit, size=(fan_in, fan_out)))

    def zeros(self, name: str, *shape) -> Tensor:
        return self.new(name, np.zeros(shape))

    def zero_grad(self):
        for p in self.values():
            p.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.items()}

    def load(self, arrays: dict[str, np.ndarray], strict: bool = True) -> list[str]:
        """Copy matching arrays in; returns names that were loaded."""
        loaded = []
        for k, v in arrays.items():
            if k not in self:
                if strict:
                    raise KeyError(f"unexpected parameter {k!r}")
                continue
            if self[k].shape != np.shape(v):
                if strict:
                    raise ValueError(f"shape mismatch for {k!r}: {self[k].shape} vs {np.shape(v)}")
                continue
            self[k].data = np.array(v, dtype=self.dtype)
            loaded.append(k)
        if strict:
            missing = set(self) - set(arrays)
            if missing:
                raise KeyError(f"missing parameters {sorted(missing)}")
        return loaded


class Linear:
    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int, bias: bool = True):
        self.w = store.xavier(f"{name}.w", d_in, d_out)
        self.b = store.zeros(f"{name}.b", d_out) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.w)
        return y if self.b is None else T.add(y, self.b)


class MLP:
    """Two-layer perceptron with a relu hidden layer."""

    def __init__(self, store: ParamStore, name: str, d_in: int, d_hidden: int, d_out: int):
        self.fc1 = Linear(store, f"{name}.fc1", d_in, d_hidden)
        self.fc2 = Linear(store, f"{name}.fc2", d_hidden, d_out)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.relu(self.fc1(x)))


class GRUCell:
    def __init__(self, store: ParamStore, name: str, d_in: int, d_hidden: int):
        self.w_x = store.xavier(f"{name}.w_x", d_in, 3 * d_hidden)
        self.w_h = store.xavier(f"{name}.w_h", d_hidden, 3 * d_hidden)
        self.b_x = store.zeros(f"{name}.b_x", 3 * d_hidden)
        self.b_h = store.zeros(f"{name}.b_h", 3 * d_hidden)

    def __call__(self, x: Tensor, h: Tensor) -> Tensor:
        return T.gru_cell(x, h, self.w_x, self.w_h, self.b_x, self.b_h)


class RNNCell:
    def __init__(self, store: ParamStore, name: str, d_in: int, d_hidden: int):
        self.w_x = store.xavier(f"{name}.w_x", d_in, d_hidden)
        self.w_h = store.xavier(f"{name}.w_h", d_hidden, d_hidden)
        self.b = store.zeros(f"{name}.b", d_hidden)

    def __call__(self, x: Tensor, h: Tensor) -> Tensor:
        return T.rnn_cell(x, h, self.w_x, self.w_h, self.b)


# -- optimizers -----------------------------------------------------------------

class SGD:
    def __init__(self, params: ParamStore, lr: float = 1e-3):
        self.params = params
        self.lr = lr

    def step(self):
        for p in self.params.values():
            if p.grad is not None:
                p.data -= self.lr * p.grad


class Adam:
    def __init__(self, params: ParamStore, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1 - self.b1) * p.grad
            v *= self.b2
            v += (1 - self.b2) * p.grad * p.grad
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


def make_optimizer(name: str, params: ParamStore, lr: float):
    if name == "adam":
        return Adam(params, lr)
    if name == "sgd":
        return SGD(params, lr)
    raise ValueError(f"unknown optimizer {name!r}")
