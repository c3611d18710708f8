"""Parameter containers and the dense/recurrent building blocks."""

from __future__ import annotations

import math
from typing import Iterator, MutableMapping

import numpy as np

from . import numerics as nx
from .numerics import Tensor


class Params(MutableMapping):
    """Ordered map of parameter name to leaf :class:`Tensor`."""

    def __init__(self, items=None):
        self._items: dict[str, Tensor] = {}
        for name, value in dict(items or {}).items():
            self[name] = value

    def __getitem__(self, name: str) -> Tensor:
        return self._items[name]

    def __setitem__(self, name: str, value) -> None:
        if not isinstance(value, Tensor):
            value = Tensor(np.asarray(value, dtype=np.float32), requires_grad=True)
        value.name = name
        self._items[name] = value

    def __delitem__(self, name: str) -> None:
        del self._items[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def count(self) -> int:
        return sum(int(t.data.size) for t in self._items.values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._items.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, t in self._items.items():
            a = np.asarray(arrays[k], dtype=t.data.dtype)
            if a.shape != t.shape:
                raise nx.ShapeError(f"load {k}", t.shape, a.shape)
            t.data[...] = a

    def zero_grad(self) -> None:
        for t in self._items.values():
            t.zero_grad()

    def set_trainable(self, flag: bool) -> None:
        for t in self._items.values():
            t.requires_grad = flag
            t.grad = np.zeros_like(t.data) if flag else None

    def trainable(self) -> "Params":
        return Params({k: t for k, t in self._items.items() if t.requires_grad})

    def subset(self, prefix: str) -> "Params":
        out = Params.__new__(Params)
        out._items = {k: t for k, t in self._items.items() if k.startswith(prefix)}
        return out

    def copy(self) -> "Params":
        out = Params()
        for k, t in self._items.items():
            out[k] = Tensor(t.data.copy(), requires_grad=t.requires_grad)
        return out


def uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    """Uniform in +-1/sqrt(fan_in)."""
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def dense_params(params: Params, prefix: str, n_in: int, n_out: int, rng) -> None:
    params[f"{prefix}.W"] = uniform(rng, (n_in, n_out), n_in)
    params[f"{prefix}.b"] = uniform(rng, (n_out,), n_in)


def dense(x, params: Params, prefix: str) -> Tensor:
    return nx.linear(x, params[f"{prefix}.W"], params[f"{prefix}.b"])


def gru_params(params: Params, prefix: str, n_in: int, hidden: int, rng) -> None:
    # one bias vector per gate: 3 * (in*H + H*H + H) parameters
    params[f"{prefix}.W"] = uniform(rng, (n_in, 3 * hidden), hidden)
    params[f"{prefix}.U_zr"] = uniform(rng, (hidden, 2 * hidden), hidden)
    params[f"{prefix}.U_n"] = uniform(rng, (hidden, hidden), hidden)
    params[f"{prefix}.b"] = uniform(rng, (3 * hidden,), hidden)


def gru_cell(x, h, params: Params, prefix: str) -> Tensor:
    """One GRU step.

    ``z`` is the update gate and ``r`` the reset gate; the candidate state
    sees the reset-scaled previous state, ``h' = z*h + (1-z)*n``.
    """
    hid = h.shape[1]
    gx = nx.linear(x, params[f"{prefix}.W"], params[f"{prefix}.b"])
    gh = nx.matmul(h, params[f"{prefix}.U_zr"])
    z = nx.sigmoid(nx.slice_cols(gx, 0, hid) + nx.slice_cols(gh, 0, hid))
    r = nx.sigmoid(nx.slice_cols(gx, hid, 2 * hid) + nx.slice_cols(gh, hid, 2 * hid))
    n = nx.tanh(nx.slice_cols(gx, 2 * hid, 3 * hid) + nx.matmul(r * h, params[f"{prefix}.U_n"]))
    return z * h + (1.0 - z) * n


def lstm_params(params: Params, prefix: str, n_in: int, hidden: int, rng) -> None:
    # one bias vector per gate: 4 * (in*H + H*H + H) parameters
    params[f"{prefix}.W"] = uniform(rng, (n_in, 4 * hidden), hidden)
    params[f"{prefix}.U"] = uniform(rng, (hidden, 4 * hidden), hidden)
    params[f"{prefix}.b"] = uniform(rng, (4 * hidden,), hidden)


def lstm_cell(x, h, c, params: Params, prefix: str) -> tuple[Tensor, Tensor]:
    """One LSTM step with gate order input, forget, cell, output."""
    hid = h.shape[1]
    g = nx.linear(x, params[f"{prefix}.W"], params[f"{prefix}.b"]) + nx.matmul(h, params[f"{prefix}.U"])
    i = nx.sigmoid(nx.slice_cols(g, 0, hid))
    f = nx.sigmoid(nx.slice_cols(g, hid, 2 * hid))
    cand = nx.tanh(nx.slice_cols(g, 2 * hid, 3 * hid))
    o = nx.sigmoid(nx.slice_cols(g, 3 * hid, 4 * hid))
    c_new = f * c + i * cand
    return o * nx.tanh(c_new), c_new
