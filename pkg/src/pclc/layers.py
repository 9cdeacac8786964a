"""Parameterized layers built on the autodiff primitives.

Sequences are processed as lists of per-timestep (batch, dim) matrices with
optional (batch, 1) 0/1 masks. Masked rows keep their previous hidden state,
so the state after the final step is the state at each row's last real
timestep, and padded positions contribute exactly zero gradient.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Linear:
    def __init__(self, in_dim: int, out_dim: int, rng, name: str):
        scale = 1.0 / np.sqrt(in_dim)
        self.w = Tensor(rng.uniform(-scale, scale, (in_dim, out_dim)), requires_grad=True)
        self.b = Tensor(np.zeros(out_dim), requires_grad=True)
        self.name = name

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.w), self.b)

    def parameters(self):
        return [(f"{self.name}.w", self.w), (f"{self.name}.b", self.b)]


class LstmCell:
    """Single LSTM cell; gates come from one fused [x, h] matmul."""

    def __init__(self, in_dim: int, hidden: int, rng, name: str):
        self.in_dim = in_dim
        self.hidden = hidden
        scale = 1.0 / np.sqrt(hidden)
        self.w = Tensor(
            rng.uniform(-scale, scale, (in_dim + hidden, 4 * hidden)),
            requires_grad=True,
        )
        b = np.zeros(4 * hidden)
        b[hidden : 2 * hidden] = 1.0  # forget-gate bias
        self.b = Tensor(b, requires_grad=True)
        self.name = name

    def parameters(self):
        return [(f"{self.name}.w", self.w), (f"{self.name}.b", self.b)]

    def step(self, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        hid = self.hidden
        gates = ad.add(ad.matmul(ad.concat([x, h], axis=1), self.w), self.b)
        i = ad.sigmoid(ad.slice_cols(gates, 0, hid))
        f = ad.sigmoid(ad.slice_cols(gates, hid, 2 * hid))
        g = ad.tanh(ad.slice_cols(gates, 2 * hid, 3 * hid))
        o = ad.sigmoid(ad.slice_cols(gates, 3 * hid, 4 * hid))
        c_new = ad.add(ad.mul(f, c), ad.mul(i, g))
        h_new = ad.mul(o, ad.tanh(c_new))
        return h_new, c_new


def run_lstm(
    cell: LstmCell,
    steps: list[Tensor],
    masks: list[np.ndarray | None],
) -> tuple[list[Tensor], Tensor]:
    """Run `cell` over timestep inputs; returns per-step outputs and final h.

    `masks[t]` is a (batch, 1) float array of 0/1, or None when every row is
    live at step t.
    """
    batch = steps[0].shape[0]
    h = Tensor(np.zeros((batch, cell.hidden)))
    c = Tensor(np.zeros((batch, cell.hidden)))
    outputs = []
    for x, m in zip(steps, masks):
        h_new, c_new = cell.step(x, h, c)
        if m is not None:
            live = Tensor(m)
            dead = Tensor(1.0 - m)
            h = ad.add(ad.mul(h_new, live), ad.mul(h, dead))
            c = ad.add(ad.mul(c_new, live), ad.mul(c, dead))
        else:
            h, c = h_new, c_new
        outputs.append(h)
    return outputs, h


class Mlp:
    """One tanh hidden layer followed by a linear map."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int, rng, name: str):
        self.hidden_layer = Linear(in_dim, hidden, rng, f"{name}.hidden")
        self.output_layer = Linear(hidden, out_dim, rng, f"{name}.out")

    def __call__(self, x: Tensor) -> Tensor:
        return self.output_layer(ad.tanh(self.hidden_layer(x)))

    def parameters(self):
        return self.hidden_layer.parameters() + self.output_layer.parameters()


def stack_steps(steps: list[Tensor]) -> Tensor:
    """Concatenate per-step (B, d) outputs into a ((T*B), d) matrix.

    Row t*B + b holds the step-t vector of batch row b.
    """
    return ad.concat(steps, axis=0)
