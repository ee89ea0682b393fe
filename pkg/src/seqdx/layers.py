"""Convolution, pooling, fully connected and LSTM building blocks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import (ShapeError, Tensor, _record, add, linear, mul, row,
                     sigmoid, tanh)

GATES = ("i", "f", "o", "g")


def _he_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------------------
# convolution

def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` ([C,H,W] or [N,C,H,W]) with ``weight`` [O,C,kh,kw]."""
    xd = x.data
    single = xd.ndim == 3
    if single:
        xd = xd[None]
    if xd.ndim != 4:
        raise ShapeError(f"conv2d expects [C,H,W] or [N,C,H,W], got {list(x.shape)}")
    n, c, h, w = xd.shape
    o, wc, kh, kw = weight.shape
    if wc != c:
        raise ShapeError(f"conv2d: input has {c} channels, layer expects {wc}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if h + 2 * padding < kh or w + 2 * padding < kw or ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} does not fit input {h}x{w} with padding {padding}")

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = weight.data.reshape(o, -1)
    out = (cols @ wmat.T + bias.data).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    if single:
        out = out[0]

    def rule(g):
        if single:
            g = g[None]
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (gmat.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = gmat.sum(axis=0) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            if padding:
                gxp = gxp[:, :, padding:padding + h, padding:padding + w]
            gx = gxp[0] if single else gxp
        return gx, gw, gb

    return _record(out, (x, weight, bias), rule, "conv2d")


def maxpool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k x k max pooling; ties route the gradient to the first cell."""
    xd = x.data
    single = xd.ndim == 3
    if single:
        xd = xd[None]
    n, c, h, w = xd.shape
    if h % k or w % k:
        raise ShapeError(f"maxpool2d: extent {h}x{w} not divisible by {k}")
    if k == 1:
        return _record(x.data, (x,), lambda g: (g,), "maxpool2d")
    ho, wo = h // k, w // k
    blocks = xd.reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)
    idx = blocks.argmax(axis=-1)[..., None]
    out = np.take_along_axis(blocks, idx, axis=-1)[..., 0]
    if single:
        out = out[0]

    def rule(g):
        if single:
            g = g[None]
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, idx, g[..., None], axis=-1)
        gx = gb.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx[0] if single else gx,)

    return _record(out, (x,), rule, "maxpool2d")


class _Frozen:
    @property
    def frozen(self) -> bool:
        return self._frozen

    @frozen.setter
    def frozen(self, value: bool):
        self._frozen = bool(value)
        for p in self.parameters().values():
            p.requires_grad = not self._frozen
            if self._frozen:
                p.grad = None


class Conv2dLayer(_Frozen):
    def __init__(self, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0, frozen=False):
        if len(weight.shape) != 4 or weight.shape[2] < 1 or weight.shape[3] < 1:
            raise ShapeError(f"conv weight must be [out,in,kh,kw], got {list(weight.shape)}")
        if bias.shape != (weight.shape[0],):
            raise ShapeError("conv bias must have one entry per output channel")
        if stride < 1 or padding < 0:
            raise ValueError("stride must be >= 1 and padding >= 0")
        self.weight, self.bias = weight, bias
        self.stride, self.padding = stride, padding
        self.frozen = frozen

    @classmethod
    def init(cls, in_ch, out_ch, kernel=3, stride=1, padding=1, rng=None):
        rng = rng or np.random.default_rng()
        fan_in = in_ch * kernel * kernel
        w = Tensor(_he_uniform(rng, (out_ch, in_ch, kernel, kernel), fan_in))
        return cls(w, Tensor(np.zeros(out_ch)), stride, padding)

    def parameters(self) -> dict:
        return {"weight": self.weight, "bias": self.bias}

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d_forward(self, x)


def conv2d_forward(layer: Conv2dLayer, x: Tensor) -> Tensor:
    return conv2d(x, layer.weight, layer.bias, layer.stride, layer.padding)


class LinearLayer(_Frozen):
    def __init__(self, weight: Tensor, bias: Tensor, frozen=False):
        if len(weight.shape) != 2 or bias.shape != (weight.shape[0],):
            raise ShapeError(f"linear layer shapes inconsistent: {list(weight.shape)}, {list(bias.shape)}")
        self.weight, self.bias = weight, bias
        self.frozen = frozen

    @classmethod
    def init(cls, in_features, out_features, rng=None):
        rng = rng or np.random.default_rng()
        w = Tensor(_he_uniform(rng, (out_features, in_features), in_features))
        return cls(w, Tensor(np.zeros(out_features)))

    @property
    def in_features(self):
        return self.weight.shape[1]

    @property
    def out_features(self):
        return self.weight.shape[0]

    def parameters(self) -> dict:
        return {"weight": self.weight, "bias": self.bias}

    def __call__(self, x: Tensor) -> Tensor:
        return linear_forward(self, x)


def linear_forward(layer: LinearLayer, x: Tensor) -> Tensor:
    return linear(x, layer.weight, layer.bias)


# ---------------------------------------------------------------------------
# LSTM

class LstmParams:
    """Input weights W_k [H,D], recurrent weights U_k [H,H], biases b_k [H] per gate."""

    def __init__(self, W: dict, U: dict, b: dict):
        self.W, self.U, self.b = W, U, b
        hidden, inp = W["i"].shape
        self.hidden_size, self.input_size = hidden, inp
        for k in GATES:
            if (W[k].shape != (hidden, inp) or U[k].shape != (hidden, hidden)
                    or b[k].shape != (hidden,)):
                raise ShapeError(f"LSTM gate {k!r} shapes inconsistent with H={hidden}, D={inp}")

    @classmethod
    def init(cls, input_size, hidden_size, rng=None, forget_bias=1.0):
        rng = rng or np.random.default_rng()
        bound = 1.0 / np.sqrt(hidden_size)
        W, U, b = {}, {}, {}
        for k in GATES:
            W[k] = Tensor(rng.uniform(-bound, bound, (hidden_size, input_size)), requires_grad=True)
            U[k] = Tensor(rng.uniform(-bound, bound, (hidden_size, hidden_size)), requires_grad=True)
            b[k] = Tensor(np.full(hidden_size, forget_bias if k == "f" else 0.0), requires_grad=True)
        return cls(W, U, b)

    def parameters(self) -> dict:
        out = {}
        for k in GATES:
            out[f"W_{k}"] = self.W[k]
            out[f"U_{k}"] = self.U[k]
            out[f"b_{k}"] = self.b[k]
        return out


@dataclass(frozen=True)
class LstmState:
    h: Tensor
    c: Tensor

    @classmethod
    def zeros(cls, hidden_size: int) -> "LstmState":
        return cls(Tensor(np.zeros(hidden_size)), Tensor(np.zeros(hidden_size)))


def _gate_update(params: LstmParams, pre_x: dict, state: LstmState) -> LstmState:
    pre = {k: add(pre_x[k], linear(state.h, params.U[k])) for k in GATES}
    i, f, o = sigmoid(pre["i"]), sigmoid(pre["f"]), sigmoid(pre["o"])
    g = tanh(pre["g"])
    c = add(mul(f, state.c), mul(i, g))
    h = mul(o, tanh(c))
    return LstmState(h, c)


def lstm_cell_step(params: LstmParams, x: Tensor, state: LstmState) -> LstmState:
    """One step of the standard (peephole-free) LSTM recurrence."""
    H, D = params.hidden_size, params.input_size
    if x.shape != (D,):
        raise ShapeError(f"LSTM input must be [{D}], got {list(x.shape)}")
    if state.h.shape != (H,) or state.c.shape != (H,):
        raise ShapeError(f"LSTM state must be [{H}]")
    pre_x = {k: linear(x, params.W[k], params.b[k]) for k in GATES}
    return _gate_update(params, pre_x, state)


def lstm_unroll(params: LstmParams, xs: Tensor, state: LstmState | None = None) -> list:
    """Run the cell over the rows of ``xs`` [n, D]; returns the n successive states.

    Input projections for all steps are computed in one matrix product per gate,
    which is algebraically the same as calling :func:`lstm_cell_step` per row.
    """
    if len(xs.shape) != 2 or xs.shape[1] != params.input_size:
        raise ShapeError(f"LSTM inputs must be [n, {params.input_size}], got {list(xs.shape)}")
    state = state or LstmState.zeros(params.hidden_size)
    proj = {k: linear(xs, params.W[k], params.b[k]) for k in GATES}
    states = []
    for t in range(xs.shape[0]):
        state = _gate_update(params, {k: row(proj[k], t) for k in GATES}, state)
        states.append(state)
    return states
