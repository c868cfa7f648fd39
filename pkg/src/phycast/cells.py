"""Recurrent cells: the physically constrained PhyCell and a ConvLSTM.

PhyCell advances its latent state with one forward-Euler step of a learned
linear PDE and then pulls the result towards the encoded observation:

    h_tilde = h + Phi(h)                              (prediction)
    h_next  = h_tilde + K * (E(u) - h_tilde)          (correction)
    K       = tanh(W_h * h_tilde + W_u * E(u) + b_k)

In ``predict`` mode the correction is skipped, which is the same as K = 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .diffops import DiffKernelBank, phi_predict
from .tensor import ShapeError, Tensor

ASSIMILATE = "assimilate"
PREDICT = "predict"


def _uniform_conv(rng, cout, cin, k, dtype):
    bound = 1.0 / math.sqrt(cin * k * k)
    return rng.uniform(-bound, bound, size=(cout, cin, k, k)).astype(dtype)


@dataclass
class GainParams:
    W_h: Tensor
    W_u: Tensor
    b_k: Tensor

    @classmethod
    def create(cls, channels: int, rng: np.random.Generator, k: int = 3, dtype=np.float32):
        return cls(
            T.parameter(_uniform_conv(rng, channels, channels, k, dtype), name="W_h"),
            T.parameter(_uniform_conv(rng, channels, channels, k, dtype), name="W_u"),
            T.parameter(np.zeros(channels, dtype=dtype), name="b_k"),
        )

    @classmethod
    def zeros(cls, channels: int, k: int = 3, bias: float = 0.0, dtype=np.float64):
        return cls(
            T.parameter(np.zeros((channels, channels, k, k), dtype=dtype)),
            T.parameter(np.zeros((channels, channels, k, k), dtype=dtype)),
            T.parameter(np.full(channels, bias, dtype=dtype)),
        )

    def parameters(self) -> dict[str, Tensor]:
        return {"W_h": self.W_h, "W_u": self.W_u, "b_k": self.b_k}


def kalman_gain(h_tilde: Tensor, e_u: Tensor, params: GainParams) -> Tensor:
    if h_tilde.shape != e_u.shape:
        raise ShapeError(f"kalman_gain: h_tilde {h_tilde.shape} vs E(u) {e_u.shape}")
    if params.W_h.shape[0] != h_tilde.shape[1]:
        raise ShapeError(
            f"kalman_gain: gain kernels {params.W_h.shape} do not produce {h_tilde.shape[1]} channels"
        )
    z = T.add(
        T.conv2d(h_tilde, params.W_h, padding="same"),
        T.conv2d(e_u, params.W_u, params.b_k, padding="same"),
    )
    return T.tanh(z)


def phycell_step(
    h: Tensor,
    e_u: Tensor | None,
    bank: DiffKernelBank,
    params: GainParams,
    mode: str = ASSIMILATE,
    gain: Tensor | None = None,
    gain_mask: np.ndarray | None = None,
) -> Tensor:
    """One PhyCell update of the latent state ``h``.

    ``gain`` overrides the learned Kalman gain (used to pin K in tests and
    analyses); it is ignored in predict mode. ``gain_mask`` (0/1, same shape
    as ``h``) multiplies K, switching individual samples to predict mode.
    """
    h_tilde = T.add(h, phi_predict(h, bank))
    if mode == PREDICT:
        return h_tilde
    if mode != ASSIMILATE:
        raise ValueError(f"unknown PhyCell mode {mode!r}")
    if e_u is None:
        raise ShapeError("phycell_step: assimilate mode needs an encoded input")
    if e_u.shape != h.shape:
        raise ShapeError(f"phycell_step: state {h.shape} vs E(u) {e_u.shape}")
    K = kalman_gain(h_tilde, e_u, params) if gain is None else gain
    if gain_mask is not None:
        K = T.mul(K, Tensor(gain_mask.astype(K.dtype, copy=False)))
    # convex form of h_tilde + K * (E(u) - h_tilde): exact at K = 0 and K = 1
    return T.add(T.mul(T.sub(Tensor(np.array(1.0, K.dtype)), K), h_tilde), T.mul(K, e_u))


def phycell_onestep_vs_twostep(
    h: Tensor,
    e_u: Tensor,
    bank: DiffKernelBank,
    params: GainParams,
    gain: Tensor | None = None,
    atol: float = 1e-6,
) -> bool:
    """Check ``(1-K)(h + Phi(h)) + K E(u)`` against ``h_tilde + K (E(u) - h_tilde)``.

    Both forms are evaluated explicitly and compared with ``phycell_step``.
    """
    phi = phi_predict(h, bank).data
    h_tilde = h.data + phi
    K = (kalman_gain(Tensor(h_tilde), e_u, params) if gain is None else gain).data
    one_step = (1.0 - K) * (h.data + phi) + K * e_u.data
    two_step = h_tilde + K * (e_u.data - h_tilde)
    stepped = phycell_step(h, e_u, bank, params, ASSIMILATE, gain=Tensor(K)).data
    close = lambda a, b: np.allclose(a, b, rtol=0.0, atol=atol)
    return bool(close(one_step, two_step) and close(stepped, two_step))


class PhyCell:
    """A stack of PhyCell layers (one by default) sharing the latent width."""

    def __init__(
        self, channels: int, k: int, rng: np.random.Generator, depth: int = 1, dtype=np.float32, combine_bound=0.0
    ):
        # Once the filters approach true high-order stencils, fan-in sized
        # combine weights make h + Phi(h) grow by orders of magnitude per
        # step. Starting at zero makes the initial dynamics a pure carry.
        self.channels = channels
        self.banks = [DiffKernelBank.create(channels, k, rng, dtype, combine_bound) for _ in range(depth)]
        self.gains = [GainParams.create(channels, rng, dtype=dtype) for _ in range(depth)]

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for layer, (bank, gain) in enumerate(zip(self.banks, self.gains)):
            for name, p in {**bank.parameters(), **gain.parameters()}.items():
                out[f"layer{layer}.{name}"] = p
        return out

    def init_state(self, batch: int, height: int, width: int, dtype) -> list[Tensor]:
        return [Tensor(np.zeros((batch, self.channels, height, width), dtype=dtype)) for _ in self.banks]

    def step(self, states: list[Tensor], e_u: Tensor | None, mode: str, gain_mask=None) -> list[Tensor]:
        new, x = [], e_u
        for h, bank, gain in zip(states, self.banks, self.gains):
            h = phycell_step(h, x, bank, gain, mode, gain_mask=gain_mask)
            new.append(h)
            x = h
        return new


@dataclass
class ConvLSTMWeights:
    W: Tensor  # [4*Cr, Cin + Cr, k, k], gate order: input, forget, output, candidate
    b: Tensor

    @classmethod
    def create(cls, cin: int, hidden: int, rng: np.random.Generator, k: int = 3, forget_bias: float = 1.0, dtype=np.float32):
        b = np.zeros(4 * hidden, dtype=dtype)
        b[hidden : 2 * hidden] = forget_bias
        return cls(
            T.parameter(_uniform_conv(rng, 4 * hidden, cin + hidden, k, dtype), name="W"),
            T.parameter(b, name="b"),
        )

    @property
    def hidden(self) -> int:
        return self.W.shape[0] // 4


def convlstm_step(state: tuple[Tensor, Tensor], x: Tensor, weights: ConvLSTMWeights) -> tuple[Tensor, Tensor]:
    h, c = state
    if x.shape[0] != h.shape[0] or x.shape[2:] != h.shape[2:]:
        raise ShapeError(f"convlstm_step: input {x.shape} not aligned with hidden {h.shape}")
    if weights.W.shape[1] != x.shape[1] + h.shape[1]:
        raise ShapeError(f"convlstm_step: weights {weights.W.shape} vs input {x.shape} + hidden {h.shape}")
    gates = T.conv2d(T.concat([x, h], axis=1), weights.W, weights.b, padding="same")
    i, f, o, g = T.chunk(gates, 4, axis=1)
    i, f, o, g = T.sigmoid(i), T.sigmoid(f), T.sigmoid(o), T.tanh(g)
    c_new = T.add(T.mul(f, c), T.mul(i, g))
    h_new = T.mul(o, T.tanh(c_new))
    return h_new, c_new


class ConvLSTM:
    """Stacked ConvLSTM; a 1x1 projection maps the top hidden state to ``out_channels`` when widths differ."""

    def __init__(self, in_channels: int, hidden: int, layers: int, out_channels: int, rng: np.random.Generator, dtype=np.float32):
        self.hidden = hidden
        self.cells = [
            ConvLSTMWeights.create(in_channels if l == 0 else hidden, hidden, rng, dtype=dtype)
            for l in range(layers)
        ]
        self.proj = None
        if hidden != out_channels:
            self.proj = T.parameter(_uniform_conv(rng, out_channels, hidden, 1, dtype), name="proj")

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for l, cell in enumerate(self.cells):
            out[f"layer{l}.W"] = cell.W
            out[f"layer{l}.b"] = cell.b
        if self.proj is not None:
            out["proj"] = self.proj
        return out

    def init_state(self, batch: int, height: int, width: int, dtype):
        zeros = lambda: Tensor(np.zeros((batch, self.hidden, height, width), dtype=dtype))
        return [(zeros(), zeros()) for _ in self.cells]

    def step(self, states, x: Tensor):
        new = []
        for state, cell in zip(states, self.cells):
            h, c = convlstm_step(state, x, cell)
            new.append((h, c))
            x = h
        out = x if self.proj is None else T.conv2d(x, self.proj, padding="valid")
        return new, out
