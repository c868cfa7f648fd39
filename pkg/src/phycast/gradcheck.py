"""Finite-difference checks of every differentiable primitive and of a tiny model.

Each check builds a small random float64 problem and reports the maximum
relative error between reverse-mode and central-difference gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .cells import ConvLSTMWeights, GainParams, PhyCell, convlstm_step, phycell_step
from .config import ModelConfig, PhyCellConfig, ResidualConfig
from .diffops import DiffKernelBank, moment_loss
from .model import PhyDNet
from .tensor import Tensor

TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    error: float
    passed: bool


def _p(rng, *shape, scale=1.0):
    return T.parameter(rng.standard_normal(shape) * scale)


def _weighted(x: Tensor, rng=None) -> Tensor:
    # a fixed random functional (seeded by the shape) keeps every output coordinate in play
    probe = np.random.default_rng([x.ndim, *x.shape]).standard_normal(x.shape)
    return T.sum_all(T.mul(x, Tensor(probe)))


def _primitive_cases(rng):
    yield "add", lambda a, b: _weighted(T.add(a, b)), [_p(rng, 3, 4), _p(rng, 3, 4)]
    yield "sub", lambda a, b: _weighted(T.sub(a, b)), [_p(rng, 3, 4), _p(rng, 3, 4)]
    yield "mul", lambda a, b: _weighted(T.mul(a, b)), [_p(rng, 3, 4), _p(rng, 3, 4)]
    yield "mul_scalar_tensor", lambda a, b: _weighted(T.mul(a, b)), [_p(rng, 3, 4), T.parameter(np.float64(rng.standard_normal()))]
    yield "scale", lambda a: _weighted(T.scale(a, -1.7)), [_p(rng, 3, 4)]
    yield "tanh", lambda a: _weighted(T.tanh(a)), [_p(rng, 3, 4)]
    yield "sigmoid", lambda a: _weighted(T.sigmoid(a)), [_p(rng, 3, 4, scale=3.0)]
    # keep kinks of leaky_relu / |x| away from the sampled points
    away = rng.standard_normal((3, 4))
    away += np.sign(away) * 0.1
    yield "leaky_relu", lambda a: _weighted(T.leaky_relu(a)), [T.parameter(away.copy())]
    yield "absolute", lambda a: _weighted(T.absolute(a)), [T.parameter(away.copy())]
    yield "square", lambda a: _weighted(T.square(a)), [_p(rng, 3, 4)]
    yield "sum_all", lambda a: T.sum_all(T.square(a)), [_p(rng, 2, 3)]
    yield "mean_all", lambda a: T.mean_all(T.square(a)), [_p(rng, 2, 3)]
    yield "reshape", lambda a: _weighted(T.reshape(a, (4, 3))), [_p(rng, 3, 4)]
    yield "swapaxes", lambda a: _weighted(T.swapaxes(a, 0, 2)), [_p(rng, 2, 3, 4)]
    yield "concat", lambda a, b: _weighted(T.concat([a, b], axis=1)), [_p(rng, 2, 3), _p(rng, 2, 2)]
    yield "narrow", lambda a: _weighted(T.narrow(a, 1, 1, 2)), [_p(rng, 2, 4)]
    yield "matmul", lambda a, b: _weighted(T.matmul(a, b)), [_p(rng, 2, 3, 4), _p(rng, 4, 5)]
    yield "frobenius_norm", lambda a: _weighted(T.frobenius_norm(a)), [_p(rng, 2, 3, 3)]
    x = _p(rng, 2, 4, 6, 6)
    yield "conv2d_same_bias", lambda x, w, b: _weighted(T.conv2d(x, w, b, padding="same")), [
        x, _p(rng, 3, 4, 3, 3), _p(rng, 3)]
    yield "conv2d_valid", lambda x, w: _weighted(T.conv2d(x, w, padding="valid")), [
        _p(rng, 2, 2, 6, 6), _p(rng, 3, 2, 3, 3)]
    yield "conv2d_stride2", lambda x, w, b: _weighted(T.conv2d(x, w, b, padding="same", stride=2)), [
        _p(rng, 2, 2, 8, 8), _p(rng, 3, 2, 3, 3), _p(rng, 3)]
    yield "conv2d_groups", lambda x, w: _weighted(T.conv2d(x, w, padding="same", groups=2)), [
        _p(rng, 1, 4, 5, 5), _p(rng, 4, 2, 3, 3)]
    yield "conv2d_1x1", lambda x, w: _weighted(T.conv2d(x, w, padding="valid")), [
        _p(rng, 2, 5, 4, 4), _p(rng, 3, 5, 1, 1)]
    yield "conv2d_transpose_s1", lambda x, w, b: _weighted(T.conv2d_transpose(x, w, b, stride=1, padding=1)), [
        _p(rng, 2, 3, 4, 4), _p(rng, 3, 2, 3, 3), _p(rng, 2)]
    yield "conv2d_transpose_s2", lambda x, w, b: _weighted(
        T.conv2d_transpose(x, w, b, stride=2, padding=1, output_padding=1)), [
        _p(rng, 2, 3, 4, 4), _p(rng, 3, 2, 3, 3), _p(rng, 2)]


def _model_cases(rng):
    bank = DiffKernelBank.create(2, 3, rng, np.float64)
    yield "moment_loss", lambda k: moment_loss(DiffKernelBank(k, bank.combine)), [bank.derivative_kernels]

    cell = PhyCell(2, 3, rng, dtype=np.float64, combine_bound=None)
    gain = cell.gains[0]
    b = cell.banks[0]
    h0 = _p(rng, 1, 2, 5, 5, scale=0.5)
    inputs = [Tensor(rng.standard_normal((1, 2, 5, 5))) for _ in range(2)]

    def unroll(h, kern, comb, wh, wu, bk):
        bk_bank = DiffKernelBank(kern, comb)
        g = GainParams(wh, wu, bk)
        for e in inputs:
            h = phycell_step(h, e, bk_bank, g)
        return _weighted(h)

    yield "phycell_2step", unroll, [h0, b.derivative_kernels, b.combine, gain.W_h, gain.W_u, gain.b_k]

    weights = ConvLSTMWeights.create(2, 3, rng, dtype=np.float64)
    xs = [Tensor(rng.standard_normal((1, 2, 4, 4))) for _ in range(3)]

    def lstm(W, bias):
        state = (Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((1, 3, 4, 4))))
        for x in xs:
            state = convlstm_step(state, x, ConvLSTMWeights(W, bias))
        return _weighted(state[0])

    yield "convlstm_3step", lstm, [weights.W, weights.b]


def tiny_model_config() -> ModelConfig:
    return ModelConfig(
        frame_size=8,
        channels=1,
        latent_channels=2,
        encoder_channels=[2, 2],
        phycell=PhyCellConfig(k=3),
        residual=ResidualConfig(layers=1, channels=2),
    )


def _phydnet_case(rng):
    from .train import total_loss

    model = PhyDNet(tiny_model_config(), seed=3, dtype=np.float64)
    # zero-initialised biases put pre-activations exactly on the leaky-relu kink
    for p in model.parameters().values():
        p.data = p.data + 0.1 * rng.standard_normal(p.shape)
    frames = rng.uniform(0, 1, size=(1, 3, 1, 8, 8))

    def loss(*_):
        out = model.forward(frames[:, :2], 1)
        return total_loss(out.predictions, frames[:, 1:], model.banks, 1.0)[0]

    return "phydnet_T2_D1", loss, list(model.parameters().values())


def run_suite(max_coords: int = 12, seed: int = 0, include_model: bool = True) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    cases = list(_primitive_cases(rng)) + list(_model_cases(rng))
    if include_model:
        cases.append(_phydnet_case(rng))
    results = []
    for name, f, point in cases:
        err = T.gradient_check(f, point, eps=1e-5, max_coords=max_coords, rng=np.random.default_rng(seed))
        results.append(CheckResult(name, err, err <= TOLERANCE))
    return results
