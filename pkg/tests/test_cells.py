import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from phycast import tensor as T
from phycast.cells import (
    ASSIMILATE,
    PREDICT,
    ConvLSTM,
    ConvLSTMWeights,
    GainParams,
    PhyCell,
    convlstm_step,
    kalman_gain,
    phycell_onestep_vs_twostep,
    phycell_step,
)
from phycast.diffops import DiffKernelBank, phi_predict
from phycast.tensor import ShapeError, Tensor


def rand(rng, *shape):
    return Tensor(rng.standard_normal(shape))


def test_zero_gain_params_give_zero_gain():
    rng = np.random.default_rng(0)
    K = kalman_gain(rand(rng, 1, 2, 4, 4), rand(rng, 1, 2, 4, 4), GainParams.zeros(2))
    assert np.all(K.data == 0.0)


def test_large_bias_saturates_gain():
    rng = np.random.default_rng(0)
    K = kalman_gain(rand(rng, 1, 2, 4, 4), rand(rng, 1, 2, 4, 4), GainParams.zeros(2, bias=50.0))
    assert np.allclose(K.data, 1.0)


def test_inverse_tanh_bias_gives_half_gain():
    K = kalman_gain(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), GainParams.zeros(1, bias=0.5493))
    assert np.allclose(K.data, 0.5, atol=1e-4)
    assert math.isclose(math.atanh(0.5), 0.5493, abs_tol=1e-4)


def test_gain_within_open_interval():
    rng = np.random.default_rng(2)
    params = GainParams.create(3, rng, dtype=np.float64)
    K = kalman_gain(rand(rng, 2, 3, 5, 5), rand(rng, 2, 3, 5, 5), params)
    assert np.all(np.abs(K.data) < 1)


def test_gain_shape_mismatch():
    with pytest.raises(ShapeError):
        kalman_gain(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 2, 5, 4))), GainParams.zeros(2))


def _bank(rng, cp=2, k=3):
    return DiffKernelBank.create(cp, k, rng, np.float64)


def test_unit_gain_resets_to_input():
    rng = np.random.default_rng(3)
    h, e = rand(rng, 1, 2, 5, 5), rand(rng, 1, 2, 5, 5)
    out = phycell_step(h, e, _bank(rng), GainParams.zeros(2), ASSIMILATE, gain=Tensor(np.ones(h.shape)))
    assert np.array_equal(out.data, e.data)


def test_predict_with_zero_phi_is_fixed_point():
    rng = np.random.default_rng(4)
    bank = _bank(rng)
    bank.combine.data[:] = 0
    h = rand(rng, 1, 2, 5, 5)
    assert np.array_equal(phycell_step(h, None, bank, GainParams.zeros(2), PREDICT).data, h.data)


def test_scalar_prediction_correction_arithmetic():
    # 1x1 field, k = 1: Phi(h) = c * h; with h = 2 and c = 0.25, Phi = 0.5
    bank = DiffKernelBank(T.parameter(np.ones((1, 1, 1, 1))), T.parameter(np.full((1, 1, 1, 1), 0.25)))
    h, e = Tensor(np.full((1, 1, 1, 1), 2.0)), Tensor(np.full((1, 1, 1, 1), 3.0))
    out = phycell_step(h, e, bank, GainParams.zeros(1, k=1), ASSIMILATE, gain=Tensor(np.full((1, 1, 1, 1), 0.5)))
    assert out.data.item() == 2.75


def test_assimilate_needs_input():
    rng = np.random.default_rng(5)
    with pytest.raises(ShapeError):
        phycell_step(rand(rng, 1, 2, 4, 4), None, _bank(rng), GainParams.zeros(2), ASSIMILATE)


def test_predict_ignores_input():
    rng = np.random.default_rng(6)
    bank, params = _bank(rng), GainParams.create(2, rng, dtype=np.float64)
    h = rand(rng, 1, 2, 4, 4)
    a = phycell_step(h, rand(rng, 1, 2, 4, 4), bank, params, PREDICT).data
    b = phycell_step(h, None, bank, params, PREDICT).data
    assert np.array_equal(a, b)


def test_predict_is_bit_identical_to_forced_zero_gain():
    rng = np.random.default_rng(7)
    bank, params = _bank(rng), GainParams.create(2, rng, dtype=np.float64)
    h, e = rand(rng, 2, 2, 6, 6), rand(rng, 2, 2, 6, 6)
    pred = phycell_step(h, e, bank, params, PREDICT).data
    forced = phycell_step(h, e, bank, params, ASSIMILATE, gain=Tensor(np.zeros(h.shape))).data
    assert pred.tobytes() == forced.tobytes()


def test_gain_mask_switches_samples_to_predict():
    rng = np.random.default_rng(8)
    bank, params = _bank(rng), GainParams.create(2, rng, dtype=np.float64)
    h, e = rand(rng, 2, 2, 5, 5), rand(rng, 2, 2, 5, 5)
    keep = np.zeros(h.shape)
    keep[0] = 1
    mixed = phycell_step(h, e, bank, params, ASSIMILATE, gain_mask=keep).data
    full = phycell_step(h, e, bank, params, ASSIMILATE).data
    pred = phycell_step(h, None, bank, params, PREDICT).data
    assert np.array_equal(mixed[0], full[0])
    assert np.array_equal(mixed[1], pred[1])


def test_onestep_twostep_examples():
    rng = np.random.default_rng(9)
    bank, params = _bank(rng), GainParams.create(2, rng, dtype=np.float64)
    h, e = rand(rng, 1, 2, 5, 5), rand(rng, 1, 2, 5, 5)
    assert phycell_onestep_vs_twostep(h, e, bank, params)
    assert phycell_onestep_vs_twostep(h, e, bank, params, gain=Tensor(np.zeros(h.shape)))
    assert phycell_onestep_vs_twostep(h, e, bank, params, gain=Tensor(np.ones(h.shape)))
    hp = h.data + phi_predict(h, bank).data
    assert np.allclose(phycell_step(h, e, bank, params, gain=Tensor(np.zeros(h.shape))).data, hp)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**16), alpha=st.floats(-4, 4))
def test_predict_mode_is_linear(seed, alpha):
    rng = np.random.default_rng(seed)
    bank = _bank(rng)
    h = rand(rng, 1, 2, 5, 5)
    params = GainParams.zeros(2)
    lhs = phycell_step(Tensor(alpha * h.data), None, bank, params, PREDICT).data
    rhs = alpha * phycell_step(h, None, bank, params, PREDICT).data
    assert np.allclose(lhs, rhs, atol=1e-10)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**16))
def test_onestep_twostep_property(seed):
    rng = np.random.default_rng(seed)
    bank, params = _bank(rng), GainParams.create(2, rng, dtype=np.float64)
    assert phycell_onestep_vs_twostep(rand(rng, 1, 2, 4, 4), rand(rng, 1, 2, 4, 4), bank, params)


def test_phycell_two_step_unroll_gradient():
    rng = np.random.default_rng(10)
    cell = PhyCell(2, 3, rng, dtype=np.float64, combine_bound=None)
    inputs = [rand(rng, 1, 2, 5, 5) for _ in range(2)]
    probe = Tensor(rng.standard_normal((1, 2, 5, 5)))

    def f(*_):
        states = cell.init_state(1, 5, 5, np.float64)
        for e in inputs:
            states = cell.step(states, e, ASSIMILATE)
        return T.sum_all(T.mul(states[-1], probe))

    assert T.gradient_check(f, list(cell.parameters().values())) <= 1e-4


def test_stacked_phycell_shapes_and_names():
    rng = np.random.default_rng(11)
    cell = PhyCell(3, 3, rng, depth=2, dtype=np.float64)
    states = cell.step(cell.init_state(2, 4, 4, np.float64), rand(rng, 2, 3, 4, 4), ASSIMILATE)
    assert len(states) == 2 and all(s.shape == (2, 3, 4, 4) for s in states)
    assert "layer1.combine" in cell.parameters()


# -- ConvLSTM ----------------------------------------------------------------


def test_convlstm_zero_weights():
    w = ConvLSTMWeights(T.parameter(np.zeros((8, 4, 3, 3))), T.parameter(np.zeros(8)))
    zeros = Tensor(np.zeros((1, 2, 4, 4)))
    h, c = convlstm_step((zeros, zeros), Tensor(np.ones((1, 2, 4, 4))), w)
    assert np.all(h.data == 0) and np.all(c.data == 0)


def test_convlstm_gate_values_match_hand_formula():
    # zero kernels: i = f = o = sigmoid(b), g = tanh(b_g)
    rng = np.random.default_rng(12)
    b = np.array([0.3, -0.4, 1.1, 0.7])
    w = ConvLSTMWeights(T.parameter(np.zeros((4, 2, 3, 3))), T.parameter(b))
    c0 = rng.standard_normal((1, 1, 3, 3))
    h, c = convlstm_step((Tensor(np.zeros((1, 1, 3, 3))), Tensor(c0)), Tensor(np.zeros((1, 1, 3, 3))), w)
    sig = lambda z: 1 / (1 + math.exp(-z))
    c_ref = sig(-0.4) * c0 + sig(0.3) * math.tanh(0.7)
    assert np.allclose(c.data, c_ref)
    assert np.allclose(h.data, sig(1.1) * np.tanh(c_ref))


def test_convlstm_memory_preserved_at_saturation():
    b = np.array([-60.0, 60.0, 0.0, 0.0])
    w = ConvLSTMWeights(T.parameter(np.zeros((4, 2, 3, 3))), T.parameter(b))
    c0 = np.random.default_rng(13).standard_normal((1, 1, 3, 3))
    _, c = convlstm_step((Tensor(np.zeros((1, 1, 3, 3))), Tensor(c0)), Tensor(np.ones((1, 1, 3, 3))), w)
    assert np.allclose(c.data, c0)


def test_convlstm_three_step_gradient():
    rng = np.random.default_rng(14)
    lstm = ConvLSTM(2, 3, 2, 2, rng, dtype=np.float64)
    xs = [rand(rng, 1, 2, 4, 4) for _ in range(3)]
    probe = Tensor(rng.standard_normal((1, 2, 4, 4)))

    def f(*_):
        states = lstm.init_state(1, 4, 4, np.float64)
        for x in xs:
            states, out = lstm.step(states, x)
        return T.sum_all(T.mul(out, probe))

    assert T.gradient_check(f, list(lstm.parameters().values())) <= 1e-4


def test_convlstm_shape_errors():
    w = ConvLSTMWeights.create(2, 3, np.random.default_rng(0), dtype=np.float64)
    zeros = Tensor(np.zeros((1, 3, 4, 4)))
    with pytest.raises(ShapeError):
        convlstm_step((zeros, zeros), Tensor(np.zeros((1, 2, 5, 4))), w)
    with pytest.raises(ShapeError):
        convlstm_step((zeros, zeros), Tensor(np.zeros((1, 3, 4, 4))), w)
