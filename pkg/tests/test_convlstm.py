import math

import numpy as np
import numpy.testing as npt
import pytest

from egoattn import tensor as T
from egoattn.convlstm import (ClipClassifier, ConvLSTMCell, ConvLSTMState,
                              classify_clip, convlstm_step, encode_sequence)
from egoattn.rng import make_rng


def scalar_cell(wx=1.0, wh=1.0, bi=0.0, bf=0.0, bg=0.0, bo=0.0):
    cell = ConvLSTMCell(input_channels=1, hidden_channels=1, kernel_size=1,
                        seed=0, forget_bias=0.0)
    for gate, b in zip("ifgo", (bi, bf, bg, bo)):
        cell.params[f"wx_{gate}"].data[...] = wx
        cell.params[f"wh_{gate}"].data[...] = wh
        cell.params[f"b_{gate}"].data[...] = b
    return cell


def scalar_step_oracle(x, c_prev, h_prev, wx=1.0, wh=1.0):
    """Plain-float recurrence for the 1x1x1 standard update."""
    sig = lambda v: 1.0 / (1.0 + math.exp(-v))
    pre = wx * x + wh * h_prev
    i = f = o = sig(pre)
    g = math.tanh(pre)
    c = i * g + f * c_prev
    h = o * math.tanh(c)
    return c, h


class TestStep:
    def test_zero_network_stays_zero(self):
        cell = ConvLSTMCell(2, 3, seed=0, forget_bias=0.0)
        for t in cell.params.values():
            t.data[...] = 0.0
        st = convlstm_step(cell, T.Tensor(make_rng(0, "z").standard_normal((2, 5, 5))),
                           cell.zero_state((5, 5)))
        npt.assert_array_equal(st.c.data, 0.0)
        npt.assert_array_equal(st.h.data, 0.0)

    def test_scalar_hand_arithmetic(self):
        # gates sigma(0.5)=0.62246, candidate tanh(0.5)=0.46212,
        # c=0.2876491, h=0.1742697 (the h digit sometimes quoted as 0.17405
        # is a rounding slip; the oracle below reproduces the true value)
        cell = scalar_cell()
        st = convlstm_step(cell, T.Tensor(np.full((1, 1, 1), 0.5)),
                           cell.zero_state((1, 1)))
        c, h = scalar_step_oracle(0.5, 0.0, 0.0)
        assert abs(float(st.c.data.reshape(())) - 0.28765) < 1e-5 + 1e-5
        npt.assert_allclose(float(st.c.data.reshape(())), c, atol=1e-12)
        npt.assert_allclose(float(st.h.data.reshape(())), h, atol=1e-12)
        gate = 1.0 / (1.0 + math.exp(-0.5))
        assert abs(gate - 0.62246) < 1e-5

    def test_forget_only_passthrough(self):
        cell = scalar_cell(wx=0.0, wh=0.0, bi=-30.0, bf=30.0)
        c_prev = np.full((1, 1, 1), 0.8)
        st = convlstm_step(cell, T.Tensor(np.zeros((1, 1, 1))),
                           ConvLSTMState(c=T.Tensor(c_prev), h=T.Tensor(np.zeros((1, 1, 1)))))
        assert abs(float(st.c.data.reshape(())) - 0.8) < 1e-6

    def test_verbatim_requires_matching_channels(self):
        cell = ConvLSTMCell(2, 3, seed=0)
        with pytest.raises(ValueError, match="hidden == input"):
            convlstm_step(cell, T.Tensor(np.zeros((2, 4, 4))),
                          cell.zero_state((4, 4)), variant="verbatim")

    def test_verbatim_update_definition(self):
        cell = ConvLSTMCell(2, 2, seed=1, forget_bias=0.0)
        x = make_rng(1, "vb").standard_normal((2, 3, 3))
        st = convlstm_step(cell, T.Tensor(x), cell.zero_state((3, 3)),
                           variant="verbatim")
        pad = cell.kernel_size // 2
        pre = {g: T.conv2d(T.Tensor(x), cell.params[f"wx_{g}"],
                           cell.params[f"b_{g}"], padding=pad).data
               for g in "ifgo"}
        sig = lambda v: 1.0 / (1.0 + np.exp(-v))
        c = np.tanh(pre["g"]) * x + sig(pre["f"]) * 0.0
        h = sig(pre["o"]) * np.tanh(c)
        npt.assert_allclose(st.c.data, c, atol=1e-12)
        npt.assert_allclose(st.h.data, h, atol=1e-12)

    def test_spatial_dims_preserved_and_bounded(self):
        cell = ConvLSTMCell(3, 4, seed=2)
        rng = make_rng(2, "bound")
        st = cell.zero_state((6, 6))
        for _ in range(10):
            st = convlstm_step(cell, T.Tensor(5 * rng.standard_normal((3, 6, 6))), st)
            assert st.c.data.shape == (4, 6, 6)
            assert np.all(np.abs(st.h.data) < 1.0)

    def test_shape_mismatch_raises(self):
        cell = ConvLSTMCell(2, 3, seed=0)
        with pytest.raises(T.DimensionError):
            convlstm_step(cell, T.Tensor(np.zeros((3, 4, 4))), cell.zero_state((4, 4)))


class TestEncodeSequence:
    def test_single_step_base_case(self):
        cell = ConvLSTMCell(2, 3, seed=3)
        x = make_rng(3, "enc").standard_normal((2, 4, 4))
        desc = encode_sequence(cell, [T.Tensor(x)])
        st = convlstm_step(cell, T.Tensor(x), cell.zero_state((4, 4)))
        npt.assert_allclose(desc.data, st.c.data.mean(axis=(1, 2)), atol=1e-14)

    def test_zero_cell_zero_descriptor(self):
        cell = ConvLSTMCell(2, 3, seed=0, forget_bias=0.0)
        for t in cell.params.values():
            t.data[...] = 0.0
        xs = [T.Tensor(make_rng(i, "enc0").standard_normal((2, 4, 4))) for i in range(4)]
        npt.assert_array_equal(encode_sequence(cell, xs).data, 0.0)

    def test_unrolled_oracle_t3(self):
        cell = ConvLSTMCell(2, 3, seed=4)
        rng = make_rng(4, "unroll")
        xs = [T.Tensor(rng.standard_normal((2, 4, 4))) for _ in range(3)]
        desc = encode_sequence(cell, xs)
        st = cell.zero_state((4, 4))
        for x in xs:
            st = convlstm_step(cell, x, st)
        npt.assert_allclose(desc.data, T.global_avg_pool(st.c).data, atol=1e-12)

    def test_empty_sequence_rejected(self):
        cell = ConvLSTMCell(2, 3, seed=0)
        with pytest.raises(ValueError):
            encode_sequence(cell, [])

    def test_bptt_gradient_t3(self):
        cell = ConvLSTMCell(2, 2, seed=5)
        clf = ClipClassifier(2, 3, dropout_rate=0.0, seed=5)
        rng = make_rng(5, "bptt")
        base = [rng.standard_normal((2, 3, 3)) for _ in range(3)]

        def path(t):
            xs = [t, T.Tensor(base[1]), T.Tensor(base[2])]
            desc = encode_sequence(cell, xs)
            return T.cross_entropy(clf(desc), 1)

        assert T.grad_check(path, T.Tensor(base[0])) < 1e-4

    def test_bptt_gradient_verbatim_variant(self):
        cell = ConvLSTMCell(2, 2, seed=6)
        rng = make_rng(6, "bptt-vb")
        base = [rng.standard_normal((2, 3, 3)) for _ in range(3)]

        def path(t):
            xs = [t] + [T.Tensor(b) for b in base[1:]]
            return T.sum_all(encode_sequence(cell, xs, variant="verbatim"))

        assert T.grad_check(path, T.Tensor(base[0])) < 1e-4


class TestClassifyClip:
    def test_eval_mode_deterministic(self):
        clf = ClipClassifier(4, 3, seed=0)
        d = T.Tensor(make_rng(0, "clf").standard_normal(4))
        a = clf(d, train=False).data
        b = clf(d, train=False).data
        npt.assert_array_equal(a, b)

    def test_rate_zero_equals_disabled(self):
        clf = ClipClassifier(4, 3, dropout_rate=0.0, seed=1)
        d = T.Tensor(make_rng(1, "clf").standard_normal(4))
        with_rng = clf(d, rng=make_rng(0, "unused"), train=True).data
        without = clf(d, train=False).data
        npt.assert_array_equal(with_rng, without)

    def test_training_mode_reproducible_given_seed(self):
        clf = ClipClassifier(8, 3, dropout_rate=0.7, seed=2)
        d = T.Tensor(make_rng(2, "clf").standard_normal(8))
        a = clf(d, rng=make_rng(9, "drop"), train=True).data
        b = clf(d, rng=make_rng(9, "drop"), train=True).data
        npt.assert_array_equal(a, b)

    def test_training_without_rng_rejected(self):
        clf = ClipClassifier(4, 3, seed=0)
        with pytest.raises(ValueError):
            clf(T.Tensor(np.zeros(4)), train=True)
