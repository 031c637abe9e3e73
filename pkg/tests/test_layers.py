import numpy as np
import pytest

from adaptive_depth import tensor as T
from adaptive_depth.gradcheck import TOLERANCE, finite_difference_check, to_float64
from adaptive_depth.layers import (
    BasicBlock,
    BatchNorm2d,
    Conv2d,
    LayerNorm,
    Linear,
    MultiHeadAttention,
    SwitchableNorm,
    TransformerBlock,
)
from adaptive_depth.tensor import ShapeError, Tensor


def snapshot(norm, mode):
    return (
        norm.gamma[mode].data.copy(),
        norm.beta[mode].data.copy(),
        norm.running_mean[mode].copy(),
        norm.running_var[mode].copy(),
    )


def same(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a, b))


class TestSwitchableNorm:
    def test_exactly_two_sets(self):
        norm = SwitchableNorm(4)
        assert len(norm.gamma) == len(norm.beta) == len(norm.running_mean) == len(norm.running_var) == 2
        assert len(SwitchableNorm(4, "layernorm").gamma) == 2

    def test_sets_start_identical(self):
        norm = SwitchableNorm(3)
        assert same(snapshot(norm, 0), snapshot(norm, 1))
        np.testing.assert_array_equal(norm.running_var[0], 1.0)

    def test_training_output_is_standardized(self, rng):
        norm = SwitchableNorm(3)
        x = Tensor(rng.normal(2.0, 3.0, size=(16, 3, 4, 4)))
        out = norm(x, 1, training=True).data
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-4)
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-4)

    @pytest.mark.parametrize("active", [0, 1])
    def test_mode_isolation(self, rng, active):
        norm = SwitchableNorm(3)
        other = 1 - active
        before = snapshot(norm, other)
        for _ in range(5):
            norm(Tensor(rng.normal(size=(4, 3, 2, 2))), active, training=True)
        norm(Tensor(rng.normal(size=(4, 3, 2, 2))), active, training=False)
        assert same(before, snapshot(norm, other))
        assert not np.array_equal(norm.running_mean[active], before[2])

    def test_running_mean_converges_in_selected_mode(self, rng):
        norm = SwitchableNorm(2)
        for _ in range(100):
            norm(Tensor(rng.normal(3.0, 1.0, size=(32, 2, 4, 4))), 1, training=True)
        np.testing.assert_allclose(norm.running_mean[1], 3.0, atol=0.1)
        np.testing.assert_array_equal(norm.running_mean[0], 0.0)

    def test_momentum_recursion(self, rng):
        norm = SwitchableNorm(2)
        expected_mean, expected_var = np.zeros(2), np.ones(2)
        for _ in range(4):
            x = rng.normal(1.0, 2.0, size=(8, 2, 3, 3))
            norm(Tensor(x), 0, training=True)
            flat = x.transpose(1, 0, 2, 3).reshape(2, -1)
            expected_mean = 0.9 * expected_mean + 0.1 * flat.mean(axis=1)
            expected_var = 0.9 * expected_var + 0.1 * flat.var(axis=1, ddof=1)
        np.testing.assert_allclose(norm.running_mean[0], expected_mean, rtol=1e-5)
        np.testing.assert_allclose(norm.running_var[0], expected_var, rtol=1e-5)
        assert np.all(norm.running_var[0] > 0)

    def test_eval_uses_running_stats(self):
        norm = SwitchableNorm(1)
        norm.running_mean[1][:] = 2.0
        norm.running_var[1][:] = 4.0
        x = Tensor(np.full((2, 1, 1, 1), 6.0))
        np.testing.assert_allclose(norm(x, 1).data, 2.0, atol=1e-4)
        np.testing.assert_allclose(norm(x, 0).data, 6.0, atol=1e-4)

    def test_invalid_mode(self):
        with pytest.raises(ValueError, match="mode"):
            SwitchableNorm(2)(Tensor(np.zeros((2, 2, 1, 1))), 2)

    def test_feature_mismatch(self):
        with pytest.raises(ShapeError):
            SwitchableNorm(2)(Tensor(np.zeros((2, 3, 1, 1))), 0, training=True)

    def test_layernorm_kind_uses_selected_params(self, rng):
        norm = SwitchableNorm(4, "layernorm")
        norm.beta[1].data[:] = 5.0
        x = Tensor(rng.normal(size=(2, 3, 4)))
        np.testing.assert_allclose(norm(x, 1).data.mean(axis=-1), 5.0, atol=1e-5)
        np.testing.assert_allclose(norm(x, 0).data.mean(axis=-1), 0.0, atol=1e-5)

    def test_plain_norms_ignore_mode(self, rng):
        x = Tensor(rng.normal(size=(4, 3, 2, 2)))
        bn = BatchNorm2d(3)
        np.testing.assert_array_equal(bn(x, 0).data, bn(x, 1).data)
        ln = LayerNorm(2)
        np.testing.assert_array_equal(ln(x, 0).data, ln(x, 1).data)


class TestBasicBlock:
    def test_shape_preserved(self, rng):
        blk = BasicBlock(4, 4, rng=rng)
        assert blk(Tensor(rng.normal(size=(2, 4, 6, 6)))).shape == (2, 4, 6, 6)
        assert not blk.downsamples

    def test_downsampling_block_shape(self, rng):
        blk = BasicBlock(4, 8, stride=2, rng=rng)
        assert blk.downsamples
        assert blk(Tensor(rng.normal(size=(2, 4, 6, 6)))).shape == (2, 8, 3, 3)

    def test_zero_final_scale_is_exact_identity(self, rng):
        blk = BasicBlock(3, 3, switchable=True, rng=rng)
        for mode in (0, 1):
            blk.norm2.gamma[mode].data[:] = 0.0
        x = Tensor(rng.normal(size=(2, 3, 5, 5)))
        for mode in (0, 1):
            for training in (False, True):
                assert np.array_equal(blk(x, mode, training).data, x.data)

    def test_zero_final_conv_is_exact_identity_in_eval(self, rng):
        blk = BasicBlock(3, 3, rng=rng)
        blk.conv2.weight.data[:] = 0.0
        x = Tensor(rng.normal(size=(2, 3, 5, 5)))
        assert np.array_equal(blk(x).data, x.data)

    def test_mode_reaches_switchable_norms_only(self, rng):
        blk = BasicBlock(3, 3, switchable=True, rng=rng)
        blk.norm2.beta[1].data[:] = 1.0
        x = Tensor(rng.normal(size=(2, 3, 4, 4)))
        diff = blk(x, 1).data - blk(x, 0).data
        np.testing.assert_allclose(diff, 1.0, atol=1e-5)

    def test_gradcheck_two_conv_block(self, rng):
        blk = to_float64(BasicBlock(2, 2, rng=rng))
        x = Tensor(rng.normal(size=(2, 2, 4, 4)), dtype=np.float64)
        r = rng.normal(size=(2, 2, 4, 4))
        f = lambda _: T.sum(T.mul(blk(x, 0, training=True), Tensor(r, dtype=np.float64)))
        assert finite_difference_check(f, x) < TOLERANCE
        assert finite_difference_check(f, blk.conv1.weight) < TOLERANCE

    def test_probe_sees_input_and_branch(self, rng):
        blk = BasicBlock(3, 3, rng=rng)
        x = Tensor(rng.normal(size=(1, 3, 4, 4)))
        seen = []
        out = blk(x, probe=lambda h, fh: seen.append((h.data, fh.data)))
        h, fh = seen[0]
        np.testing.assert_allclose(out.data, h + fh, rtol=1e-6)


class TestAttention:
    def test_single_token_weight_is_one(self, rng):
        mha = MultiHeadAttention(8, 2, rng=rng)
        x = Tensor(rng.normal(size=(3, 1, 8)))
        out = mha(x)
        np.testing.assert_array_equal(mha.last_attention, 1.0)
        # attention over one token reduces to out(v(x)): a linear map of x
        v = (x.data @ mha.qkv.weight.data.T + mha.qkv.bias.data)[..., 16:]
        np.testing.assert_allclose(out.data, v @ mha.out.weight.data.T + mha.out.bias.data, rtol=1e-5, atol=1e-6)

    def test_rows_sum_to_one(self, rng):
        mha = MultiHeadAttention(8, 2, rng=rng)
        for p in mha.parameters():
            p.data *= 30
        mha(Tensor(rng.normal(size=(2, 5, 8))))
        np.testing.assert_allclose(mha.last_attention.sum(axis=-1), 1.0, atol=1e-5)

    def test_gradcheck(self, rng):
        mha = to_float64(MultiHeadAttention(8, 2, rng=rng))
        for p in mha.parameters():
            p.data = p.data * 25
        x = Tensor(rng.normal(size=(1, 4, 8)), dtype=np.float64)
        r = rng.normal(size=(1, 4, 8))
        f = lambda _: T.sum(T.mul(mha(x), Tensor(r, dtype=np.float64)))
        assert finite_difference_check(f, x) < TOLERANCE
        assert finite_difference_check(f, mha.qkv.weight) < TOLERANCE

    def test_dim_mismatch(self, rng):
        with pytest.raises(ValueError):
            MultiHeadAttention(10, 3)
        with pytest.raises(ShapeError):
            MultiHeadAttention(8, 2)(Tensor(np.zeros((1, 2, 6))))

    def test_transformer_block_preserves_shape(self, rng):
        blk = TransformerBlock(8, 2, switchable=True, rng=rng)
        x = Tensor(rng.normal(size=(2, 5, 8)))
        assert blk(x, 1).shape == (2, 5, 8)


def test_linear_param_count():
    lin = Linear(10, 5)
    assert sum(p.size for p in lin.parameters()) == 55
    assert lin.macs() == 50


def test_conv_macs_formula():
    conv = Conv2d(1, 1, 3, padding=1)
    assert conv.macs(8, 8) == 576
    assert conv.output_hw(8, 8) == (8, 8)


def test_state_dict_round_trip_and_errors(rng):
    blk = BasicBlock(2, 4, stride=2, switchable=True, rng=rng)
    state = blk.state_dict()
    assert "norm1.gamma.1" in state and "norm1.running_var.0" in state
    other = BasicBlock(2, 4, stride=2, switchable=True, rng=np.random.default_rng(99))
    other.load_state_dict(state)
    for k, v in other.state_dict().items():
        assert np.array_equal(v, state[k])
    with pytest.raises(KeyError):
        other.load_state_dict({k: v for k, v in state.items() if k != "conv1.weight"})
    bad = dict(state)
    bad["conv1.weight"] = np.zeros((1, 1, 1, 1), np.float32)
    with pytest.raises(ShapeError):
        other.load_state_dict(bad)
