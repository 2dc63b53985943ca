import math

import numpy as np
import pytest

from airtkit import autodiff as ad
from airtkit.autodiff import AdamState, Tensor


def param(values):
    return Tensor(np.asarray(values, dtype=float), requires_grad=True)


class TestConv1d:
    def test_identity_kernel_k1(self):
        x = param([[1.0, -2.0, 3.0]])
        out = ad.conv1d(x, Tensor([[[1.0]]]), Tensor([0.0]))
        assert out.data.tolist() == [[1.0, -2.0, 3.0]]

    def test_identity_kernel_k3(self):
        x = param([[4.0, 5.0, 6.0, 7.0]])
        out = ad.conv1d(x, Tensor([[[0.0, 1.0, 0.0]]]), Tensor([0.0]))
        assert out.data.tolist() == [[4.0, 5.0, 6.0, 7.0]]

    def test_box_kernel_hand_result(self):
        x = param([[1.0, 2.0, 3.0]])
        out = ad.conv1d(x, Tensor([[[1.0, 1.0, 1.0]]]), Tensor([0.0]))
        assert out.data.tolist() == [[3.0, 6.0, 5.0]]

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError):
            ad.conv1d(param([[1.0, 2.0]]), Tensor(np.ones((1, 1, 2))), Tensor([0.0]))

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ValueError):
            ad.conv1d(param(np.ones((3, 5))), Tensor(np.ones((2, 2, 3))), Tensor(np.zeros(2)))


class TestActivations:
    def test_relu_values(self):
        out = ad.relu(param([-2.0, 0.0, 3.0]))
        assert out.data.tolist() == [0.0, 0.0, 3.0]

    def test_sigmoid_at_zero(self):
        assert ad.sigmoid(param([0.0])).data[0] == 0.5

    def test_sigmoid_symmetry(self):
        rng = np.random.default_rng(0)
        x = rng.normal(scale=50, size=64)
        total = ad.sigmoid(Tensor(x)).data + ad.sigmoid(Tensor(-x)).data
        assert np.allclose(total, 1.0, atol=1e-12)

    def test_sigmoid_bounded(self):
        out = ad.sigmoid(Tensor([-1e4, -30.0, 30.0, 1e4])).data
        assert np.all(out >= 0.0) and np.all(out <= 1.0)
        assert 0.0 < out[1] < out[2] < 1.0  # strictly inside away from underflow


class TestLinear:
    def test_identity(self):
        x = param([[1.0, 2.0], [3.0, 4.0]])
        out = ad.linear(x, Tensor(np.eye(2)), Tensor(np.zeros(2)))
        assert np.array_equal(out.data, x.data)

    def test_bias_add(self):
        out = ad.linear(param([1.0, 2.0]), Tensor(np.eye(2)), Tensor([3.0, 4.0]))
        assert out.data.tolist() == [4.0, 6.0]

    def test_bias_gradient_is_ones(self):
        x = Tensor(np.random.default_rng(1).normal(size=(5, 3)))
        w = Tensor(np.random.default_rng(2).normal(size=(3, 4)))
        b = param(np.zeros(4))
        ad.tsum(ad.linear(x, w, b)).backward()
        assert np.array_equal(b.grad, np.full(4, 5.0))


class TestSoftmax:
    def test_equal_logits(self):
        out = ad.softmax(Tensor([1.0, 1.0, 1.0, 1.0]))
        assert np.allclose(out.data, 0.25, atol=1e-15)

    def test_log2_logits(self):
        out = ad.softmax(Tensor([0.0, math.log(2.0)]))
        assert np.allclose(out.data, [1 / 3, 2 / 3], atol=1e-12)

    def test_shift_invariance(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(4, 6))
        a = ad.softmax(Tensor(x), axis=-1).data
        b = ad.softmax(Tensor(x + 100.0), axis=-1).data
        assert np.allclose(a, b, atol=1e-12)

    def test_rows_are_distributions(self):
        rng = np.random.default_rng(4)
        out = ad.softmax(Tensor(rng.normal(scale=30, size=(8, 5))), axis=-1).data
        assert np.all(out > 0)
        assert np.allclose(out.sum(axis=-1), 1.0, atol=1e-12)


def tiny_mha_params(rng, d=4, d_k=2, n_heads=2):
    mk = lambda shape: Tensor(rng.normal(size=shape), requires_grad=True)
    return dict(
        w_q=[mk((d, d_k)) for _ in range(n_heads)],
        w_k=[mk((d, d_k)) for _ in range(n_heads)],
        w_v=[mk((d, d_k)) for _ in range(n_heads)],
        w_o=mk((n_heads * d_k, d)),
        b_o=mk((d,)),
    )


def mha_reference(tokens, w_q, w_k, w_v, w_o, b_o):
    """Loop-over-everything evaluator, independent of the autodiff engine."""
    seq_len = tokens.shape[0]
    heads = []
    for wq, wk, wv in zip(w_q, w_k, w_v):
        d_k = wq.shape[1]
        q, k, v = tokens @ wq, tokens @ wk, tokens @ wv
        head = np.zeros((seq_len, d_k))
        for t in range(seq_len):
            logits = np.array([q[t] @ k[s] / math.sqrt(d_k) for s in range(seq_len)])
            e = np.exp(logits - logits.max())
            weights = e / e.sum()
            for s in range(seq_len):
                head[t] += weights[s] * v[s]
        heads.append(head)
    merged = np.concatenate(heads, axis=1)
    return np.maximum(merged @ w_o + b_o, 0.0)


class TestMultiHeadAttention:
    def test_single_position(self):
        rng = np.random.default_rng(5)
        p = tiny_mha_params(rng)
        tokens = Tensor(rng.normal(size=(1, 4)))
        out, attn = ad.multi_head_attention(tokens, **p, return_weights=True)
        assert np.allclose(attn.data, 1.0)
        v = np.concatenate([tokens.data @ w.data for w in p["w_v"]], axis=1)
        expected = np.maximum(v @ p["w_o"].data + p["b_o"].data, 0.0)
        assert np.allclose(out.data, expected, atol=1e-12)

    def test_zero_queries_give_uniform_attention(self):
        rng = np.random.default_rng(6)
        p = tiny_mha_params(rng)
        for w in p["w_q"] + p["w_k"]:
            w.data[:] = 0.0
        tokens = Tensor(rng.normal(size=(5, 4)))
        out, attn = ad.multi_head_attention(tokens, **p, return_weights=True)
        assert np.allclose(attn.data, 0.2, atol=1e-12)
        mean_v = np.concatenate(
            [tokens.data.mean(axis=0) @ w.data for w in p["w_v"]]
        )
        expected_row = np.maximum(mean_v @ p["w_o"].data + p["b_o"].data, 0.0)
        assert np.allclose(out.data, np.tile(expected_row, (5, 1)), atol=1e-12)

    def test_matches_loop_reference(self):
        rng = np.random.default_rng(7)
        p = tiny_mha_params(rng)
        tokens = Tensor(rng.normal(size=(3, 4)))
        out = ad.multi_head_attention(tokens, **p)
        expected = mha_reference(
            tokens.data,
            [w.data for w in p["w_q"]],
            [w.data for w in p["w_k"]],
            [w.data for w in p["w_v"]],
            p["w_o"].data,
            p["b_o"].data,
        )
        assert np.allclose(out.data, expected, atol=1e-10)

    def test_attention_rows_sum_to_one(self):
        rng = np.random.default_rng(8)
        p = tiny_mha_params(rng)
        tokens = Tensor(rng.normal(size=(2, 6, 4)))
        _, attn = ad.multi_head_attention(tokens, **p, return_weights=True)
        assert np.all(attn.data >= 0)
        assert np.allclose(attn.data.sum(axis=-1), 1.0, atol=1e-12)


class TestLosses:
    def test_identical_inputs(self):
        v = Tensor([1.0, 2.0, 3.0])
        assert ad.mse(v, Tensor([1.0, 2.0, 3.0])).item() == 0.0
        assert ad.cosine_distance(v, Tensor([2.0, 4.0, 6.0])).item() == pytest.approx(0.0, abs=1e-15)

    def test_orthogonal_unit_vectors(self):
        d = ad.cosine_distance(Tensor([1.0, 0.0]), Tensor([0.0, 1.0]))
        assert d.item() == pytest.approx(1.0)

    def test_opposite_vectors(self):
        d = ad.cosine_distance(Tensor([1.0, -2.0]), Tensor([-1.0, 2.0]))
        assert d.item() == pytest.approx(2.0)

    def test_zero_norm_rejected(self):
        with pytest.raises(ValueError):
            ad.cosine_distance(Tensor([0.0, 0.0]), Tensor([1.0, 0.0]))

    def test_mse_shape_mismatch(self):
        with pytest.raises(ValueError):
            ad.mse(Tensor([1.0]), Tensor([1.0, 2.0]))


class TestAdam:
    def test_first_step_size(self):
        p = param([0.0])
        state = AdamState.for_params([p], lr=0.1)
        ad.adam_step([p], [np.array([1.0])], state)
        expected = -0.1 * 1.0 / (1.0 + 1e-8)
        assert p.data[0] == pytest.approx(expected, rel=1e-12)
        assert state.step == 1

    def test_zero_gradients_leave_params_unchanged(self):
        p = param([3.0, -4.0])
        state = AdamState.for_params([p], lr=0.1)
        for _ in range(5):
            ad.adam_step([p], [np.zeros(2)], state)
        assert p.data.tolist() == [3.0, -4.0]

    def test_runs_are_bitwise_reproducible(self):
        def run():
            p = param([1.0, 2.0, 3.0])
            state = AdamState.for_params([p], lr=0.05)
            for i in range(2):
                ad.adam_step([p], [np.array([0.5, -0.25, 1.5]) * (i + 1)], state)
            return p.data.copy()

        assert np.array_equal(run(), run())

    def test_nonfinite_gradient_aborts(self):
        p = param([1.0])
        state = AdamState.for_params([p])
        with pytest.raises(ad.NonFiniteError):
            ad.adam_step([p], [np.array([np.nan])], state)


class TestGradCheck:
    def test_quadratic(self):
        x = param(np.random.default_rng(9).normal(size=6))
        err = ad.grad_check(lambda: ad.mul(ad.tsum(ad.power(x, 2.0)), 0.5), [x])
        assert err < 1e-9

    def test_relu_away_from_kink(self):
        x = param([2.0, -3.0, 1.5])
        err = ad.grad_check(lambda: ad.tsum(ad.power(ad.relu(x), 2.0)), [x])
        assert err < 1e-7

    @pytest.mark.parametrize(
        "name",
        ["conv1d", "linear", "softmax", "sigmoid", "relu", "mse", "cosine", "mha"],
    )
    def test_each_op_passes_isolated_check(self, name):
        rng = np.random.default_rng(hash(name) % 2**32)
        if name == "conv1d":
            x = param(rng.normal(size=(2, 3, 7)))
            w = param(rng.normal(size=(4, 3, 3)))
            b = param(rng.normal(size=4))
            f = lambda: ad.tsum(ad.power(ad.conv1d(x, w, b), 2.0))
            params = [x, w, b]
        elif name == "linear":
            x = param(rng.normal(size=(3, 4)))
            w = param(rng.normal(size=(4, 2)))
            b = param(rng.normal(size=2))
            f = lambda: ad.tsum(ad.power(ad.linear(x, w, b), 2.0))
            params = [x, w, b]
        elif name == "softmax":
            x = param(rng.normal(size=(3, 5)))
            c = Tensor(rng.normal(size=(3, 5)))
            f = lambda: ad.tsum(ad.mul(ad.softmax(x, axis=-1), c))
            params = [x]
        elif name == "sigmoid":
            x = param(rng.normal(size=8))
            f = lambda: ad.tsum(ad.power(ad.sigmoid(x), 3.0))
            params = [x]
        elif name == "relu":
            x = param(rng.normal(size=9) + 0.5)  # keep clear of the kink
            x.data[np.abs(x.data) < 0.01] = 0.5
            f = lambda: ad.tsum(ad.power(ad.relu(x), 2.0))
            params = [x]
        elif name == "mse":
            a = param(rng.normal(size=7))
            b = param(rng.normal(size=7))
            f = lambda: ad.mse(a, b)
            params = [a, b]
        elif name == "cosine":
            a = param(rng.normal(size=5) + 2.0)
            b = param(rng.normal(size=5) + 2.0)
            f = lambda: ad.cosine_distance(a, b)
            params = [a, b]
        else:
            p = tiny_mha_params(rng)
            tokens = param(rng.normal(size=(2, 3, 4)))
            f = lambda: ad.tsum(ad.power(ad.multi_head_attention(tokens, **p), 2.0))
            params = [tokens, *p["w_q"], *p["w_k"], *p["w_v"], p["w_o"], p["b_o"]]
        assert ad.grad_check(f, params) < 1e-6


class TestEngine:
    def test_no_grad_blocks_recording(self):
        x = param([1.0, 2.0])
        with ad.no_grad():
            out = ad.tsum(ad.power(x, 2.0))
        assert out._backward is None and not out.requires_grad

    def test_diamond_graph_accumulates(self):
        x = param([3.0])
        y = ad.add(ad.mul(x, 2.0), ad.mul(x, 5.0))
        ad.tsum(y).backward()
        assert x.grad.tolist() == [7.0]

    def test_reused_tensor_accumulates(self):
        x = param([2.0])
        ad.tsum(ad.mul(x, x)).backward()
        assert x.grad.tolist() == [4.0]

    def test_backward_requires_scalar(self):
        x = param([1.0, 2.0])
        with pytest.raises(ValueError):
            ad.mul(x, 2.0).backward()

    def test_forward_deterministic(self):
        rng = np.random.default_rng(10)
        p = tiny_mha_params(rng)
        tokens = Tensor(rng.normal(size=(2, 5, 4)))
        a = ad.multi_head_attention(tokens, **p).data
        b = ad.multi_head_attention(tokens, **p).data
        assert np.array_equal(a, b)
