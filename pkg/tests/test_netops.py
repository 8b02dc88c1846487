import numpy as np
import pytest
import torch

from pseudovol import netops
from pseudovol.netops import (conv2d, conv3d, dense, grad_check, maxpool, relu,
                              sigmoid, upsample)


def t(a):
    return torch.as_tensor(np.asarray(a), dtype=torch.float64)


def conv2d_loop_oracle(x, w, b):
    B, C, H, W = x.shape
    K, _, kh, kw = w.shape
    ph, pw = kh // 2, kw // 2
    out = np.zeros((B, K, H, W))
    for bi in range(B):
        for k in range(K):
            for i in range(H):
                for j in range(W):
                    acc = b[k]
                    for c in range(C):
                        for di in range(kh):
                            for dj in range(kw):
                                ii, jj = i + di - ph, j + dj - pw
                                if 0 <= ii < H and 0 <= jj < W:
                                    acc += x[bi, c, ii, jj] * w[k, c, di, dj]
                    out[bi, k, i, j] = acc
    return out


def conv3d_loop_oracle(x, w, b):
    B, C, D, H, W = x.shape
    K, _, kd, kh, kw = w.shape
    pd, ph, pw = kd // 2, kh // 2, kw // 2
    out = np.zeros((B, K, D, H, W))
    for bi in range(B):
        for k in range(K):
            for z in range(D):
                for i in range(H):
                    for j in range(W):
                        acc = b[k]
                        for c in range(C):
                            for dz in range(kd):
                                for di in range(kh):
                                    for dj in range(kw):
                                        zz, ii, jj = z + dz - pd, i + di - ph, j + dj - pw
                                        if 0 <= zz < D and 0 <= ii < H and 0 <= jj < W:
                                            acc += x[bi, c, zz, ii, jj] * w[k, c, dz, di, dj]
                        out[bi, k, z, i, j] = acc
    return out


class TestConv2D:
    def test_identity_kernel(self, rng):
        x = t(rng.standard_normal((1, 1, 4, 4)))
        w = t(np.ones((1, 1, 1, 1)))
        b = t(np.zeros(1))
        assert torch.allclose(conv2d(x, w, b), x)

    def test_ones_kernel_interior(self):
        x = t(np.full((1, 1, 5, 5), 2.0))
        w = t(np.ones((1, 1, 3, 3)))
        b = t(np.zeros(1))
        out = conv2d(x, w, b)
        assert out[0, 0, 2, 2].item() == pytest.approx(18.0)

    def test_against_loop_oracle(self, rng):
        x = rng.standard_normal((1, 2, 5, 5))
        w = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        out = conv2d(t(x), t(w), t(b)).numpy()
        assert np.abs(out - conv2d_loop_oracle(x, w, b)).max() < 1e-6

    def test_channel_mismatch(self):
        with pytest.raises(ValueError, match="channel"):
            conv2d(t(np.zeros((1, 2, 3, 3))), t(np.zeros((1, 3, 1, 1))), t(np.zeros(1)))

    def test_even_kernel_rejected_for_same_padding(self):
        with pytest.raises(ValueError, match="odd"):
            conv2d(t(np.zeros((1, 1, 4, 4))), t(np.zeros((1, 1, 2, 2))), t(np.zeros(1)))

    def test_linearity_in_input(self, rng):
        w = t(rng.standard_normal((2, 1, 3, 3)))
        b = t(np.zeros(2))
        x = t(rng.standard_normal((1, 1, 6, 6)))
        y = t(rng.standard_normal((1, 1, 6, 6)))
        lhs = conv2d(2.0 * x + 3.0 * y, w, b)
        rhs = 2.0 * conv2d(x, w, b) + 3.0 * conv2d(y, w, b)
        assert torch.allclose(lhs, rhs, atol=1e-6)


class TestConv3D:
    def test_identity_kernel(self, rng):
        x = t(rng.standard_normal((1, 1, 3, 3, 3)))
        out = conv3d(x, t(np.ones((1, 1, 1, 1, 1))), t(np.zeros(1)))
        assert torch.allclose(out, x)

    def test_ones_kernel_interior(self):
        x = t(np.full((1, 1, 5, 5, 5), 3.0))
        out = conv3d(x, t(np.ones((1, 1, 3, 3, 3))), t(np.zeros(1)))
        assert out[0, 0, 2, 2, 2].item() == pytest.approx(81.0)

    def test_against_loop_oracle(self, rng):
        x = rng.standard_normal((1, 2, 3, 4, 4))
        w = rng.standard_normal((2, 2, 3, 3, 3))
        b = rng.standard_normal(2)
        out = conv3d(t(x), t(w), t(b)).numpy()
        assert np.abs(out - conv3d_loop_oracle(x, w, b)).max() < 1e-6


class TestPooling:
    def test_constant_input(self):
        x = t(np.full((1, 1, 4, 4), 2.5))
        assert (maxpool(x, (2, 2)) == 2.5).all()

    def test_forced_max(self):
        x = t(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        assert maxpool(x, (2, 2)).item() == 4.0

    def test_against_loop_oracle(self, rng):
        x = rng.standard_normal((2, 3, 4, 6))
        out = maxpool(t(x), (2, 3)).numpy()
        for bi in range(2):
            for c in range(3):
                for i in range(2):
                    for j in range(2):
                        expect = x[bi, c, 2 * i : 2 * i + 2, 3 * j : 3 * j + 3].max()
                        assert out[bi, c, i, j] == expect

    def test_3d_window(self, rng):
        x = rng.standard_normal((1, 1, 4, 4, 4))
        out = maxpool(t(x), (2, 2, 2)).numpy()
        assert out.shape == (1, 1, 2, 2, 2)
        assert out[0, 0, 0, 0, 0] == x[0, 0, :2, :2, :2].max()

    def test_non_divisible_rejected(self):
        with pytest.raises(ValueError, match="divisible"):
            maxpool(t(np.zeros((1, 1, 5, 4))), (2, 2))


class TestUpsample:
    def test_factor_one_identity(self, rng):
        x = t(rng.standard_normal((1, 1, 3, 3)))
        assert torch.equal(upsample(x, (1, 1)), x)

    def test_forced_replication(self):
        x = t(np.array([[[[1.0, 2.0]]]]))
        out = upsample(x, (2, 2)).numpy()[0, 0]
        assert np.array_equal(out, [[1, 1, 2, 2], [1, 1, 2, 2]])

    def test_pool_of_upsample_returns_original(self, rng):
        x = t(rng.standard_normal((1, 2, 3, 4)))
        assert torch.equal(maxpool(upsample(x, (2, 2)), (2, 2)), x)

    def test_bad_factor(self):
        with pytest.raises(ValueError, match="factor"):
            upsample(t(np.zeros((1, 1, 2, 2))), (0, 2))


class TestDenseAndActivations:
    def test_identity_weights(self, rng):
        x = t(rng.standard_normal((2, 3)))
        assert torch.allclose(dense(x, t(np.eye(3)), t(np.zeros(3))), x)

    def test_zero_weights_broadcast_bias(self):
        x = t(np.ones((2, 3)))
        b = t(np.array([1.0, 2.0]))
        out = dense(x, t(np.zeros((2, 3))), b)
        assert torch.allclose(out, b.expand(2, 2))

    def test_dense_loop_oracle(self, rng):
        x = rng.standard_normal((2, 4))
        w = rng.standard_normal((3, 4))
        b = rng.standard_normal(3)
        out = dense(t(x), t(w), t(b)).numpy()
        expect = np.array([[sum(x[i, n] * w[m, n] for n in range(4)) + b[m]
                            for m in range(3)] for i in range(2)])
        assert np.abs(out - expect).max() < 1e-6

    def test_sigmoid_values(self, rng):
        assert sigmoid(t(0.0)).item() == pytest.approx(0.5)
        x = t(rng.standard_normal(10))
        assert torch.allclose(sigmoid(x) + sigmoid(-x), torch.ones(10, dtype=torch.float64))
        xs = np.linspace(-20, 20, 41)
        out = sigmoid(t(xs)).numpy()
        assert np.allclose(out, 1.0 / (1.0 + np.exp(-xs)))
        assert (np.diff(out) > 0).all()

    def test_relu(self, rng):
        x = rng.standard_normal(50)
        out = relu(t(x)).numpy()
        assert np.array_equal(out, np.maximum(0, x))


class TestShapeContracts:
    @pytest.mark.parametrize("seed", range(5))
    def test_randomized_shapes(self, seed):
        rng = np.random.default_rng(seed)
        B, C, K = rng.integers(1, 3, 3)
        H, W = 2 * rng.integers(2, 5, 2)
        x = t(rng.standard_normal((B, C, H, W)))
        w = t(rng.standard_normal((K, C, 3, 3)))
        assert conv2d(x, w, t(np.zeros(K))).shape == (B, K, H, W)
        assert maxpool(x, (2, 2)).shape == (B, C, H // 2, W // 2)
        assert upsample(x, (2, 3)).shape == (B, C, 2 * H, 3 * W)
        n, m = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        assert dense(t(rng.standard_normal((B, n))), t(rng.standard_normal((m, n))),
                     t(np.zeros(m))).shape == (B, m)


class TestGradCheck:
    def test_dense_passes(self, rng):
        inputs = {"x": rng.standard_normal((2, 4)), "w": rng.standard_normal((3, 4)),
                  "b": rng.standard_normal(3)}
        rep = grad_check(dense, inputs, h=1e-5, tol=1e-4, op_name="dense")
        assert rep.passed, rep

    def test_conv3d_passes(self, rng):
        inputs = {"x": rng.standard_normal((1, 1, 4, 6, 6)),
                  "w": rng.standard_normal((2, 1, 3, 3, 3)),
                  "b": rng.standard_normal(2)}
        rep = grad_check(conv3d, inputs, h=1e-5, tol=1e-4, op_name="conv3d")
        assert rep.max_rel_error < 1e-4

    def test_corrupted_gradient_fails(self, rng):
        class ScaleOneGrad(torch.autograd.Function):
            @staticmethod
            def forward(ctx, w):
                return w

            @staticmethod
            def backward(ctx, g):
                g = g.clone()
                g.reshape(-1)[0] *= 1.1  # corrupt one weight's gradient by +10%
                return g

        def corrupted(x, w, b):
            return dense(x, ScaleOneGrad.apply(w), b)

        inputs = {"x": rng.standard_normal((2, 4)), "w": rng.standard_normal((3, 4)),
                  "b": rng.standard_normal(3)}
        rep = grad_check(corrupted, inputs, h=1e-5, tol=1e-4, op_name="corrupted")
        assert not rep.passed

    def test_nonfinite_rejected(self):
        def blows_up(x):
            return torch.log(x)

        with pytest.raises(ValueError, match="non-finite"):
            grad_check(blows_up, {"x": np.array([-1.0])}, op_name="log")
