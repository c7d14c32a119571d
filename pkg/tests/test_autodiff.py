import numpy as np
import pytest

from ecgrecon import autodiff as ad


def numeric_gradient(fn, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar-valued fn at x (the oracle)."""
    grad = np.zeros_like(x, dtype=float)
    flat = x.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn()
        flat[i] = orig - h
        fm = fn()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.abs(a).max(), np.abs(b).max(), 1.0)
    return float(np.abs(a - b).max() / scale)


class TestConv2d:
    def test_single_mac(self):
        x = ad.tensor(np.full((1, 1, 1, 1), 2.0))
        w = ad.tensor(np.full((1, 1, 1, 1), 3.0))
        b = ad.tensor(np.zeros(1))
        out = ad.conv2d(x, w, b)
        assert out.data.shape == (1, 1, 1, 1)
        assert out.data[0, 0, 0, 0] == 6.0

    def test_output_size(self):
        x = ad.tensor(np.random.default_rng(0).standard_normal((1, 3, 5, 5)))
        w = ad.tensor(np.random.default_rng(1).standard_normal((3, 3, 3, 3)))
        out = ad.conv2d(x, w, stride=1, padding=0)
        assert out.data.shape == (1, 3, 3, 3)

    def test_matches_direct_loops(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((2, 3, 5, 4))
        w = rng.standard_normal((4, 3, 3, 3))
        b = rng.standard_normal(4)
        out = ad.conv2d(ad.tensor(x), ad.tensor(w), ad.tensor(b), stride=2, padding=1).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        eh = (5 + 2 - 3) // 2 + 1
        ew = (4 + 2 - 3) // 2 + 1
        ref = np.zeros((2, 4, eh, ew))
        for n in range(2):
            for m in range(4):
                for e in range(eh):
                    for f in range(ew):
                        acc = b[m]
                        for c in range(3):
                            for r in range(3):
                                for s in range(3):
                                    acc += w[m, c, r, s] * xp[n, c, e * 2 + r, f * 2 + s]
                        ref[n, m, e, f] = acc
        assert np.allclose(out, ref, atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_gradients(self, seed):
        rng = np.random.default_rng(seed)
        x = ad.parameter(rng.standard_normal((2, 3, 4, 4)))
        w = ad.parameter(rng.standard_normal((2, 3, 3, 3)))
        b = ad.parameter(rng.standard_normal(2))
        g = rng.standard_normal((2, 2, 4, 4))

        def run():
            return ad.conv2d(x, w, b, stride=1, padding=1)

        run().backward(g)
        for p in (x, w, b):
            analytic = p.grad.copy()
            numeric = numeric_gradient(lambda: float(np.vdot(run().data, g)), p.data)
            assert rel_err(analytic, numeric) < 1e-6

    def test_channel_mismatch_raises(self):
        with pytest.raises(ValueError):
            ad.conv2d(ad.tensor(np.zeros((1, 2, 4, 4))), ad.tensor(np.zeros((1, 3, 3, 3))))


class TestTransposedConv2d:
    @pytest.mark.parametrize("seed", range(5))
    def test_adjoint_identity(self, seed):
        rng = np.random.default_rng(seed)
        x = np.random.default_rng(seed).standard_normal((2, 3, 6, 6))
        w = rng.standard_normal((4, 3, 3, 3))
        y = rng.standard_normal((2, 4, 4, 4))
        lhs = np.vdot(ad.conv2d(ad.tensor(x), ad.tensor(w)).data, y)
        rhs = np.vdot(x, ad.transposed_conv2d(ad.tensor(y), ad.tensor(w)).data)
        assert abs(lhs - rhs) < 1e-10 * max(1.0, abs(lhs))

    def test_adjoint_identity_strided(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal((1, 2, 7, 7))
        w = rng.standard_normal((3, 2, 3, 3))
        y_shape = ad.conv2d(ad.tensor(x), ad.tensor(w), stride=2, padding=1).data.shape
        y = rng.standard_normal(y_shape)
        lhs = np.vdot(ad.conv2d(ad.tensor(x), ad.tensor(w), stride=2, padding=1).data, y)
        rhs = np.vdot(x, ad.transposed_conv2d(ad.tensor(y), ad.tensor(w),
                                              stride=2, padding=1).data)
        assert abs(lhs - rhs) < 1e-10 * max(1.0, abs(lhs))

    def test_pointwise_kernel_preserves_shape(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((2, 4, 5, 5))
        w = rng.standard_normal((4, 3, 1, 1))
        out = ad.transposed_conv2d(ad.tensor(x), ad.tensor(w)).data
        assert out.shape == (2, 3, 5, 5)
        ref = np.einsum("nmhw,mc->nchw", x, w[:, :, 0, 0])
        assert np.allclose(out, ref, atol=1e-12)

    @pytest.mark.parametrize("seed", range(3))
    def test_gradients(self, seed):
        rng = np.random.default_rng(seed + 100)
        x = ad.parameter(rng.standard_normal((1, 3, 4, 4)))
        w = ad.parameter(rng.standard_normal((3, 2, 3, 3)))
        b = ad.parameter(rng.standard_normal(2))
        out_shape = ad.transposed_conv2d(x, w, b, padding=1).data.shape
        g = rng.standard_normal(out_shape)

        def run():
            return ad.transposed_conv2d(x, w, b, padding=1)

        run().backward(g)
        for p in (x, w, b):
            analytic = p.grad.copy()
            numeric = numeric_gradient(lambda: float(np.vdot(run().data, g)), p.data)
            assert rel_err(analytic, numeric) < 1e-6


class TestDepthwiseConv2d:
    def test_matches_per_channel_conv(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((2, 3, 5, 5))
        w = rng.standard_normal((3, 1, 3, 3))
        out = ad.depthwise_conv2d(ad.tensor(x), ad.tensor(w), padding=1).data
        for c in range(3):
            ref = ad.conv2d(ad.tensor(x[:, c:c + 1]), ad.tensor(w[c:c + 1]), padding=1).data
            assert np.allclose(out[:, c:c + 1], ref, atol=1e-12)

    @pytest.mark.parametrize("seed", range(3))
    def test_gradients(self, seed):
        rng = np.random.default_rng(seed + 50)
        x = ad.parameter(rng.standard_normal((2, 3, 4, 4)))
        w = ad.parameter(rng.standard_normal((3, 1, 3, 3)))
        b = ad.parameter(rng.standard_normal(3))
        g = rng.standard_normal((2, 3, 4, 4))

        def run():
            return ad.depthwise_conv2d(x, w, b, padding=1)

        run().backward(g)
        for p in (x, w, b):
            analytic = p.grad.copy()
            numeric = numeric_gradient(lambda: float(np.vdot(run().data, g)), p.data)
            assert rel_err(analytic, numeric) < 1e-6


class TestPointwiseOps:
    def test_relu_values_and_mask(self):
        x = ad.parameter(np.array([-1.0, 0.0, 2.0]))
        out = ad.relu(x)
        assert np.array_equal(out.data, [0.0, 0.0, 2.0])
        out.backward(np.ones(3))
        assert np.array_equal(x.grad, [0.0, 0.0, 1.0])

    def test_maxpool_block(self):
        x = ad.tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
        out = ad.maxpool2(x, window=2, stride=2)
        assert out.data.reshape(-1)[0] == 4.0

    def test_maxpool_tie_breaks_first_index(self):
        x = ad.parameter(np.full((1, 1, 2, 2), 7.0))
        out = ad.maxpool2(x, 2, 2)
        out.backward(np.ones_like(out.data))
        expected = np.zeros((1, 1, 2, 2))
        expected[0, 0, 0, 0] = 1.0  # row-major first position wins ties
        assert np.array_equal(x.grad, expected)

    def test_maxpool_gradient(self):
        rng = np.random.default_rng(8)
        x = ad.parameter(rng.standard_normal((2, 2, 4, 4)))
        g = rng.standard_normal((2, 2, 2, 2))
        ad.maxpool2(x, 2, 2).backward(g)
        analytic = x.grad.copy()
        numeric = numeric_gradient(lambda: float(np.vdot(ad.maxpool2(x, 2, 2).data, g)), x.data)
        assert rel_err(analytic, numeric) < 1e-6

    def test_upsample_nearest(self):
        x = ad.parameter(np.arange(4.0).reshape(1, 1, 2, 2))
        out = ad.upsample_nearest(x, 2)
        assert out.data.shape == (1, 1, 4, 4)
        assert np.array_equal(out.data[0, 0, :2, :2],
                              np.full((2, 2), x.data[0, 0, 0, 0]))
        for i in range(2):
            for j in range(2):
                block = out.data[0, 0, 2 * i:2 * i + 2, 2 * j:2 * j + 2]
                assert np.all(block == x.data[0, 0, i, j])
        out.backward(np.ones((1, 1, 4, 4)))
        assert np.array_equal(x.grad, np.full((1, 1, 2, 2), 4.0))

    def test_add_and_scale_gradients(self):
        rng = np.random.default_rng(9)
        x = ad.parameter(rng.standard_normal((2, 3)))
        y = ad.parameter(rng.standard_normal((2, 3)))
        g = rng.standard_normal((2, 3))
        ad.add(ad.scale(x, 2.5), y).backward(g)
        assert np.allclose(x.grad, 2.5 * g)
        assert np.allclose(y.grad, g)

    def test_add_shape_mismatch(self):
        with pytest.raises(ValueError):
            ad.add(ad.tensor(np.zeros(3)), ad.tensor(np.zeros(4)))

    def test_weighted_sum_gradients(self):
        rng = np.random.default_rng(10)
        xs = [ad.parameter(rng.standard_normal((2, 2))) for _ in range(3)]
        w = ad.parameter(rng.standard_normal(3))
        g = rng.standard_normal((2, 2))
        ad.weighted_sum(xs, w).backward(g)
        for k, x in enumerate(xs):
            assert np.allclose(x.grad, w.data[k] * g)
        expected_w = np.array([np.vdot(x.data, g) for x in xs])
        assert np.allclose(w.grad, expected_w)

    def test_pick(self):
        v = ad.parameter(np.array([1.0, 5.0, 3.0]))
        out = ad.pick(v, 1)
        assert out.item() == 5.0
        out.backward()
        assert np.array_equal(v.grad, [0.0, 1.0, 0.0])


class TestGumbelSoftmax:
    def test_weights_sum_to_one_and_positive(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            logits = ad.tensor(rng.standard_normal(9))
            y = ad.gumbel_softmax(logits, 1.0, rng=rng).data
            assert abs(y.sum() - 1.0) < 1e-12
            assert np.all(y > 0)

    def test_gumbel_max_frequencies(self):
        # argmax of (logits + gumbel) is exactly categorical(softmax(logits))
        rng = np.random.default_rng(42)
        logits = np.array([np.log(0.9), np.log(0.1)])
        n = 100_000
        noise = ad.gumbel_noise(rng, (n, 2))
        freq0 = np.mean(np.argmax(logits[None, :] + noise, axis=1) == 0)
        assert abs(freq0 - 0.9) < 0.01

    def test_low_temperature_is_one_hot(self):
        # a clearly preferred option; near-ties that defeat tau=0.01 need a
        # top-two noise gap under ~0.07, which a logit gap of 4 makes rare
        rng = np.random.default_rng(7)
        logits = ad.tensor(np.array([4.0, 0.0]))
        trials = 2000
        hard = sum(
            ad.gumbel_softmax(logits, 0.01, rng=rng).data.max() > 0.999
            for _ in range(trials)
        )
        assert hard >= 0.99 * trials

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient_with_fixed_noise(self, seed):
        rng = np.random.default_rng(seed)
        logits = ad.parameter(rng.standard_normal(6))
        noise = ad.gumbel_noise(rng, 6)
        g = rng.standard_normal(6)

        def run():
            return ad.gumbel_softmax(logits, 0.7, noise=noise)

        run().backward(g)
        analytic = logits.grad.copy()
        numeric = numeric_gradient(lambda: float(np.vdot(run().data, g)), logits.data)
        assert rel_err(analytic, numeric) < 1e-6


class TestSoftmaxDot:
    def test_uniform_rows_give_mean(self):
        coeffs = np.arange(18.0).reshape(2, 9)
        logits = ad.tensor(np.zeros((2, 9)))
        val = ad.softmax_dot(logits, coeffs).item()
        assert val == pytest.approx(coeffs.mean(axis=1).sum(), abs=1e-12)

    def test_shift_invariance(self):
        rng = np.random.default_rng(3)
        coeffs = rng.uniform(0, 10, (3, 4))
        logits = rng.standard_normal((3, 4))
        base = ad.softmax_dot(ad.tensor(logits), coeffs).item()
        shifted = logits.copy()
        shifted[1] += 137.0
        val = ad.softmax_dot(ad.tensor(shifted), coeffs).item()
        assert abs(val - base) < 1e-12 * max(1.0, abs(base))

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient(self, seed):
        rng = np.random.default_rng(seed)
        logits = ad.parameter(rng.standard_normal((3, 5)))
        coeffs = rng.uniform(0, 4, (3, 5))

        def run():
            return ad.softmax_dot(logits, coeffs)

        run().backward()
        analytic = logits.grad.copy()
        numeric = numeric_gradient(lambda: run().item(), logits.data)
        assert rel_err(analytic, numeric) < 1e-8


class TestPearsonLoss:
    def test_perfect_prediction(self):
        rng = np.random.default_rng(0)
        t = rng.standard_normal((4, 2, 3, 3))
        loss = ad.pearson_loss(ad.tensor(t), t)
        assert loss.item() == pytest.approx(-1.0, abs=1e-12)
        assert loss.degenerate_count == 0

    def test_anti_prediction(self):
        rng = np.random.default_rng(1)
        t = rng.standard_normal((2, 1, 4, 4))
        loss = ad.pearson_loss(ad.tensor(-t), t)
        assert loss.item() == pytest.approx(1.0, abs=1e-12)

    def test_constant_target_flagged(self):
        rng = np.random.default_rng(2)
        pred = ad.tensor(rng.standard_normal((2, 1, 2, 2)))
        target = np.ones((2, 1, 2, 2))
        loss = ad.pearson_loss(pred, target)
        assert loss.item() == 0.0
        assert loss.degenerate_count == 2

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient(self, seed):
        rng = np.random.default_rng(seed)
        pred = ad.parameter(rng.standard_normal((3, 2, 3, 3)))
        target = rng.standard_normal((3, 2, 3, 3))

        def run():
            return ad.pearson_loss(pred, target)

        run().backward()
        analytic = pred.grad.copy()
        numeric = numeric_gradient(lambda: run().item(), pred.data)
        assert rel_err(analytic, numeric) < 1e-6


class TestAdam:
    def test_zero_gradient_leaves_parameters(self):
        p = ad.parameter(np.array([1.0, -2.0]))
        opt = ad.Adam([p], lr=0.1)
        p.grad = np.zeros(2)
        opt.step()
        assert np.array_equal(p.data, [1.0, -2.0])

    def test_first_step_is_lr_sized(self):
        rng = np.random.default_rng(0)
        p = ad.parameter(rng.standard_normal(16))
        before = p.data.copy()
        g = rng.standard_normal(16)
        opt = ad.Adam([p], lr=1e-3)
        p.grad = g.copy()
        opt.step()
        delta = before - p.data
        # bias-corrected first step moves every element by lr in sign(g)
        assert np.abs(np.abs(delta) - 1e-3).max() < 1e-9
        assert np.array_equal(np.sign(delta), np.sign(g))

    def test_quadratic_descent(self):
        p = ad.parameter(np.array(1.0))
        opt = ad.Adam([p], lr=0.1)
        values = [float(p.data ** 2)]
        for _ in range(2):
            p.grad = 2.0 * p.data
            opt.step()
            values.append(float(p.data ** 2))
        assert values[1] < values[0] and values[2] < values[1]

    def test_decoupled_weight_decay(self):
        p = ad.parameter(np.array([2.0]))
        opt = ad.Adam([{"params": [p], "weight_decay": 0.5}], lr=0.1)
        p.grad = np.zeros(1)
        opt.step()
        # pure decay: p -= lr*wd*p
        assert p.data[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0, abs=1e-12)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(5)
        params = {
            "stem.w": ad.parameter(rng.standard_normal((4, 3, 3, 3))),
            "stem.b": ad.parameter(rng.standard_normal(4)),
            "head.w": ad.parameter(rng.standard_normal((2, 4, 1, 1))),
        }
        path = str(tmp_path / "weights.bin")
        ad.save_checkpoint(path, params)
        loaded = ad.load_checkpoint(path)
        assert set(loaded) == set(params)
        for name in params:
            assert np.array_equal(loaded[name], params[name].data)


class TestDeterminism:
    def test_forward_bytes_identical(self):
        def run():
            rng = np.random.default_rng(123)
            x = ad.tensor(rng.standard_normal((2, 3, 8, 8)))
            w = ad.tensor(rng.standard_normal((4, 3, 3, 3)))
            out = ad.relu(ad.conv2d(x, w, padding=1))
            out = ad.maxpool2(out, 2, 2)
            return out.data.tobytes()

        assert run() == run()

    def test_no_grad_skips_tape(self):
        x = ad.parameter(np.ones((1, 1, 2, 2)))
        with ad.no_grad():
            out = ad.relu(x)
        assert out._backward is None and not out.requires_grad
