import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import signal

from overlearn.autodiff import (
    Adam,
    Tensor,
    add,
    clamp_max,
    conv2d,
    dropout,
    flatten,
    grad_reverse,
    matmul,
    maxpool2,
    mul,
    neg,
    no_grad,
    relu,
    softmax_cross_entropy,
)

# ------------------------------------------------------------------
# finite-difference harness (float64 through the same op code paths)
# ------------------------------------------------------------------


def scalarize(t: Tensor, seed: int = 0) -> Tensor:
    """Deterministic weighted sum squeezing any tensor to a 1x1 loss."""
    f = flatten(t) if t.data.ndim != 2 else t
    rng = np.random.default_rng(seed)
    u = Tensor(rng.standard_normal((1, f.shape[0])))
    v = Tensor(rng.standard_normal((f.shape[1], 1)))
    return matmul(matmul(u, f), v)


def fd_grad(build, arrays, idx, eps=1e-3):
    a = arrays[idx]
    g = np.zeros_like(a)
    it = np.nditer(a, flags=["multi_index"])
    for _ in it:
        mi = it.multi_index
        old = a[mi]
        a[mi] = old + eps
        fp = build(*[Tensor(x) for x in arrays]).data.item()
        a[mi] = old - eps
        fm = build(*[Tensor(x) for x in arrays]).data.item()
        a[mi] = old
        g[mi] = (fp - fm) / (2 * eps)
    return g


def gradcheck(build, arrays, rtol=1e-3, atol=1e-6):
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = build(*tensors)
    loss.backward()
    for k, t in enumerate(tensors):
        numeric = fd_grad(build, arrays, k)
        assert t.grad is not None, f"input {k} got no gradient"
        np.testing.assert_allclose(
            t.grad, numeric, rtol=rtol, atol=atol, err_msg=f"input {k}"
        )


def away_from_kink(rng, shape, margin=0.05):
    a = rng.standard_normal(shape)
    return a + margin * np.sign(a)


def safe_draw(seed, make, ok):
    """Redraw until the sample keeps every relu/pool decision stable
    under the +-eps probes of the finite-difference check."""
    for attempt in range(100):
        rng = np.random.default_rng((seed, attempt))
        sample = make(rng)
        if ok(sample):
            return sample
    raise RuntimeError("no kink-safe draw found")


def pool_windows(z):
    n, c, h, w = z.shape
    h2, w2 = h // 2, w // 2
    return (
        z[:, :, : h2 * 2, : w2 * 2]
        .reshape(n, c, h2, 2, w2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h2, w2, 4)
    )


# ------------------------------------------------------------------
# per-op gradient checks
# ------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(5))
def test_grad_matmul_bias(seed):
    rng = np.random.default_rng(seed)
    gradcheck(
        lambda x, w, b: scalarize(add(matmul(x, w), b), seed),
        [rng.standard_normal((4, 3)), rng.standard_normal((3, 5)), rng.standard_normal(5)],
    )


@pytest.mark.parametrize("seed", range(5))
def test_grad_relu(seed):
    rng = np.random.default_rng(seed)
    gradcheck(
        lambda x: scalarize(relu(x), seed),
        [away_from_kink(rng, (3, 4))],
    )


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("padding", ["same", "valid"])
def test_grad_conv2d(seed, padding):
    rng = np.random.default_rng(seed)
    gradcheck(
        lambda x, w, b: scalarize(conv2d(x, w, b, padding), seed),
        [
            rng.standard_normal((2, 3, 6, 6)),
            rng.standard_normal((4, 3, 3, 3)) * 0.5,
            rng.standard_normal(4),
        ],
    )


@pytest.mark.parametrize("seed", range(3))
def test_grad_maxpool(seed):
    rng = np.random.default_rng(seed)
    # distinct well-separated values so the argmax never flips under +-eps
    vals = rng.permutation(2 * 2 * 6 * 6).astype(np.float64).reshape(2, 2, 6, 6) * 0.1
    gradcheck(lambda x: scalarize(maxpool2(x), seed), [vals])


@pytest.mark.parametrize("seed", range(3))
def test_grad_dropout(seed):
    def build(x):
        rng = np.random.default_rng(999)
        return scalarize(dropout(x, 0.4, rng, training=True), seed)

    data = np.random.default_rng(seed).standard_normal((5, 8))
    gradcheck(build, [data])


@pytest.mark.parametrize("seed", range(5))
def test_grad_softmax_ce_index_targets(seed):
    rng = np.random.default_rng(seed)
    targets = rng.integers(0, 7, size=5)
    gradcheck(
        lambda z: softmax_cross_entropy(z, targets),
        [rng.standard_normal((5, 7))],
    )


@pytest.mark.parametrize("seed", range(3))
def test_grad_softmax_ce_soft_targets(seed):
    rng = np.random.default_rng(seed)
    soft = rng.random((4, 6))
    soft /= soft.sum(axis=1, keepdims=True)
    gradcheck(
        lambda z: softmax_cross_entropy(z, soft),
        [rng.standard_normal((4, 6))],
    )


@pytest.mark.parametrize("seed", range(3))
def test_grad_scalar_arithmetic(seed):
    rng = np.random.default_rng(seed)
    t1 = rng.integers(0, 5, size=6)
    t2 = rng.integers(0, 5, size=6)

    def build(a, b):
        l1 = softmax_cross_entropy(a, t1)
        l2 = softmax_cross_entropy(b, t2)
        return add(mul(l1, 0.3), neg(mul(l2, 0.7)))

    gradcheck(build, [rng.standard_normal((6, 5)), rng.standard_normal((6, 5))])


@pytest.mark.parametrize("seed", range(3))
def test_grad_clamp_max(seed):
    rng = np.random.default_rng(seed)
    # keep samples off the cap so the subgradient is unambiguous
    a = rng.standard_normal((4, 4))
    a = np.where(np.abs(a - 0.5) < 0.05, a + 0.2, a)
    gradcheck(lambda x: scalarize(clamp_max(x, 0.5), seed), [a])


@pytest.mark.parametrize("seed", range(20))
def test_grad_two_layer_mlp(seed):
    def make(rng):
        arrays = [
            rng.standard_normal((8, 6)),
            rng.standard_normal((6, 16)) * 0.5,
            rng.standard_normal(16) * 0.1,
            rng.standard_normal((16, 5)) * 0.5,
            rng.standard_normal(5) * 0.1,
        ]
        return arrays, rng.integers(0, 5, size=8)

    def ok(sample):
        (x, w1, b1, _, _), _ = sample
        return np.abs(x @ w1 + b1).min() > 5e-3

    arrays, targets = safe_draw(seed, make, ok)

    def build(x_, w1, b1, w2, b2):
        h = relu(add(matmul(x_, w1), b1))
        return softmax_cross_entropy(add(matmul(h, w2), b2), targets)

    gradcheck(build, arrays)


@pytest.mark.parametrize("seed", range(3))
def test_grad_conv_net(seed):
    def make(rng):
        arrays = [
            rng.standard_normal((2, 1, 8, 8)),
            rng.standard_normal((3, 1, 3, 3)) * 0.5,
            rng.standard_normal(3) * 0.1,
            rng.standard_normal((3 * 4 * 4, 4)) * 0.3,
            rng.standard_normal(4) * 0.1,
        ]
        return arrays, rng.integers(0, 4, size=2)

    def ok(sample):
        (x, w, b, _, _), _ = sample
        z = conv2d(Tensor(x), Tensor(w), Tensor(b), "same").data
        if np.abs(z).min() <= 6e-3:
            return False
        win = np.sort(pool_windows(z), axis=-1)
        top, second = win[..., 3], win[..., 2]
        # each window: clear positive winner, or entirely below zero
        return bool(np.all((top - second > 2e-2) | (top < -6e-3)))

    arrays, targets = safe_draw(seed, make, ok)

    def build(x_, w, b, wf, bf):
        h = maxpool2(relu(conv2d(x_, w, b, "same")))
        return softmax_cross_entropy(add(matmul(flatten(h), wf), bf), targets)

    gradcheck(build, arrays)


@pytest.mark.parametrize("seed", range(5))
def test_grad_weighted_two_head_objective(seed):
    """lam * preserved CE minus (1-lam) * suppression CE, shared trunk."""
    lam = 0.5

    def make(rng):
        x = rng.standard_normal((6, 4))
        arrays = [
            rng.standard_normal((4, 8)) * 0.5,
            rng.standard_normal((8, 3)) * 0.5,
            rng.standard_normal((8, 4)) * 0.5,
        ]
        return arrays, x, rng.integers(0, 3, size=6), rng.integers(0, 4, size=6)

    def ok(sample):
        (w, _, _), x, _, _ = sample
        return np.abs(x @ w).min() > 5e-3

    arrays, x_data, tp, ts = safe_draw(seed, make, ok)
    x = Tensor(x_data)

    def build(w, hp, hs):
        h = relu(matmul(x, w))
        lp = softmax_cross_entropy(matmul(h, hp), tp)
        ls = softmax_cross_entropy(matmul(h, hs), ts)
        return add(mul(lp, lam), mul(ls, -(1.0 - lam)))

    gradcheck(build, arrays)


# ------------------------------------------------------------------
# forward values
# ------------------------------------------------------------------


def test_relu_values():
    out = relu(Tensor([-1.0, 2.0]))
    np.testing.assert_array_equal(out.data, [0.0, 2.0])


def test_uniform_softmax_ce_is_log3():
    loss = softmax_cross_entropy(Tensor([[0.0, 0.0, 0.0]]), np.asarray([1]))
    assert abs(float(loss.data) - np.log(3)) < 1e-6


def test_ce_equals_neg_log_prob():
    rng = np.random.default_rng(0)
    z = rng.standard_normal((6, 4))
    t = rng.integers(0, 4, size=6)
    loss = softmax_cross_entropy(Tensor(z), t)
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    expected = -np.log(p[np.arange(6), t]).mean()
    assert abs(float(loss.data) - expected) < 1e-6


@given(st.lists(st.floats(-20, 20), min_size=8, max_size=8))
@settings(max_examples=50, deadline=None)
def test_ce_nonnegative(flat):
    z = np.asarray(flat, dtype=np.float64).reshape(2, 4)
    loss = softmax_cross_entropy(Tensor(z), np.asarray([0, 3]))
    assert float(loss.data) >= 0.0


def test_conv2d_matches_scipy():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 7, 7)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    b = rng.standard_normal(4).astype(np.float32)
    for mode in ("same", "valid"):
        out = conv2d(Tensor(x), Tensor(w), Tensor(b), mode)
        ref = np.zeros(out.shape)
        for n in range(2):
            for f in range(4):
                acc = sum(
                    signal.correlate2d(x[n, c], w[f, c], mode=mode)
                    for c in range(3)
                )
                ref[n, f] = acc + b[f]
        np.testing.assert_allclose(out.data, ref, rtol=1e-4, atol=1e-4)


def test_maxpool_values_and_odd_crop():
    x = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
    out = maxpool2(Tensor(x))
    np.testing.assert_array_equal(out.data[0, 0], [[5, 7], [13, 15]])
    odd = maxpool2(Tensor(np.arange(25, dtype=np.float32).reshape(1, 1, 5, 5)))
    assert odd.shape == (1, 1, 2, 2)
    np.testing.assert_array_equal(odd.data[0, 0], [[6, 8], [16, 18]])


def test_clamp_max_values():
    x = Tensor([-2.0, 0.1, 5.0])
    np.testing.assert_allclose(clamp_max(x, 1.5).data, [-2.0, 0.1, 1.5])


def test_flatten_round_trip():
    x = Tensor(np.arange(24, dtype=np.float32).reshape(2, 3, 2, 2), requires_grad=True)
    f = flatten(x)
    assert f.shape == (2, 12)
    loss = scalarize(f)
    loss.backward()
    assert x.grad.shape == x.data.shape


# ------------------------------------------------------------------
# gradient reversal: bit-exact contracts
# ------------------------------------------------------------------


class TestGradReverse:
    def test_forward_identity_bit_exact(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.standard_normal((7, 3)).astype(np.float32))
        out = grad_reverse(x, alpha=0.37)
        assert out.data.tobytes() == x.data.tobytes()

    @pytest.mark.parametrize("alpha", [0.0, 0.25, 1.0, 2.5])
    def test_backward_minus_alpha_bit_exact(self, alpha):
        rng = np.random.default_rng(6)
        x = Tensor(rng.standard_normal((4, 5)).astype(np.float32), requires_grad=True)
        out = grad_reverse(x, alpha)
        out.grad = rng.standard_normal((4, 5)).astype(np.float32)
        out._backward()
        assert x.grad.tobytes() == (-alpha * out.grad).tobytes()

    def test_alpha_zero_contributes_exact_zero(self):
        rng = np.random.default_rng(7)
        w = Tensor(rng.standard_normal((3, 4)).astype(np.float32), requires_grad=True)
        x = Tensor(rng.standard_normal((2, 3)).astype(np.float32))
        targets = np.asarray([1, 2])

        h = matmul(x, w)
        plain = softmax_cross_entropy(h, targets)
        plain.backward()
        base = w.grad.copy()

        w.grad = None
        h = matmul(x, w)
        main = softmax_cross_entropy(h, targets)
        side = softmax_cross_entropy(grad_reverse(h, 0.0), targets)
        add(main, side).backward()
        assert w.grad.tobytes() == base.tobytes()

    def test_negative_alpha_rejected(self):
        with pytest.raises(ValueError):
            grad_reverse(Tensor([1.0]), -0.5)

    def test_gr_route_matches_negated_loss_route(self):
        """Same trunk gradient whether suppression is realized by a GR node
        on the head input or by subtracting the head loss directly."""
        rng = np.random.default_rng(8)
        lam = 0.6
        x = rng.standard_normal((6, 4))
        wt = rng.standard_normal((4, 8)) * 0.5
        hp = rng.standard_normal((8, 3)) * 0.5
        hs = rng.standard_normal((8, 4)) * 0.5
        tp = rng.integers(0, 3, size=6)
        ts = rng.integers(0, 4, size=6)

        def run(route):
            w = Tensor(wt.copy(), requires_grad=True)
            hp_t = Tensor(hp.copy(), requires_grad=True)
            hs_t = Tensor(hs.copy(), requires_grad=True)
            h = relu(matmul(Tensor(x), w))
            lp = softmax_cross_entropy(matmul(h, hp_t), tp)
            if route == "gr":
                ls = softmax_cross_entropy(
                    matmul(grad_reverse(h, 1.0 - lam), hs_t), ts
                )
                total = add(mul(lp, lam), ls)
            else:
                ls = softmax_cross_entropy(matmul(h, hs_t), ts)
                total = add(mul(lp, lam), mul(ls, -(1.0 - lam)))
            total.backward()
            return w.grad, hp_t.grad, hs_t.grad

        gw_a, gp_a, gs_a = run("gr")
        gw_b, gp_b, gs_b = run("neg")
        np.testing.assert_allclose(gw_a, gw_b, rtol=1e-9, atol=1e-12)
        np.testing.assert_allclose(gp_a, gp_b, rtol=1e-9, atol=1e-12)
        # heads differ by construction: GR trains the head (+dLs), the
        # negated route anti-trains it by -(1-lam) dLs
        np.testing.assert_allclose(gs_a, gs_b * (-1.0 / (1.0 - lam)), rtol=1e-9, atol=1e-12)


# ------------------------------------------------------------------
# dropout behavior
# ------------------------------------------------------------------


class TestDropout:
    def test_eval_mode_is_identity(self):
        x = Tensor(np.random.default_rng(0).standard_normal((10, 10)))
        assert dropout(x, 0.5, np.random.default_rng(1), training=False) is x
        assert dropout(x, 0.0, np.random.default_rng(1), training=True) is x

    def test_train_mode_zero_fraction(self):
        rng = np.random.default_rng(42)
        n = 10_000
        p = 0.3
        x = Tensor(np.ones(n, dtype=np.float32))
        out = dropout(x, p, rng, training=True)
        dropped = int((out.data == 0).sum())
        sigma = np.sqrt(n * p * (1 - p))
        assert abs(dropped - n * p) < 4 * sigma

    def test_kept_units_scaled(self):
        rng = np.random.default_rng(3)
        x = Tensor(np.ones(1000, dtype=np.float32))
        out = dropout(x, 0.25, rng, training=True)
        kept = out.data[out.data != 0]
        np.testing.assert_allclose(kept, 1.0 / 0.75, rtol=1e-6)

    def test_same_stream_same_mask(self):
        x = Tensor(np.ones((8, 8), dtype=np.float32))
        a = dropout(x, 0.5, np.random.default_rng(9), training=True)
        b = dropout(x, 0.5, np.random.default_rng(9), training=True)
        assert a.data.tobytes() == b.data.tobytes()

    @pytest.mark.parametrize("p", [-0.1, 1.0, 1.5])
    def test_bad_rate_rejected(self, p):
        with pytest.raises(ValueError):
            dropout(Tensor([1.0]), p, np.random.default_rng(0), training=True)


# ------------------------------------------------------------------
# graph mechanics
# ------------------------------------------------------------------


class TestGraph:
    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            relu(x).backward()

    def test_matmul_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape mismatch"):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))

    def test_conv_channel_mismatch(self):
        with pytest.raises(ValueError, match="channels"):
            conv2d(
                Tensor(np.ones((1, 2, 5, 5))),
                Tensor(np.ones((3, 4, 3, 3))),
                Tensor(np.ones(3)),
            )

    def test_ce_target_mismatch(self):
        with pytest.raises(ValueError, match="shape mismatch"):
            softmax_cross_entropy(Tensor(np.ones((4, 3))), np.asarray([0, 1]))

    def test_fanout_accumulates(self):
        x = Tensor(np.asarray([2.0]), requires_grad=True)
        y = add(mul(x, 2.0), mul(x, 3.0))
        y.backward()
        np.testing.assert_allclose(x.grad, [5.0])

    def test_shared_subgraph(self):
        x = Tensor(np.asarray([1.0, -1.0]), requires_grad=True)
        h = relu(x)
        y = add(h, h)
        loss = matmul(Tensor(np.ones((1, 2))), _colview(y))
        loss.backward()
        np.testing.assert_allclose(x.grad, [2.0, 0.0])

    def test_default_dtype_is_float32(self):
        assert Tensor([1, 2, 3]).dtype == np.float32
        assert Tensor(np.ones(3, dtype=np.float64)).dtype == np.float64

    def test_backward_releases_graph_structure(self):
        x = Tensor(np.asarray([3.0]), requires_grad=True)
        h = mul(x, 2.0)
        loss = matmul(Tensor(np.ones((1, 1))), _colview(h))
        loss.backward()
        np.testing.assert_allclose(x.grad, [2.0])
        assert loss._prev == () and h._prev == ()

    def test_no_grad_builds_no_graph(self):
        w = Tensor(np.ones((2, 2)), requires_grad=True)
        x = Tensor(np.eye(2))
        with no_grad():
            out = relu(matmul(x, w))
        assert not out.requires_grad
        assert out._prev == ()
        np.testing.assert_array_equal(out.data, relu(matmul(x, w)).data)

    def test_no_grad_restores_mode(self):
        w = Tensor(np.ones(1), requires_grad=True)
        with no_grad():
            assert not mul(w, 2.0).requires_grad
        assert mul(w, 2.0).requires_grad

    def test_no_grad_restores_mode_after_error(self):
        w = Tensor(np.ones(1), requires_grad=True)
        with pytest.raises(RuntimeError):
            with no_grad():
                raise RuntimeError("boom")
        assert mul(w, 2.0).requires_grad


def _colview(t: Tensor) -> Tensor:
    out = Tensor(t.data.reshape(-1, 1), _prev=(t,), op="colview")

    def _backward():
        t.accumulate(out.grad.reshape(t.data.shape))

    out._backward = _backward
    return out


# ------------------------------------------------------------------
# Adam
# ------------------------------------------------------------------


class TestAdam:
    def test_zero_grad_leaves_params(self):
        p = Tensor(np.asarray([1.0, 2.0]), requires_grad=True)
        opt = Adam([p])
        before = p.data.copy()
        for _ in range(5):
            opt.step()  # grad is None
        np.testing.assert_array_equal(p.data, before)

    def test_first_step_hand_value(self):
        p = Tensor(np.asarray([0.0], dtype=np.float64), requires_grad=True)
        opt = Adam([p], lr=1e-4)
        p.grad = np.asarray([1.0])
        opt.step()
        # t=1: mhat = vhat = 1 exactly, so delta = -lr / (1 + eps)
        expected = -1e-4 / (1.0 + 1e-8)
        assert abs(float(p.data[0]) - expected) < 1e-12
        assert abs(float(p.data[0]) + 9.9999999e-5) < 1e-11

    def test_deterministic_runs_bit_identical(self):
        def run():
            rng = np.random.default_rng(11)
            w = Tensor(rng.standard_normal((4, 3)).astype(np.float32), requires_grad=True)
            x = Tensor(rng.standard_normal((8, 4)).astype(np.float32))
            t = rng.integers(0, 3, size=8)
            opt = Adam([w], lr=1e-3)
            for _ in range(100):
                opt.zero_grad()
                softmax_cross_entropy(matmul(x, w), t).backward()
                opt.step()
            return w.data.tobytes()

        assert run() == run()

    def test_state_round_trip_resumes_bitwise(self):
        rng = np.random.default_rng(12)
        w0 = rng.standard_normal((5, 2)).astype(np.float32)
        x = Tensor(rng.standard_normal((6, 5)).astype(np.float32))
        t = rng.integers(0, 2, size=6)

        def steps(w, opt, k):
            for _ in range(k):
                opt.zero_grad()
                softmax_cross_entropy(matmul(x, w), t).backward()
                opt.step()

        w_a = Tensor(w0.copy(), requires_grad=True)
        opt_a = Adam([w_a], lr=1e-3)
        steps(w_a, opt_a, 50)

        w_b = Tensor(w0.copy(), requires_grad=True)
        opt_b = Adam([w_b], lr=1e-3)
        steps(w_b, opt_b, 30)
        snap_param = w_b.data.copy()
        snap_state = opt_b.state_dict()

        w_c = Tensor(snap_param, requires_grad=True)
        opt_c = Adam([w_c], lr=1e-3)
        opt_c.load_state_dict(snap_state)
        steps(w_c, opt_c, 20)
        assert w_c.data.tobytes() == w_a.data.tobytes()

    def test_state_mismatch_rejected(self):
        p = Tensor(np.ones(3), requires_grad=True)
        opt = Adam([p])
        with pytest.raises(ValueError):
            opt.load_state_dict({"t": 1, "m": [], "v": []})
