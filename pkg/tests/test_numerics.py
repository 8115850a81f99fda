"""Gradient, optimizer and schedule checks for the autograd engine."""

import math

import numpy as np
import pytest

from _oracles import finite_diff_grad, max_rel_err
from stlab.autograd import (
    NonFiniteError,
    Tensor,
    conv1d,
    embedding,
    label_smoothed_xent,
    layer_norm,
    stack_pad,
)
from stlab.optim import AdamState, LrSchedule, adam_step, schedule_lr

GRAD_TOL = 1e-4


def t64(a, rg=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=rg)


class TestBackwardBasics:
    def test_quadratic_gradient(self):
        x = t64([1.0, 2.0, 3.0])
        (x * x).sum().backward()
        np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])

    def test_softmax_sum_is_constant(self):
        x = t64([[0.3, -1.2, 2.0, 0.0]])
        x.softmax().sum().backward()
        np.testing.assert_allclose(x.grad, np.zeros((1, 4)), atol=1e-12)

    def test_non_scalar_loss_rejected(self):
        x = t64([1.0, 2.0])
        with pytest.raises(ValueError):
            (x * x).backward()

    def test_non_finite_detected_with_op_name(self):
        x = t64([1.0, -1.0])
        y = x.log()  # log(-1) -> nan
        with pytest.raises(NonFiniteError) as e:
            y.sum().backward()
        assert e.value.op == "log"

    def test_gradients_accumulate_until_zeroed(self):
        x = t64([1.0, 2.0])
        (x * x).sum().backward()
        (x * x).sum().backward()
        np.testing.assert_allclose(x.grad, [4.0, 8.0])
        x.zero_grad()
        (x * x).sum().backward()
        np.testing.assert_allclose(x.grad, [2.0, 4.0])

    def test_determinism_same_seed_bit_identical(self):
        def run():
            rng = np.random.default_rng(7)
            x = Tensor(rng.normal(size=(4, 5)).astype(np.float32), requires_grad=True)
            w = Tensor(rng.normal(size=(5, 3)).astype(np.float32), requires_grad=True)
            loss = ((x @ w).gelu().softmax()).sum() * 0.5
            loss.backward()
            return loss.item(), x.grad.copy(), w.grad.copy()

        l1, gx1, gw1 = run()
        l2, gx2, gw2 = run()
        assert l1 == l2
        assert np.array_equal(gx1, gx2) and np.array_equal(gw1, gw2)


class TestFiniteDifferenceChecks:
    """Every composite op vs central differences, float64, tol 1e-4."""

    def check(self, build, x0):
        x0 = np.asarray(x0, dtype=np.float64)
        x = Tensor(x0.copy(), requires_grad=True)
        build(x).backward()
        num = finite_diff_grad(lambda a: build(Tensor(a)).item(), x0)
        assert max_rel_err(x.grad, num) <= GRAD_TOL

    def test_matmul_2d(self):
        rng = np.random.default_rng(0)
        b = Tensor(rng.normal(size=(4, 3)))
        self.check(lambda x: ((x @ Tensor(b.data.astype(np.float64))).tanh()).sum(), rng.normal(size=(2, 4)))

    def test_matmul_batched(self):
        rng = np.random.default_rng(1)
        b = rng.normal(size=(2, 3, 4))
        self.check(lambda x: ((x @ Tensor(b)).tanh()).sum(), rng.normal(size=(2, 5, 3)))

    def test_add_broadcast_bias(self):
        rng = np.random.default_rng(2)
        x0 = rng.normal(size=(3,))
        base = Tensor(rng.normal(size=(2, 4, 3)))
        self.check(lambda bias: ((base + bias).gelu()).sum(), x0)

    def test_mul_elementwise(self):
        rng = np.random.default_rng(3)
        other = Tensor(rng.normal(size=(3, 3)))
        self.check(lambda x: ((x * other).exp()).sum(), rng.normal(size=(3, 3)) * 0.3)

    def test_layer_norm(self):
        rng = np.random.default_rng(4)
        g = Tensor(rng.normal(size=(5,)))
        b = Tensor(rng.normal(size=(5,)))
        self.check(lambda x: (layer_norm(x, g, b).tanh()).sum(), rng.normal(size=(2, 5)))

    def test_layer_norm_gain_bias_grads(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.normal(size=(3, 4)))
        g0 = rng.normal(size=(4,))
        b0 = rng.normal(size=(4,))
        g = Tensor(g0.copy(), requires_grad=True)
        b = Tensor(b0.copy(), requires_grad=True)
        (layer_norm(x, g, b).tanh()).sum().backward()
        num_g = finite_diff_grad(lambda a: (layer_norm(x, Tensor(a), Tensor(b0)).tanh()).sum().item(), g0)
        num_b = finite_diff_grad(lambda a: (layer_norm(x, Tensor(g0), Tensor(a)).tanh()).sum().item(), b0)
        assert max_rel_err(g.grad, num_g) <= GRAD_TOL
        assert max_rel_err(b.grad, num_b) <= GRAD_TOL

    def test_softmax(self):
        rng = np.random.default_rng(6)
        w = Tensor(rng.normal(size=(4,)))
        self.check(lambda x: (x.softmax() * w).sum(), rng.normal(size=(2, 4)))

    def test_log_softmax(self):
        rng = np.random.default_rng(7)
        w = Tensor(rng.normal(size=(4,)))
        self.check(lambda x: (x.log_softmax() * w).sum(), rng.normal(size=(2, 4)))

    def test_gelu(self):
        rng = np.random.default_rng(8)
        self.check(lambda x: x.gelu().sum(), rng.normal(size=(7,)))

    def test_relu_away_from_kink(self):
        x0 = np.array([-1.5, -0.4, 0.3, 2.0])
        self.check(lambda x: (x.relu() * x.relu()).sum(), x0)

    def test_getitem(self):
        rng = np.random.default_rng(9)
        self.check(lambda x: (x[1:, ::2].tanh()).sum(), rng.normal(size=(3, 4)))

    def test_embedding_table_grad(self):
        rng = np.random.default_rng(10)
        ids = np.array([0, 2, 2, 1])
        t0 = rng.normal(size=(3, 4))
        table = Tensor(t0.copy(), requires_grad=True)
        (embedding(table, ids).tanh()).sum().backward()
        num = finite_diff_grad(lambda a: (embedding(Tensor(a), ids).tanh()).sum().item(), t0)
        assert max_rel_err(table.grad, num) <= GRAD_TOL

    def test_embedding_out_of_range(self):
        table = Tensor(np.zeros((3, 2)))
        with pytest.raises(IndexError):
            embedding(table, np.array([3]))

    def test_conv1d_all_grads(self):
        rng = np.random.default_rng(11)
        x0 = rng.normal(size=(9, 2))
        w0 = rng.normal(size=(3, 2, 4))
        b0 = rng.normal(size=(4,))
        x = Tensor(x0.copy(), requires_grad=True)
        w = Tensor(w0.copy(), requires_grad=True)
        b = Tensor(b0.copy(), requires_grad=True)
        (conv1d(x, w, b, stride=2).tanh()).sum().backward()
        fx = lambda a: (conv1d(Tensor(a), Tensor(w0), Tensor(b0), 2).tanh()).sum().item()
        fw = lambda a: (conv1d(Tensor(x0), Tensor(a), Tensor(b0), 2).tanh()).sum().item()
        fb = lambda a: (conv1d(Tensor(x0), Tensor(w0), Tensor(a), 2).tanh()).sum().item()
        assert max_rel_err(x.grad, finite_diff_grad(fx, x0)) <= GRAD_TOL
        assert max_rel_err(w.grad, finite_diff_grad(fw, w0)) <= GRAD_TOL
        assert max_rel_err(b.grad, finite_diff_grad(fb, b0)) <= GRAD_TOL

    def test_stack_pad_routes_gradient(self):
        rng = np.random.default_rng(12)
        a0 = rng.normal(size=(2, 3))
        b0 = rng.normal(size=(4, 3))
        a = Tensor(a0.copy(), requires_grad=True)
        b = Tensor(b0.copy(), requires_grad=True)
        stacked, mask = stack_pad([a, b])
        assert mask.tolist() == [[True, True, False, False], [True] * 4]
        (stacked.tanh()).sum().backward()
        # padded region contributes tanh(0)=0 with grad routed nowhere
        num_a = finite_diff_grad(lambda v: np.tanh(v).sum() + np.tanh(b0).sum(), a0)
        assert max_rel_err(a.grad, num_a) <= GRAD_TOL

    def test_mlp_three_layers_vs_finite_differences(self):
        rng = np.random.default_rng(13)
        sizes = [(4, 5), (5, 3), (3, 2)]
        ws = [rng.normal(size=s) / np.sqrt(s[0]) for s in sizes]
        x_in = rng.normal(size=(3, 4))

        def loss_with(ws_np):
            h = Tensor(x_in)
            for w in ws_np[:-1]:
                h = (h @ Tensor(w)).gelu()
            out = h @ Tensor(ws_np[-1])
            return (out.softmax().log() * -1.0).sum()

        params = [Tensor(w.copy(), requires_grad=True) for w in ws]
        h = Tensor(x_in)
        for p in params[:-1]:
            h = (h @ p).gelu()
        ((h @ params[-1]).softmax().log() * -1.0).sum().backward()
        for i, p in enumerate(params):
            def f(a, i=i):
                repl = [w if j != i else a for j, w in enumerate(ws)]
                return loss_with(repl).item()
            assert max_rel_err(p.grad, finite_diff_grad(f, ws[i])) <= GRAD_TOL


class TestLabelSmoothedXent:
    def test_uniform_logits_gives_log_v(self):
        logits = Tensor(np.zeros((5, 4)))
        loss = label_smoothed_xent(logits, np.array([0, 1, 2, 3, 0]), eps=0.1)
        assert loss.item() == pytest.approx(math.log(4), abs=1e-6)

    def test_certain_prediction_eps_zero(self):
        logits = np.full((3, 4), -50.0)
        logits[np.arange(3), [1, 2, 0]] = 50.0
        loss = label_smoothed_xent(Tensor(logits), np.array([1, 2, 0]), eps=0.0)
        assert loss.item() == pytest.approx(0.0, abs=1e-6)

    def test_two_class_hand_formula(self):
        logits = Tensor(np.array([[2.0, 0.0]]))
        loss = label_smoothed_xent(logits, np.array([0]), eps=0.1)
        p0 = 1.0 / (1.0 + math.exp(-2.0))
        expected = -(0.95 * math.log(p0) + 0.05 * math.log(1 - p0))
        assert loss.item() == pytest.approx(expected, abs=1e-6)

    def test_gradient_vs_finite_differences(self):
        rng = np.random.default_rng(14)
        x0 = rng.normal(size=(4, 5))
        targets = np.array([1, 0, 4, 2])
        mask = np.array([True, True, False, True])
        x = Tensor(x0.copy(), requires_grad=True)
        label_smoothed_xent(x, targets, eps=0.1, mask=mask).backward()
        num = finite_diff_grad(
            lambda a: label_smoothed_xent(Tensor(a), targets, eps=0.1, mask=mask).item(), x0)
        assert max_rel_err(x.grad, num) <= GRAD_TOL

    def test_target_out_of_range(self):
        with pytest.raises(IndexError):
            label_smoothed_xent(Tensor(np.zeros((2, 3))), np.array([0, 3]), eps=0.1)

    def test_all_masked_is_error(self):
        with pytest.raises(ValueError):
            label_smoothed_xent(Tensor(np.zeros((2, 3))), np.array([0, 1]), eps=0.1,
                                mask=np.array([False, False]))


class TestAdam:
    def test_first_step_magnitude(self):
        p = {"x": Tensor(np.array([1.0]))}
        st = AdamState(epsilon=1e-12)
        adam_step(p, {"x": np.array([0.5])}, st, lr=1e-3)
        assert p["x"].data[0] == pytest.approx(1.0 - 1e-3, abs=1e-6)
        assert st.step == 1

    def test_zero_gradient_leaves_params(self):
        p = {"x": Tensor(np.array([1.0, -2.0]))}
        st = AdamState()
        adam_step(p, {"x": np.zeros(2)}, st, lr=0.1)
        np.testing.assert_allclose(p["x"].data, [1.0, -2.0])
        assert st.step == 1

    def test_lr_zero_is_identity(self):
        p = {"x": Tensor(np.array([3.0]))}
        st = AdamState()
        adam_step(p, {"x": np.array([1.0])}, st, lr=0.0)
        assert p["x"].data[0] == 3.0

    def test_convex_1d_convergence(self):
        x = Tensor(np.array([0.0]))
        st = AdamState()
        for _ in range(200):
            g = 2.0 * (x.data - 3.0)
            adam_step({"x": x}, {"x": g}, st, lr=0.1)
        assert abs(x.data[0] - 3.0) < 0.05

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            adam_step({"x": Tensor(np.zeros(2))}, {"x": np.zeros(3)}, AdamState(), 0.1)

    def test_non_finite_gradient(self):
        with pytest.raises(ArithmeticError):
            adam_step({"x": Tensor(np.zeros(1))}, {"x": np.array([np.nan])}, AdamState(), 0.1)


class TestLrSchedule:
    def test_peak_at_warmup(self):
        s = LrSchedule(peak_lr=5e-5, warmup_steps=100)
        assert schedule_lr(s, 100) == pytest.approx(5e-5)

    def test_quarter_after(self):
        s = LrSchedule(peak_lr=8.0, warmup_steps=100)
        assert schedule_lr(s, 400) == pytest.approx(4.0)

    def test_half_warmup(self):
        s = LrSchedule(peak_lr=8.0, warmup_steps=100)
        assert schedule_lr(s, 50) == pytest.approx(4.0)

    def test_step_zero_rejected(self):
        with pytest.raises(ValueError):
            schedule_lr(LrSchedule(1.0, 10), 0)

    def test_constant(self):
        s = LrSchedule(peak_lr=0.3, warmup_steps=5, kind="constant")
        assert schedule_lr(s, 1) == schedule_lr(s, 1000) == 0.3

    def test_non_increasing_after_warmup(self):
        s = LrSchedule(peak_lr=1.0, warmup_steps=37)
        vals = [schedule_lr(s, t) for t in range(37, 500)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))
        assert max(vals) == vals[0] == pytest.approx(1.0)
