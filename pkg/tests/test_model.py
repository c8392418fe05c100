import numpy as np
import pytest

from odenet import autodiff as ad
from odenet.autodiff import Tensor, backward
from odenet.data import Observation, PathologySpec, Trajectory, generate_corpus
from odenet.errors import ConfigError, RolloutError
from odenet.model import ChannelScaling, LearnedRhs, integrate_gap, rk4_step
from odenet.nn import init_weights
from odenet.systems import BfParams, bf_growth_rates, make_system, urp_kinetics
from odenet.training import RolloutConfig, build_model, load_checkpoint, save_checkpoint

from conftest import assert_grad_close, central_diff_grad


class OracleNet:
    """Duck-typed stand-in for an Mlp that computes a closed-form map."""

    def __init__(self, in_width, out_width, fn):
        self.in_width = in_width
        self.out_width = out_width
        self._fn = fn

    def __call__(self, x):
        return self._fn(x)


def urp_oracle_net():
    def fn(x):
        return urp_kinetics(x[:, 0:1], x[:, 1:2], x[:, 2:3])

    return OracleNet(3, 1, fn)


def bf_oracle_net(p=BfParams()):
    def fn(x):
        u, v, g = x[:, 3:4], x[:, 4:5], x[:, 5:6]
        mu1, mu2, mu3 = bf_growth_rates(u, v, g, p)
        return ad.concat([mu1 * x[:, 0:1], mu2 * x[:, 1:2], mu3 * x[:, 2:3]], axis=1)

    return OracleNet(6, 3, fn)


class TestComposers:
    def test_urp_gray_oracle_reproduces_the_truth_rhs(self):
        rhs = LearnedRhs(urp_oracle_net(), "GRAY_FUNCTIONAL", "URP")
        rng = np.random.default_rng(0)
        states = rng.uniform([-0.2, 0.0], [1.2, 6.0], size=(1000, 2))
        da = rng.uniform(0.2, 0.5, size=(1000, 1))
        truth = np.stack(
            [make_system("URP", da=float(d[0])).rhs(s) for s, d in zip(states, da)]
        )
        pred = rhs.rhs_physical(states, da)
        assert np.max(np.abs(pred - truth)) <= 1e-12

    def test_bf_gray_oracle_reproduces_the_truth_rhs(self):
        rhs = LearnedRhs(bf_oracle_net(), "GRAY_FUNCTIONAL", "BF")
        rng = np.random.default_rng(1)
        states = rng.uniform(0.0, [30, 5, 5, 250, 100, 8], size=(1000, 6))
        truth = make_system("BF").rhs(states)
        pred = rhs.rhs_physical(states)
        assert np.max(np.abs(pred - truth)) <= 1e-12 * max(1.0, np.max(np.abs(truth)))

    def test_additive_with_zero_net_is_the_prior(self):
        zero_net = OracleNet(3, 2, lambda x: x[:, 0:2] * 0.0)
        prior = lambda s, p: make_system("URP", da=0.3).rhs(s.data if isinstance(s, Tensor) else s)
        rhs = LearnedRhs(zero_net, "GRAY_ADDITIVE", "URP", f_wb=lambda s, p: Tensor(prior(s, p)))
        states = np.random.default_rng(2).uniform(0, 1, (50, 2))
        da = np.full((50, 1), 0.3)
        assert np.array_equal(rhs.rhs_physical(states, da), prior(states, None))

    def test_multiplicative_scales_the_prior(self):
        doubler = OracleNet(3, 2, lambda x: x[:, 0:2] * 0.0 + 2.0)
        rhs = LearnedRhs(
            doubler, "GRAY_MULTIPLICATIVE", "URP",
            f_wb=lambda s, p: Tensor(make_system("URP", da=0.3).rhs(s.data)),
        )
        states = np.random.default_rng(3).uniform(0, 1, (20, 2))
        da = np.full((20, 1), 0.3)
        assert np.allclose(rhs.rhs_physical(states, da), 2.0 * make_system("URP", da=0.3).rhs(states))

    def test_corrective_composers_require_a_prior(self):
        with pytest.raises(ConfigError):
            LearnedRhs(init_weights([3, 8, 2], 0), "GRAY_ADDITIVE", "URP")

    def test_width_validation(self):
        with pytest.raises(ConfigError):
            LearnedRhs(init_weights([3, 8, 2], 0), "GRAY_FUNCTIONAL", "URP")  # wants out=1
        with pytest.raises(ConfigError):
            LearnedRhs(init_weights([5, 8, 6], 0), "BLACK_BOX", "BF")  # wants in=6

    def test_black_box_scaling_round_trip(self):
        # with non-identity scaling the physical evaluator unscales what the
        # net produces in scaled-derivative units
        net = OracleNet(2, 2, lambda x: x * 0.0 + 1.0)
        scaling = ChannelScaling(np.array([0.0, 10.0]), np.array([2.0, 30.0]))
        rhs = LearnedRhs(net, "BLACK_BOX", "CUSTOM", scaling=scaling, dim=2, param_names=())
        out = rhs.rhs_physical(np.array([[1.0, 20.0]]))
        assert np.allclose(out, [[2.0, 20.0]])  # 1.0 * span


class TestRk4:
    def test_zero_rhs_is_identity(self):
        state = Tensor(np.array([[1.5, -2.0]]))
        out = rk4_step(lambda s: s * 0.0, state, 0.3)
        assert np.array_equal(out.data, state.data)

    def test_constant_rhs_moves_linearly(self):
        c = np.array([[0.7, -1.1]])
        out = rk4_step(lambda s: s * 0.0 + c, Tensor(np.zeros((1, 2))), 0.25)
        assert np.allclose(out.data, c * 0.25)

    def test_linear_growth_matches_degree_four_taylor(self):
        out = rk4_step(lambda s: s, Tensor(np.array([[1.0]])), 0.1)
        expect = 1 + 0.1 + 0.1**2 / 2 + 0.1**3 / 6 + 0.1**4 / 24
        assert out.data[0, 0] == pytest.approx(expect, abs=1e-15)

    def test_per_row_dt_zero_rows_hold_still(self):
        state = Tensor(np.array([[1.0], [1.0]]))
        dt = np.array([[0.1], [0.0]])
        out = rk4_step(lambda s: s, state, dt)
        assert out.data[1, 0] == 1.0
        assert out.data[0, 0] == pytest.approx(1.1051708333, abs=1e-9)

    def test_global_convergence_order_is_four(self):
        dts = np.array([0.2, 0.1, 0.05, 0.025])
        errs = []
        for dt in dts:
            state = Tensor(np.array([[1.0]]))
            for _ in range(round(1.0 / dt)):
                state = rk4_step(lambda s: -s, state, dt)
            errs.append(abs(state.data[0, 0] - np.exp(-1.0)))
        slope = np.polyfit(np.log(dts), np.log(errs), 1)[0]
        assert 3.8 <= slope <= 4.2


class TestIntegrateGap:
    def test_zero_rhs_identity_over_any_substeps(self):
        state = Tensor(np.array([[2.0, 3.0]]))
        out = integrate_gap(lambda s: s * 0.0, state, [0.2, 0.7])
        assert np.array_equal(out.data, state.data)

    def test_twenty_small_steps_reach_exponential_decay(self):
        out = integrate_gap(lambda s: -s, Tensor(np.array([[1.0]])), [0.05] * 20)
        assert abs(out.data[0, 0] - np.exp(-1.0)) <= 1e-7

    def test_step_halving_changes_little_on_smooth_dynamics(self):
        sys_ = make_system("URP", da=0.3)
        f = lambda s: Tensor(sys_.rhs(s.data))
        start = Tensor(np.array([[0.5, 0.5]]))
        one = integrate_gap(f, start, [0.1])
        two = integrate_gap(f, start, [0.05, 0.05])
        assert np.max(np.abs(one.data - two.data)) <= 1e-6

    def test_non_finite_state_raises_rollout_error(self):
        f = lambda s: s * s * 1e30
        with np.errstate(over="ignore", invalid="ignore"), pytest.raises(RolloutError) as err:
            integrate_gap(f, Tensor(np.array([[1e30]])), [1.0, 1.0])
        assert err.value.step is not None


class TestGradientFlow:
    def test_rollout_gradients_match_finite_differences(self):
        mlp = init_weights([3, 16, 16, 2], seed=4)
        for p in mlp.leaves().values():
            p.requires_grad = True
        rhs = LearnedRhs(mlp, "BLACK_BOX", "URP")
        x0 = np.array([[0.4, 1.2]])
        da = np.array([[0.3]])

        def run():
            f = rhs.bound(da)
            state = Tensor(x0)
            for _ in range(10):
                state = rk4_step(f, state, 0.1)
            return state.mean()

        loss = run()
        backward(loss)
        scale = float(loss.data)
        for name, p in mlp.leaves().items():
            numeric = central_diff_grad(lambda: float(run().data), p.data)
            assert_grad_close(p.grad, numeric, rtol=1e-4, loss_scale=scale)

    def test_kappa_gradients_match_finite_differences(self):
        mlp = init_weights([3, 8, 8, 1], seed=5)
        rhs = LearnedRhs(mlp, "GRAY_FUNCTIONAL", "URP", kappa_trainable=("b", "beta"),
                         kappa_values={"b": 9.0, "beta": 2.5})
        da = np.array([[0.35]])
        x0 = np.array([[0.4, 1.2]])
        target = np.array([[0.6, 2.0]])

        def run():
            f = rhs.bound(da)
            state = Tensor(x0)
            for _ in range(5):
                state = rk4_step(f, state, 0.1)
            return ((state - target) * (state - target)).mean()

        loss = run()
        backward(loss)
        scale = float(loss.data)
        for name in ("b", "beta"):
            k = rhs.kappa[name].tensor
            numeric = central_diff_grad(lambda: float(run().data), k.data)
            assert_grad_close(k.grad, numeric, rtol=1e-4, loss_scale=scale)

    def test_state_gradient_flows_through_the_step(self):
        state = Tensor(np.array([[1.0, 2.0]]), requires_grad=True)
        out = rk4_step(lambda s: s * 0.5, state, 0.2)
        backward(out.sum())
        expect = (1 + 0.5 * 0.2 + (0.5 * 0.2) ** 2 / 2 + (0.5 * 0.2) ** 3 / 6 + (0.5 * 0.2) ** 4 / 24)
        assert np.allclose(state.grad, expect)


class TestCheckpoint:
    def _tiny_corpus(self):
        spec = PathologySpec(
            mean_dt=(0.5, 0.55), horizon=3.0, n_trajectories=3,
            param_ranges={"da": (0.2, 0.5)}, ic_box=((0, 1), (0, 6)),
            withhold_ic=True, observation="PER_CHANNEL",
        )
        return generate_corpus(make_system("URP"), spec, seed=0)

    def test_round_trip_is_bit_exact(self, tmp_path):
        corpus = self._tiny_corpus()
        cfg = RolloutConfig(max_dt=0.5, epochs=2, batch_size=4, seed=1)
        model = build_model("URP", "GRAY_FUNCTIONAL", cfg, corpus, kappa_trainable=("b", "beta"))
        from odenet.training import train

        train(model, corpus, cfg)
        p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
        save_checkpoint(p1, model, meta={"note": "round-trip"})
        loaded = load_checkpoint(p1)
        save_checkpoint(p2, loaded, meta={"note": "round-trip"})
        assert p1.read_bytes() == p2.read_bytes()
        for name in model.store.names():
            assert np.array_equal(model.store[name].data, loaded.store[name].data)
        assert loaded.store.step == model.store.step
        assert loaded.rhs.kappa["b"].trainable

    def test_loaded_model_evaluates_identically(self, tmp_path):
        corpus = self._tiny_corpus()
        cfg = RolloutConfig(max_dt=0.5, epochs=1, batch_size=4, seed=2)
        model = build_model("URP", "BLACK_BOX", cfg, corpus)
        path = tmp_path / "c.json"
        save_checkpoint(path, model)
        loaded = load_checkpoint(path)
        states = np.random.default_rng(0).uniform(0, 1, (10, 2))
        da = np.full((10, 1), 0.3)
        assert np.array_equal(
            model.rhs.rhs_physical(states, da), loaded.rhs.rhs_physical(states, da)
        )
