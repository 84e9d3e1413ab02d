import numpy as np
import pytest

from omoe_lab import (Rng, average_projector, load_optimizer, make_optimizer, model_forward,
                      new_omoe_state, o_step, r_step, save_optimizer, step_dispatch)
from omoe_lab.errors import ContractViolation, SingleExpertError
from omoe_lab.grad import Gradients, backward
from omoe_lab.linalg import sym_eigvals
from omoe_lab.optim import MacCounter
from tests.test_model import small_model


def scalar_step(kind, lr, p0, g0, **hyper):
    opt = make_optimizer(kind, lr, **hyper)
    params = {"w": np.array([p0])}
    opt.step(params, {"w": np.array([g0])})
    return float(params["w"][0])


class TestBaseOptimizers:
    def test_sgd_hand_step(self):
        assert scalar_step("sgd", 0.1, 1.0, 2.0) == pytest.approx(0.8)

    def test_adamw_hand_first_step(self):
        # bias-corrected moments both equal the gradient on step 1, so the update
        # is lr * 1/(1 + eps) plus the decoupled decay lr * wd * p
        got = scalar_step("adamw", 1e-3, 1.0, 1.0)
        expected = 1.0 - 1e-3 * (1.0 / (1.0 + 1e-8)) - 1e-3 * 0.01 * 1.0
        assert got == pytest.approx(expected, abs=1e-12)
        assert got == pytest.approx(0.99899, abs=5e-6)

    def test_adam_first_step_magnitude(self):
        got = scalar_step("adam", 1e-3, 1.0, 5.0)
        assert got == pytest.approx(1.0 - 1e-3, abs=1e-6)  # sign-like first step

    def test_rmsprop_first_step(self):
        # v = (1-rho) g^2; step = lr g / (sqrt(v) + eps)
        got = scalar_step("rmsprop", 1e-3, 1.0, 2.0)
        expected = 1.0 - 1e-3 * 2.0 / (np.sqrt(0.01 * 4.0) + 1e-8)
        assert got == pytest.approx(expected, abs=1e-12)

    def test_adagrad_first_step(self):
        got = scalar_step("adagrad", 0.1, 1.0, 3.0)
        expected = 1.0 - 0.1 * 3.0 / (3.0 + 1e-10)
        assert got == pytest.approx(expected, abs=1e-12)

    def test_unknown_kind(self):
        with pytest.raises(ContractViolation):
            make_optimizer("lion", 1e-3)

    def test_state_floats(self):
        params = {"a": np.zeros((3, 4)), "b": np.zeros(5)}
        for kind, factor in (("sgd", 0), ("adam", 2), ("adamw", 2),
                             ("rmsprop", 1), ("adagrad", 1)):
            assert make_optimizer(kind, 1e-3).state_floats(params) == factor * 17


def make_state(model, s=5, n_total=100, base_kind="sgd", lr=0.1, **kw):
    base = make_optimizer(base_kind, lr)
    return new_omoe_state(base, model, s, n_total, **kw)


def grads_for(model, X, y, kind="ce"):
    _, tape = model_forward(model, X)
    return backward(model, tape, y, kind)


class TestRStep:
    def test_updates_all_params_and_buffers(self):
        model = small_model(M=2, routing="dense")
        state = make_state(model)
        X = np.random.default_rng(0).normal(size=(4, model.dims.d_raw))
        before = {k: v.copy() for k, v in model.params.items()}
        grads, means = grads_for(model, X, [0, 1, 2, 0])
        out = r_step(state, model, grads, means)
        assert out.kind == "R"
        assert any(not np.array_equal(model.params[n], before[n])
                   for n in model.param_names())
        assert state.e == 2
        assert state.means_produced == 4  # 2 experts x 2 layers, dense routing
        assert all(len(v) == 1 for v in state.buffers.values())

    def test_zero_token_expert_no_buffer_entry(self):
        model = small_model(M=2, routing="top1")
        # constant positive Z0 plus opposed gate rows routes everything to expert 0
        model.params["input_map.W"][:] = 0.0
        model.params["input_map.b"][:] = 1.0
        model.params["gate.W"][0] = 1.0
        model.params["gate.W"][1] = -1.0
        state = make_state(model)
        X = np.random.default_rng(0).normal(size=(4, model.dims.d_raw))
        grads, means = grads_for(model, X, [0, 1, 2, 0])
        r_step(state, model, grads, means)
        assert len(state.buffers[(0, 1)]) == 1
        assert len(state.buffers[(1, 1)]) == 0

    def test_projectors_untouched(self):
        model = small_model(M=2, routing="dense")
        state = make_state(model)
        X = np.random.default_rng(0).normal(size=(4, model.dims.d_raw))
        grads, means = grads_for(model, X, [0, 1, 2, 0])
        r_step(state, model, grads, means)
        for proj in state.projectors.values():
            np.testing.assert_array_equal(proj.P, np.eye(proj.d))


class TestAverageProjector:
    def test_paper_literal_identities(self):
        model = small_model(M=4)
        state = make_state(model, avg_norm="paper")
        np.testing.assert_allclose(average_projector(state, 0, 1),
                                   0.75 * np.eye(model.dims.d))

    def test_proper_mean_identities(self):
        model = small_model(M=4)
        state = make_state(model, avg_norm="proper")
        np.testing.assert_allclose(average_projector(state, 0, 1), np.eye(model.dims.d))

    def test_two_experts_paper_halves(self):
        model = small_model(M=2)
        state = make_state(model, avg_norm="paper")
        other = np.random.default_rng(0).normal(size=(model.dims.d, model.dims.d))
        other = (other + other.T) / 2
        state.projectors[(1, 1)].P = other
        np.testing.assert_allclose(average_projector(state, 0, 1), 0.5 * other)

    def test_single_expert_rejected(self):
        model = small_model(M=1)
        state = make_state(model)
        state.M = 1
        with pytest.raises(SingleExpertError):
            average_projector(state, 0, 1)

    def test_bad_avg_norm_rejected(self):
        model = small_model(M=2)
        with pytest.raises(ContractViolation):
            make_state(model, avg_norm="mean")


class TestOStep:
    def test_identity_projection_equals_sgd_on_theta(self):
        model = small_model(M=2, routing="dense")
        twin = model.clone()
        state = make_state(model, avg_norm="proper", lr=0.1)
        X = np.random.default_rng(0).normal(size=(4, model.dims.d_raw))
        grads, _ = grads_for(model, X, [0, 1, 2, 0])
        out = o_step(state, model, grads)
        assert out.kind == "O"
        for name in model.theta_names():
            np.testing.assert_allclose(model.params[name],
                                       twin.params[name] - 0.1 * grads.grads[name],
                                       atol=1e-12)
        for name in model.phi_names():
            np.testing.assert_array_equal(model.params[name], twin.params[name])

    def test_zero_projector_freezes_weights_not_biases(self):
        model = small_model(M=2, routing="dense")
        twin = model.clone()
        state = make_state(model, lr=0.1)
        for proj in state.projectors.values():
            proj.P[:] = 0.0
        X = np.random.default_rng(0).normal(size=(4, model.dims.d_raw))
        grads, _ = grads_for(model, X, [0, 1, 2, 0])
        o_step(state, model, grads)
        for m in range(2):
            for w in ("W1", "W2"):
                np.testing.assert_array_equal(model.params[f"expert{m}.{w}"],
                                              twin.params[f"expert{m}.{w}"])
            for b in ("b1", "b2"):
                np.testing.assert_allclose(
                    model.params[f"expert{m}.{b}"],
                    twin.params[f"expert{m}.{b}"] - 0.1 * grads.grads[f"expert{m}.{b}"],
                    atol=1e-12)

    def test_hand_projected_delta(self):
        # G = [[1, 1]], Pbar = diag(0.5, 1), lr = 0.1 -> delta = -0.1 * [[0.5, 1]]
        G = np.array([[1.0, 1.0]])
        pbar = np.diag([0.5, 1.0])
        np.testing.assert_allclose(-0.1 * (G @ pbar), np.array([[-0.05, -0.1]]))

    def test_single_expert_raises_with_remediation(self):
        model = small_model(M=1)
        state = make_state(model)
        grads = Gradients({n: np.zeros_like(p) for n, p in model.params.items()}, 0.0)
        with pytest.raises(SingleExpertError, match="M >= 2"):
            o_step(state, model, grads)

    def test_drain_exactness(self):
        model = small_model(M=2, routing="dense")
        state = make_state(model, s=3)
        rng = np.random.default_rng(0)
        for i in range(8):
            X = rng.normal(size=(4, model.dims.d_raw))
            step_dispatch(state, model, X, [0, 1, 2, 0])
        o_steps_done = (state.e - 1) // 3
        assert o_steps_done >= 1
        buffered = sum(len(v) for v in state.buffers.values())
        assert state.means_consumed + buffered == state.means_produced
        for proj in state.projectors.values():
            assert proj.updates_applied == state.means_consumed // len(state.projectors)

    def test_projection_containment(self):
        # the weight delta lies in the row space of Pbar
        model = small_model(M=2, routing="dense")
        state = make_state(model, lr=0.1)
        rng = np.random.default_rng(3)
        for key, proj in state.projectors.items():
            for _ in range(3):
                proj.rls_update(rng.normal(size=proj.d), 1e-2)
        X = rng.normal(size=(4, model.dims.d_raw))
        grads, _ = grads_for(model, X, [0, 1, 2, 0])
        before = {n: model.params[n].copy() for n in model.theta_names()}
        o_step(state, model, grads)
        for m in range(2):
            for layer in (1, 2):
                pbar = average_projector(state, m, layer)
                pinv = np.linalg.pinv(pbar)
                name = f"expert{m}.W{layer}"
                delta = model.params[name] - before[name]
                resid = delta @ (np.eye(pbar.shape[0]) - pinv @ pbar)
                assert np.linalg.norm(resid) <= 1e-8 * max(np.linalg.norm(delta), 1e-30)

    def test_attenuation_transfer(self):
        # all other projectors built from direction u: the update barely moves along u
        model = small_model(M=3, routing="dense")
        state = make_state(model, avg_norm="proper", lr=0.1)
        rng = np.random.default_rng(5)
        u = {1: rng.normal(size=model.dims.d), 2: rng.normal(size=model.dims.h)}
        for layer in (1, 2):
            u[layer] /= np.linalg.norm(u[layer])
            for m in range(3):
                state.projectors[(m, layer)].rls_update(u[layer], 1e-4)
        X = rng.normal(size=(6, model.dims.d_raw))
        grads, _ = grads_for(model, X, [0, 1, 2, 0, 1, 2])
        before = {n: model.params[n].copy() for n in model.theta_names()}
        o_step(state, model, grads)
        for m in range(3):
            for layer in (1, 2):
                name = f"expert{m}.W{layer}"
                delta = model.params[name] - before[name]
                if np.linalg.norm(delta) == 0:
                    continue
                assert (np.linalg.norm(delta @ u[layer])
                        <= 0.01 * np.linalg.norm(delta) * np.linalg.norm(u[layer]))


class TestDispatchSchedule:
    def test_s2_schedule_over_six_batches(self):
        model = small_model(M=2, routing="dense")
        state = make_state(model, s=2, n_total=6)
        rng = np.random.default_rng(0)
        kinds = []
        for _ in range(6):
            out = step_dispatch(state, model, rng.normal(size=(4, model.dims.d_raw)),
                                [0, 1, 2, 0])
            kinds.append(out.kind)
        assert kinds == ["R", "O", "R", "O", "R", "O"]

    def test_s5_schedule_positions(self):
        model = small_model(M=2, routing="dense")
        state = make_state(model, s=5, n_total=12)
        rng = np.random.default_rng(0)
        kinds = [step_dispatch(state, model, rng.normal(size=(4, model.dims.d_raw)),
                               [0, 1, 2, 0]).kind for _ in range(12)]
        assert [i + 1 for i, k in enumerate(kinds) if k == "O"] == [5, 10]

    def test_s_too_small_rejected(self):
        model = small_model(M=2)
        with pytest.raises(ContractViolation):
            make_state(model, s=1)

    def test_parity_when_s_exceeds_horizon(self):
        model_a = small_model(seed=9, M=2, routing="dense")
        model_b = model_a.clone()
        base_a = make_optimizer("adamw", 1e-3)
        base_b = make_optimizer("adamw", 1e-3)
        state = new_omoe_state(base_a, model_a, s=1000, n_total=10)
        rng = np.random.default_rng(2)
        for _ in range(10):
            X = rng.normal(size=(4, model_a.dims.d_raw))
            y = [0, 1, 2, 0]
            step_dispatch(state, model_a, X, y)
            _, tape = model_forward(model_b, X)
            grads, _ = backward(model_b, tape, y)
            base_b.step(model_b.params, grads.grads)
        for name in model_a.param_names():
            np.testing.assert_array_equal(model_a.params[name], model_b.params[name])


class TestOptimizerCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        model = small_model(M=2, routing="dense")
        state = make_state(model, s=3, base_kind="adamw", lr=1e-3,
                           alpha0=0.7, lam=0.8, o_lr=2.0)
        rng = np.random.default_rng(0)
        for _ in range(5):
            step_dispatch(state, model, rng.normal(size=(4, model.dims.d_raw)), [0, 1, 2, 0])
        path = tmp_path / "opt.json"
        save_optimizer(state, path)
        loaded = load_optimizer(path)
        assert (loaded.e, loaded.s, loaded.n_total) == (state.e, state.s, state.n_total)
        assert (loaded.means_produced, loaded.means_consumed) == \
            (state.means_produced, state.means_consumed)
        assert loaded.base.kind == "adamw" and loaded.base.t == state.base.t
        for name, bufs in state.base.state.items():
            for k, arr in bufs.items():
                np.testing.assert_array_equal(loaded.base.state[name][k], arr)
        for key, proj in state.projectors.items():
            np.testing.assert_array_equal(loaded.projectors[key].P, proj.P)
            assert loaded.projectors[key].updates_applied == proj.updates_applied
        for key, entries in state.buffers.items():
            assert len(loaded.buffers[key]) == len(entries)
            for (i1, x1), (i2, x2) in zip(entries, loaded.buffers[key]):
                assert i1 == i2
                np.testing.assert_array_equal(x1, x2)

    def test_resume_reproduces_trajectory(self, tmp_path):
        # checkpoint mid-run, keep going both ways, trajectories stay bit-identical
        model = small_model(seed=4, M=2, routing="dense")
        state = make_state(model, s=3, base_kind="adamw", lr=1e-3, o_lr=2.0)
        rng = np.random.default_rng(1)
        batch_list = [(rng.normal(size=(4, model.dims.d_raw)), [0, 1, 2, 0])
                      for _ in range(10)]
        for X, y in batch_list[:5]:
            step_dispatch(state, model, X, y)
        from omoe_lab import load_model, save_model
        save_optimizer(state, tmp_path / "opt.json")
        save_model(model, tmp_path / "model.json")
        resumed_model = load_model(tmp_path / "model.json")
        resumed_state = load_optimizer(tmp_path / "opt.json")
        for X, y in batch_list[5:]:
            step_dispatch(state, model, X, y)
            step_dispatch(resumed_state, resumed_model, X, y)
        for name in model.param_names():
            np.testing.assert_array_equal(model.params[name], resumed_model.params[name])

    def test_unknown_format_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"format": "nope"}')
        with pytest.raises(ContractViolation):
            load_optimizer(path)


class TestMacCounter:
    def test_counter_totals(self):
        c = MacCounter(rls=3, average=4, project=5)
        assert c.total == 12

    def test_o_step_charges_counter(self):
        model = small_model(M=2, routing="dense")
        state = make_state(model, s=2)
        state.mac_counter = MacCounter()
        rng = np.random.default_rng(0)
        step_dispatch(state, model, rng.normal(size=(4, model.dims.d_raw)), [0, 1, 2, 0])
        step_dispatch(state, model, rng.normal(size=(4, model.dims.d_raw)), [0, 1, 2, 0])
        assert state.mac_counter.rls > 0
        assert state.mac_counter.average > 0
        assert state.mac_counter.project > 0
