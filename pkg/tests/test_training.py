import numpy as np
import pytest

from conftest import random_mesh, randomize_biases
from halognn.errors import ValidationError
from halognn.mesh import ChannelSchema, GraphEncoding, build_edge_features, \
    one_hot_matrix
from halognn.model import ModelConfig, forward, init_params
from halognn.partition import partition
from halognn.training import (AdamState, LrSchedule, Normalizer, accumulate_gradients,
                              adam_step, backward, content_hash, inject_noise,
                              load_checkpoint, loss_mse, save_checkpoint,
                              training_target)


def small_problem(n=12, seed=3, K=2, l=4, n_types=2):
    mesh = random_mesh(n, seed, n_types=n_types)
    cfg = ModelConfig(message_passing_steps=K, latent_size=l,
                      node_in=2 + n_types, edge_in=3, node_out=2)
    params = init_params(cfg, seed=seed + 1)
    randomize_biases(params, seed + 2)
    rng = np.random.default_rng(seed + 3)
    node_f = np.concatenate([rng.normal(size=(n, 2)),
                             one_hot_matrix(mesh.node_types, n_types)], axis=1)
    edge_f = build_edge_features(mesh)
    target = rng.normal(size=(n, 2))
    return mesh, params, node_f, edge_f, target


class TestLoss:
    def test_perfect_prediction(self):
        x = np.ones((4, 2))
        assert loss_mse(x, x) == (0.0, 8)

    def test_unit_error_sums(self):
        pred = np.ones((5, 2))
        target = np.zeros((5, 2))
        sse, count = loss_mse(pred, target)
        assert sse == 10.0 and count == 10
        assert sse / count == 1.0

    def test_halo_rows_excluded(self):
        pred = np.zeros((6, 2))
        target = np.zeros((6, 2))
        mask = np.array([True] * 4 + [False] * 2)
        base = loss_mse(pred, target, mask)
        pred2 = pred.copy()
        pred2[5] = 100.0  # halo row perturbation
        assert loss_mse(pred2, target, mask) == base

    def test_empty_owned_set(self):
        sse, count = loss_mse(np.zeros((0, 2)), np.zeros((0, 2)))
        assert (sse, count) == (0.0, 0)

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError):
            loss_mse(np.zeros((2, 2)), np.zeros((3, 2)))


class TestBackward:
    def test_finite_difference_oracle(self):
        mesh, params, node_f, edge_f, target = small_problem()
        res = backward(params, node_f, edge_f, mesh.edges, target)

        def loss_at():
            pred = forward(params, GraphEncoding(node_f.copy(), edge_f.copy()),
                           mesh.edges)
            d = pred - target
            return (d * d).sum()

        h = 1e-6
        for name, arr in params.tensors():
            fd = np.zeros_like(arr)
            for i in range(arr.size):
                orig = arr.ravel()[i]
                arr.ravel()[i] = orig + h
                up = loss_at()
                arr.ravel()[i] = orig - h
                down = loss_at()
                arr.ravel()[i] = orig
                fd.ravel()[i] = (up - down) / (2 * h)
            rel = np.abs(res.grads[name] - fd).max() / max(1.0, np.abs(fd).max())
            assert rel < 1e-5, f"{name}: rel {rel:.2e}"

    def test_zero_loss_zero_decoder_output_grad(self):
        mesh, params, node_f, edge_f, _ = small_problem(seed=8)
        pred = forward(params, GraphEncoding(node_f, edge_f), mesh.edges)
        res = backward(params, node_f, edge_f, mesh.edges, target=pred)
        assert res.sse == pytest.approx(0.0, abs=1e-20)
        last = len(params.decoder.weights) - 1
        assert np.allclose(res.grads[f"decoder.w{last}"], 0.0, atol=1e-18)
        assert np.allclose(res.grads[f"decoder.b{last}"], 0.0, atol=1e-18)

    def test_quadratic_scaling(self):
        mesh, params, node_f, edge_f, _ = small_problem(seed=9)
        pred = forward(params, GraphEncoding(node_f, edge_f), mesh.edges)
        r1 = backward(params, node_f, edge_f, mesh.edges, target=pred + 1.0)
        r2 = backward(params, node_f, edge_f, mesh.edges, target=pred + 2.0)
        assert r2.sse == pytest.approx(4 * r1.sse, rel=1e-12)
        for name in r1.grads:
            assert np.allclose(r2.grads[name], 2 * r1.grads[name], rtol=1e-9,
                               atol=1e-12)

    def test_sse_decomposition_over_partitions(self):
        mesh, params, node_f, edge_f, target = small_problem(n=40, seed=10)
        full = loss_mse(forward(params, GraphEncoding(node_f, edge_f), mesh.edges),
                        target)[0]
        for p in (2, 3, 5):
            plan = partition(mesh, p)
            total = 0.0
            pred = forward(params, GraphEncoding(node_f, edge_f), mesh.edges)
            for q in range(p):
                owned = plan.owned[q]
                total += loss_mse(pred[owned], target[owned])[0]
            assert total == pytest.approx(full, rel=1e-12)


class TestNormalizer:
    def test_mean_and_population_std(self):
        n = Normalizer(1, 1, 1, horizon=10)
        n.fold_sample(np.array([[0.0], [2.0]]), np.zeros((1, 1)), np.zeros((1, 1)))
        assert n.stats["node"].mean()[0] == pytest.approx(1.0)
        assert n.stats["node"].std()[0] == pytest.approx(1.0)

    def test_normalize_mean_is_zero(self):
        n = Normalizer(2, 1, 1, horizon=10)
        rows = np.random.default_rng(0).normal(size=(50, 2))
        n.fold_sample(rows, np.zeros((1, 1)), np.zeros((1, 1)))
        out = n.normalize("node", n.stats["node"].mean()[None, :])
        assert np.allclose(out, 0.0, atol=1e-12)

    def test_denormalize_inverts(self):
        n = Normalizer(3, 1, 1, horizon=10)
        rows = np.random.default_rng(1).normal(size=(40, 3)) * 5 + 2
        n.fold_sample(rows, np.zeros((1, 1)), np.zeros((1, 1)))
        x = np.random.default_rng(2).normal(size=(7, 3))
        assert np.allclose(n.denormalize("node", n.normalize("node", x)), x,
                           atol=1e-12)

    def test_freeze_after_horizon(self):
        n = Normalizer(1, 1, 1, horizon=2)
        for _ in range(3):
            n.fold_sample(np.ones((4, 1)), np.zeros((1, 1)), np.zeros((1, 1)))
        assert n.rounds == 2
        assert n.stats["node"].count == 8

    def test_linear_model_argmin_invariance(self):
        # fitting in normalized space then mapping back reproduces the raw fit
        rng = np.random.default_rng(5)
        x = rng.normal(size=(60, 3)) * np.array([3.0, 0.5, 10.0]) + 1.0
        true_w = rng.normal(size=(3, 2))
        y = x @ true_w + rng.normal(size=(60, 2)) * 0.1
        xh = np.concatenate([x, np.ones((60, 1))], axis=1)
        w_raw, *_ = np.linalg.lstsq(xh, y, rcond=None)
        pred_raw = xh @ w_raw

        n = Normalizer(3, 1, 2, horizon=10)
        n.fold_sample(x, np.zeros((1, 1)), y)
        xn = n.normalize("node", x)
        yn = n.normalize("target", y)
        xnh = np.concatenate([xn, np.ones((60, 1))], axis=1)
        w_n, *_ = np.linalg.lstsq(xnh, yn, rcond=None)
        pred_n = n.denormalize("target", xnh @ w_n)
        assert np.allclose(pred_n, pred_raw, rtol=1e-9, atol=1e-9)


class TestNoise:
    IDX = np.array([0, 1])

    def test_zero_noise_identity(self):
        q = np.random.default_rng(0).normal(size=(10, 3))
        out = inject_noise(q, np.zeros(2), self.IDX, np.random.default_rng(1))
        assert np.array_equal(out, q)

    def test_statistical_mean(self):
        q = np.zeros((100_000, 2))
        std = np.array([0.5, 0.5])
        out = inject_noise(q, std, self.IDX, np.random.default_rng(7))
        diff = out - q
        bound = 3 * 0.5 / np.sqrt(100_000)
        assert abs(diff[:, 0].mean()) < bound
        assert abs(diff[:, 1].mean()) < bound
        assert diff[:, 0].std() == pytest.approx(0.5, rel=0.02)

    def test_untouched_channels(self):
        q = np.random.default_rng(2).normal(size=(20, 3))
        out = inject_noise(q, np.ones(1) * 0.3, np.array([0]),
                           np.random.default_rng(3))
        assert np.array_equal(out[:, 1:], q[:, 1:])
        assert not np.array_equal(out[:, 0], q[:, 0])

    def test_negative_std_rejected(self):
        with pytest.raises(ValidationError):
            inject_noise(np.zeros((2, 2)), np.array([-1.0, 0.0]), self.IDX,
                         np.random.default_rng(0))

    def test_target_adjusts_to_corrupted_state(self):
        schema = ChannelSchema.all_dynamic(("u",))
        now = np.array([[1.0]])
        nxt = np.array([[3.0]])
        corrupted = np.array([[1.5]])
        target = training_target(corrupted, nxt, schema)
        # applying the learned delta to the corrupted state recovers the truth
        assert corrupted + target == pytest.approx(3.0)


class TestAdam:
    def _scalar_params(self):
        cfg = ModelConfig(message_passing_steps=1, latent_size=1, node_in=1,
                          edge_in=1, node_out=1, hidden_layers=0,
                          use_layer_norm=False)
        return init_params(cfg, seed=0)

    def test_first_step_magnitude(self):
        params = self._scalar_params()
        state = AdamState(params)
        names = [name for name, _ in params.tensors()]
        before = {name: arr.copy() for name, arr in params.tensors()}
        grads = {name: np.ones_like(arr) for name, arr in params.tensors()}
        adam_step(state, params, grads, lr=0.01)
        for name, arr in params.tensors():
            assert arr == pytest.approx(before[name] - 0.01, rel=1e-6)
        assert state.step == 1
        del names

    def test_zero_gradient_no_change(self):
        params = self._scalar_params()
        state = AdamState(params)
        before = {name: arr.copy() for name, arr in params.tensors()}
        grads = {name: np.zeros_like(arr) for name, arr in params.tensors()}
        adam_step(state, params, grads, lr=0.1)
        for name, arr in params.tensors():
            assert np.array_equal(arr, before[name])

    def test_deterministic_trajectory(self):
        runs = []
        for _ in range(2):
            params = self._scalar_params()
            state = AdamState(params)
            rng = np.random.default_rng(4)
            for step in range(5):
                grads = {name: rng.normal(size=arr.shape)
                         for name, arr in params.tensors()}
                adam_step(state, params, grads, lr=LrSchedule().rate(step))
            runs.append(content_hash(params, state))
        assert runs[0] == runs[1]

    def test_schedule_reaches_floor(self):
        sched = LrSchedule.for_budget(1000, initial=1e-4, floor=1e-6)
        assert sched.rate(0) == pytest.approx(1e-4)
        assert sched.rate(1000) == pytest.approx(1e-6, rel=1e-9)
        assert sched.rate(5000) == 1e-6


class TestAccumulation:
    def test_identity_for_one(self):
        g = {"a": np.array([1.0, 2.0])}
        out = accumulate_gradients([g], 1)
        assert np.array_equal(out["a"], g["a"])

    def test_opposite_gradients_cancel(self):
        g = {"a": np.array([3.0])}
        neg = {"a": np.array([-3.0])}
        assert accumulate_gradients([g, neg], 2)["a"] == pytest.approx(0.0)

    def test_mean(self):
        out = accumulate_gradients([{"a": np.array([2.0])},
                                    {"a": np.array([4.0])}], 2)
        assert out["a"] == pytest.approx(3.0)

    def test_wrong_count(self):
        with pytest.raises(ValidationError):
            accumulate_gradients([{"a": np.zeros(1)}], 2)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        cfg = ModelConfig(message_passing_steps=2, latent_size=4, node_in=5,
                          edge_in=3, node_out=2)
        params = init_params(cfg, seed=1)
        adam = AdamState(params)
        rng = np.random.default_rng(0)
        grads = {name: rng.normal(size=arr.shape) for name, arr in params.tensors()}
        adam_step(adam, params, grads, lr=1e-3)
        norm = Normalizer(5, 3, 2, horizon=7)
        norm.fold_sample(rng.normal(size=(9, 5)), rng.normal(size=(4, 3)),
                         rng.normal(size=(9, 2)))
        schema = ChannelSchema(names=("u", "v"), input_channels=("u", "v"),
                               output_channels=("u", "v"))
        sched = LrSchedule(1e-4, 1e-6, 500.0)
        path = tmp_path / "c.mgnc"
        save_checkpoint(path, params, adam, norm, schema, sched, step=5)
        first = path.read_bytes()
        p2, a2, n2, s2, sc2, step2 = load_checkpoint(path)
        save_checkpoint(path, p2, a2, n2, s2, sc2, step2)
        assert path.read_bytes() == first
        assert content_hash(params, adam, norm) == content_hash(p2, a2, n2)
        assert s2 == schema and sc2 == sched and step2 == 5
        assert a2.step == adam.step
        assert n2.rounds == norm.rounds
