import numpy as np
import pytest

from conftest import random_mesh, randomize_biases
from halognn.errors import FormatError, NumericError, ValidationError
from halognn.mesh import ChannelSchema, GraphEncoding, Mesh, build_edge_features, \
    one_hot_matrix, symmetric_edges
from halognn.model import (LAYER_NORM_EPS, BlockParams, MlpParams, ModelConfig,
                           ModelParams, aggregate_incoming, apply_delta, block_forward,
                           forward, init_params, load_params, mlp_forward, save_params)


def linear_mlp(matrix, bias=None):
    """Single linear layer as MlpParams (no hidden layers, no normalization)."""
    w = np.asarray(matrix, dtype=float)
    b = np.zeros(w.shape[1]) if bias is None else np.asarray(bias, dtype=float)
    return MlpParams(weights=[w], biases=[b])


def reference_forward(params, node_f, edge_f, edges):
    """Independent straight-line re-implementation with plain loops."""
    def run_mlp(p, row):
        x = np.asarray(row, dtype=float)
        for i, (w, b) in enumerate(zip(p.weights, p.biases)):
            x = x @ w + b
            if i < len(p.weights) - 1:
                x = np.maximum(x, 0.0)
        if p.ln_scale is not None:
            mu = x.mean()
            sigma = np.sqrt(((x - mu) ** 2).mean() + LAYER_NORM_EPS)
            x = (x - mu) / sigma * p.ln_scale + p.ln_offset
        return x

    h = [run_mlp(params.node_encoder, row) for row in node_f]
    e = [run_mlp(params.edge_encoder, row) for row in edge_f]
    for blk in params.blocks:
        new_e = []
        for idx, (s, d) in enumerate(edges):
            z = np.concatenate([e[idx], h[s], h[d]])
            new_e.append(e[idx] + run_mlp(blk.edge_update, z))
        new_h = []
        for i in range(len(h)):
            agg = np.zeros(len(h[i]))
            for idx, (s, d) in enumerate(edges):
                if d == i:
                    agg = agg + new_e[idx]
            new_h.append(h[i] + run_mlp(blk.node_update, np.concatenate([h[i], agg])))
        h, e = new_h, new_e
    return np.stack([run_mlp(params.decoder, row) for row in h])


class TestInit:
    def test_deterministic(self):
        cfg = ModelConfig(message_passing_steps=2, latent_size=4, node_in=3,
                          edge_in=3, node_out=2)
        a, b = init_params(cfg, seed=5), init_params(cfg, seed=5)
        for (na, ta), (nb, tb) in zip(a.tensors(), b.tensors()):
            assert na == nb and np.array_equal(ta, tb)

    def test_seeds_differ(self):
        cfg = ModelConfig(message_passing_steps=1, latent_size=4, node_in=3,
                          edge_in=3, node_out=2)
        a, b = init_params(cfg, seed=5), init_params(cfg, seed=6)
        assert any(not np.array_equal(ta, tb)
                   for (_, ta), (_, tb) in zip(a.tensors(), b.tensors()))

    def test_parameter_count_closed_form(self):
        cfg = ModelConfig(message_passing_steps=2, latent_size=4, node_in=7,
                          edge_in=3, node_out=2, hidden_layers=2)
        params = init_params(cfg, seed=0)

        def count(widths, ln):
            total = sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))
            return total + (2 * widths[-1] if ln else 0)

        expected = (count([7, 4, 4, 4], True) + count([3, 4, 4, 4], True)
                    + 2 * (count([12, 4, 4, 4], True) + count([8, 4, 4, 4], True))
                    + count([4, 4, 4, 2], False))
        assert params.n_parameters() == expected

    def test_bad_config(self):
        with pytest.raises(ValidationError):
            ModelConfig(message_passing_steps=0, latent_size=4, node_in=3,
                        edge_in=3, node_out=2)


class TestEncode:
    def test_zero_input_zero_bias(self):
        p = MlpParams(weights=[np.ones((2, 2)), np.ones((2, 2))],
                      biases=[np.zeros(2), np.zeros(2)])
        y, _ = mlp_forward(p, np.zeros((3, 2)))
        assert np.array_equal(y, np.zeros((3, 2)))

    def test_row_permutation_equivariance(self):
        rng = np.random.default_rng(0)
        p = MlpParams(weights=[rng.normal(size=(3, 5)), rng.normal(size=(5, 4))],
                      biases=[rng.normal(size=5), rng.normal(size=4)])
        x = rng.normal(size=(6, 3))
        perm = rng.permutation(6)
        a, _ = mlp_forward(p, x[perm])
        b, _ = mlp_forward(p, x)
        assert np.allclose(a, b[perm])

    def test_one_wide_linear_encoder(self):
        # w=2, b=1 on f=3 -> 7
        p = linear_mlp([[2.0]], [1.0])
        y, _ = mlp_forward(p, np.array([[3.0]]))
        assert y.tolist() == [[7.0]]


class TestProcessBlock:
    def test_zero_mlps_pure_residual(self):
        l = 3
        zeros = MlpParams(weights=[np.zeros((3 * l, l))], biases=[np.zeros(l)])
        zeros_n = MlpParams(weights=[np.zeros((2 * l, l))], biases=[np.zeros(l)])
        blk = BlockParams(edge_update=zeros, node_update=zeros_n)
        rng = np.random.default_rng(1)
        h = rng.normal(size=(4, l))
        e = rng.normal(size=(6, l))
        src = np.array([0, 1, 2, 3, 0, 1])
        dst = np.array([0, 0, 1, 2, 3, 3])
        h2, e2, _ = block_forward(blk, h, e, src, dst, n_update=4)
        assert np.array_equal(h2, h)
        assert np.array_equal(e2, e)

    def test_hand_worked_two_node_example(self):
        # l=1; edge update sums its 3 inputs, node update sums its 2 inputs
        blk = BlockParams(edge_update=linear_mlp([[1.0], [1.0], [1.0]]),
                          node_update=linear_mlp([[1.0], [1.0]]))
        h = np.array([[1.0], [2.0]])
        e = np.array([[0.5], [0.5]])
        # canonical order: (1,0) then (0,1)
        src = np.array([1, 0])
        dst = np.array([0, 1])
        h2, e2, _ = block_forward(blk, h, e, src, dst, n_update=2)
        assert e2.ravel().tolist() == [4.0, 4.0]
        assert h2.ravel().tolist() == [6.0, 8.0]

    def test_node_without_incoming_edges(self):
        blk = BlockParams(edge_update=linear_mlp([[1.0], [1.0], [1.0]]),
                          node_update=linear_mlp([[1.0], [1.0]]))
        h = np.array([[1.0], [5.0], [7.0]])
        e = np.array([[1.0]])
        src = np.array([0])
        dst = np.array([1])
        h2, _, _ = block_forward(blk, h, e, src, dst, n_update=3)
        # nodes 0 and 2 aggregate the empty sum
        assert h2[0, 0] == 1.0 + (1.0 + 0.0)
        assert h2[2, 0] == 7.0 + (7.0 + 0.0)

    def test_aggregation_matches_dense_oracle(self):
        rng = np.random.default_rng(2)
        for trial in range(5):
            mesh = random_mesh(30 + trial * 4, trial)
            vals = rng.normal(size=(mesh.n_edges, 6))
            got = aggregate_incoming(vals, mesh.edges[:, 1], mesh.n_nodes)
            dense = np.zeros((mesh.n_nodes, 6))
            for idx, (_, d) in enumerate(mesh.edges):
                dense[d] += vals[idx]
            assert np.allclose(got, dense, atol=1e-12)


class TestForward:
    def _setup(self, n=9, seed=4, K=2, l=5):
        mesh = random_mesh(n, seed)
        cfg = ModelConfig(message_passing_steps=K, latent_size=l,
                          node_in=2 + mesh.n_types, edge_in=3, node_out=2)
        params = init_params(cfg, seed=seed + 1)
        randomize_biases(params, seed + 2)
        rng = np.random.default_rng(seed + 3)
        node_f = np.concatenate([rng.normal(size=(n, 2)),
                                 one_hot_matrix(mesh.node_types, mesh.n_types)], axis=1)
        return mesh, params, GraphEncoding(node_f, build_edge_features(mesh))

    def test_matches_straight_line_oracle(self):
        mesh, params, enc = self._setup()
        got = forward(params, enc, mesh.edges)
        want = reference_forward(params, enc.node_features, enc.edge_features,
                                 mesh.edges)
        assert np.allclose(got, want, rtol=1e-12, atol=1e-12)

    def test_node_relabeling_equivariance(self):
        mesh, params, enc = self._setup(n=12, seed=9)
        rng = np.random.default_rng(0)
        perm = rng.permutation(mesh.n_nodes)
        inv = np.argsort(perm)
        # relabel node i -> perm[i]
        relabeled = Mesh(coords=mesh.coords[inv], node_types=mesh.node_types[inv],
                         edges=perm[mesh.edges], n_types=mesh.n_types)
        enc2 = GraphEncoding(enc.node_features[inv], build_edge_features(relabeled))
        out = forward(params, enc, mesh.edges)
        out2 = forward(params, enc2, relabeled.edges)
        assert np.allclose(out2, out[inv], rtol=1e-10, atol=1e-12)

    def test_translation_invariance(self):
        mesh, params, enc = self._setup(n=10, seed=6)
        shifted = Mesh(coords=mesh.coords + np.array([3.7, -1.2]),
                       node_types=mesh.node_types, edges=mesh.edges,
                       n_types=mesh.n_types)
        enc2 = GraphEncoding(enc.node_features, build_edge_features(shifted))
        assert np.allclose(forward(params, enc, mesh.edges),
                           forward(params, enc2, shifted.edges),
                           rtol=0, atol=1e-12)

    def test_residual_identity_with_zero_blocks(self):
        mesh, params, enc = self._setup(n=8, seed=12)
        for blk in params.blocks:
            for mlp in (blk.edge_update, blk.node_update):
                for w in mlp.weights:
                    w[...] = 0.0
                for b in mlp.biases:
                    b[...] = 0.0
                mlp.ln_scale[...] = 0.0
                mlp.ln_offset[...] = 0.0
        out = forward(params, enc, mesh.edges)
        h, _ = mlp_forward(params.node_encoder, enc.node_features)
        dec, _ = mlp_forward(params.decoder, h)
        assert np.allclose(out, dec, atol=1e-12)

    def test_zero_decoder_gives_zero(self):
        mesh, params, enc = self._setup(n=8, seed=13)
        for w in params.decoder.weights:
            w[...] = 0.0
        for b in params.decoder.biases:
            b[...] = 0.0
        assert np.array_equal(forward(params, enc, mesh.edges), np.zeros((8, 2)))

    def test_non_finite_names_stage(self):
        mesh, params, enc = self._setup(n=8, seed=14)
        params.blocks[1].edge_update.weights[0][0, 0] = np.inf
        with np.errstate(invalid="ignore"), pytest.raises(NumericError, match="block 1"):
            forward(params, enc, mesh.edges)

    def test_width_mismatch(self):
        mesh, params, enc = self._setup(n=8, seed=15)
        bad = GraphEncoding(enc.node_features[:, :2], enc.edge_features)
        with pytest.raises(ValidationError, match="width"):
            forward(params, bad, mesh.edges)


class TestApplyDelta:
    SCHEMA = ChannelSchema(names=("u", "p"), input_channels=("u",),
                           output_channels=("u", "p"), direct_channels=frozenset({"p"}))

    def test_zero_prediction_all_delta(self):
        schema = ChannelSchema.all_dynamic(("u", "v"))
        q = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(apply_delta(q, np.zeros((2, 2)), schema), q)

    def test_delta_channel_advances(self):
        schema = ChannelSchema.all_dynamic(("u",))
        out = apply_delta(np.array([[1.0]]), np.array([[0.5]]), schema)
        assert out.tolist() == [[1.5]]

    def test_mixed_schema(self):
        q = np.array([[1.0, 9.0]])
        p = np.array([[0.5, 2.5]])
        out = apply_delta(q, p, self.SCHEMA)
        assert out.tolist() == [[1.5, 2.5]]

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError):
            apply_delta(np.zeros((2, 2)), np.zeros((3, 2)), self.SCHEMA)


class TestParamsIO:
    def test_round_trip_bit_exact(self, tmp_path):
        cfg = ModelConfig(message_passing_steps=2, latent_size=4, node_in=3,
                          edge_in=3, node_out=2)
        params = init_params(cfg, seed=3)
        path = tmp_path / "p.mgnp"
        save_params(params, path)
        first = path.read_bytes()
        back = load_params(path)
        save_params(back, path)
        assert path.read_bytes() == first
        for (na, ta), (nb, tb) in zip(params.tensors(), back.tensors()):
            assert na == nb and np.array_equal(ta, tb)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "p.mgnp"
        path.write_bytes(b"XXXX" + b"\x00" * 16)
        with pytest.raises(FormatError):
            load_params(path)
