"""
Tests for the GCN, GAT and Tran coupling functions.
"""
import numpy as np
import pytest

from oscgnn.couplings import (
    CouplingWeights,
    gat_attention,
    gat_coupling,
    gcn_coupling,
    prepare_graphs,
    tran_attention,
    tran_coupling,
)
from oscgnn.errors import DimensionError, EmptySoftmaxError
from oscgnn.graph import build_graph
from oscgnn.schemas import CouplingConfig
from oscgnn.tensor import ComplexMatrix, RealTensor, Tape, add, hadamard, numerical_gradient, relative_error, sum_all
from oscgnn.utils.reproducibility import make_rng


def segment_totals(values, rows, n):
    out = np.zeros((n, values.shape[1]))
    np.add.at(out, rows, values)
    return out


def permuted(g, perm):
    """Graph with node ``perm[i]`` renamed to ``i``."""
    inverse = np.argsort(perm)
    return build_graph([(inverse[i], inverse[j]) for i, j in g.edge_pairs()], g.n)


def make_weights(kind, complex_input=False, complex_weights=False, heads=2, seed=0):
    cfg = CouplingConfig(kind=kind, hidden_dim=4, heads=heads, attn_dim=3, kappa=0.7, complex_weights=complex_weights)
    return CouplingWeights.init(cfg, make_rng(seed, "coupling-test"), complex_input=complex_input)


class TestGCN:
    """Normalized-adjacency coupling."""

    def test_k2_hand_value(self, k2):
        graphs = prepare_graphs(k2)
        out = gcn_coupling(RealTensor([[1.0], [3.0]]), graphs.normalized, RealTensor([[1.0]]), 0.2)
        np.testing.assert_allclose(out.data, [[2.0], [2.0]])

    def test_lone_node_identity(self):
        graphs = prepare_graphs(build_graph([], 1))
        X = RealTensor([[0.5, 2.0]])
        np.testing.assert_allclose(gcn_coupling(X, graphs.normalized, RealTensor(np.eye(2)), 0.2).data, X.data)

    def test_negative_part_uses_slope(self, k2):
        graphs = prepare_graphs(k2)
        out = gcn_coupling(RealTensor([[-1.0], [-3.0]]), graphs.normalized, RealTensor([[1.0]]), 0.1)
        np.testing.assert_allclose(out.data, [[-0.2], [-0.2]])

    def test_row_mismatch(self, ring6):
        with pytest.raises(DimensionError):
            gcn_coupling(RealTensor(np.ones((5, 1))), prepare_graphs(ring6).normalized, RealTensor([[1.0]]), 0.2)

    def test_complex_weights_match_numpy(self, random_graph12, rng):
        graphs = prepare_graphs(random_graph12)
        Z = rng.standard_normal((12, 3)) + 1j * rng.standard_normal((12, 3))
        W = rng.standard_normal((3, 3)) + 1j * rng.standard_normal((3, 3))
        out = gcn_coupling(ComplexMatrix.from_numpy(Z), graphs.normalized, ComplexMatrix.from_numpy(W), 1.0)
        np.testing.assert_allclose(out.to_numpy(), graphs.normalized.to_dense() @ Z @ W, atol=1e-12)

    def test_shared_real_weights_act_per_plane(self, random_graph12, rng):
        graphs = prepare_graphs(random_graph12)
        Z = rng.standard_normal((12, 3)) + 1j * rng.standard_normal((12, 3))
        W = rng.standard_normal((3, 3))
        out = gcn_coupling(ComplexMatrix.from_numpy(Z), graphs.normalized, RealTensor(W), 1.0)
        np.testing.assert_allclose(out.to_numpy(), graphs.normalized.to_dense() @ Z @ W, atol=1e-12)


class TestGAT:
    """Attention over self-looped neighbourhoods."""

    def test_identical_features_give_uniform_attention(self, random_graph12):
        g = prepare_graphs(random_graph12).attention
        H = [RealTensor(np.ones((12, 4)))]
        weights = make_weights("gat")
        attention = gat_attention(H, g, weights.params["a_src"], weights.params["a_dst"], 2, 0.2)
        rows, _, _ = g.coo()
        counts = np.bincount(rows, minlength=12)
        for att in attention:
            np.testing.assert_allclose(att.data[:, 0], 1.0 / counts[rows])

    def test_rows_sum_to_one(self, random_graph12, rng):
        g = prepare_graphs(random_graph12).attention
        weights = make_weights("gat")
        attention = gat_attention([RealTensor(rng.standard_normal((12, 4)))], g, weights.params["a_src"], weights.params["a_dst"], 2, 0.2)
        rows, _, _ = g.coo()
        for att in attention:
            np.testing.assert_allclose(segment_totals(att.data, rows, 12), 1.0, atol=1e-12)

    def test_singleton_attention_is_one(self):
        g = prepare_graphs(build_graph([], 1)).attention
        att = gat_attention([RealTensor([[0.3, -1.0]])], g, RealTensor([[1.0], [2.0]]), RealTensor([[0.5], [0.1]]), 1, 0.2)
        assert att[0].data[0, 0] == 1.0

    def test_empty_neighbourhood(self):
        g = build_graph([(0, 1)], 3)
        with pytest.raises(EmptySoftmaxError):
            gat_coupling(RealTensor(np.ones((3, 2))), g, RealTensor(np.eye(2)), RealTensor([[1.0], [1.0]]), RealTensor([[1.0], [1.0]]), 0.2)

    def test_heads_concatenated(self, random_graph12, rng):
        weights = make_weights("gat", heads=2)
        X = RealTensor(rng.standard_normal((12, 4)))
        out = weights(X, prepare_graphs(random_graph12))
        assert out.shape == (12, 4)

    def test_complex_input_shape(self, random_graph12, rng):
        weights = make_weights("gat", complex_input=True, complex_weights=True)
        Z = ComplexMatrix.from_numpy(rng.standard_normal((12, 4)) + 1j * rng.standard_normal((12, 4)))
        out = weights(Z, prepare_graphs(random_graph12))
        assert isinstance(out, ComplexMatrix)
        assert out.shape == (12, 4)


class TestTran:
    """Difference coupling with dot-product attention."""

    def test_constant_features_give_zero(self, random_graph12):
        weights = make_weights("tran")
        out = weights(RealTensor(np.full((12, 4), 1.7)), prepare_graphs(random_graph12))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_two_node_single_difference(self, k2):
        g = prepare_graphs(k2).difference
        W_Q, W_K = RealTensor(np.zeros((1, 1))), RealTensor([[1.0]])
        out = tran_coupling(RealTensor([[0.0], [2.0]]), g, W_Q, W_K, kappa=1.0, slope=0.2)
        np.testing.assert_allclose(out.data, [[2.0], [-0.4]])

    def test_isolated_node_contributes_nothing(self, rng):
        g = build_graph([(0, 1), (1, 2)], 4)
        weights = make_weights("tran")
        out = tran_coupling(RealTensor(rng.standard_normal((4, 4))), g, weights.params["W_Q"], weights.params["W_K"], 0.7, 0.2, 2, 3)
        np.testing.assert_array_equal(out.data[3], 0.0)

    def test_edgeless_graph(self):
        g = build_graph([], 3)
        out = tran_coupling(RealTensor(np.ones((3, 2))), g, RealTensor(np.ones((2, 2))), RealTensor(np.ones((2, 2))), 1.0, 0.2)
        np.testing.assert_array_equal(out.data, 0.0)

    def test_attention_rows_sum_to_one(self, random_graph12, rng):
        g = prepare_graphs(random_graph12).difference
        weights = make_weights("tran")
        attention = tran_attention(RealTensor(rng.standard_normal((12, 4))), g, weights.params["W_Q"], weights.params["W_K"], 2, 3)
        rows, _, _ = g.coo()
        for att in attention:
            np.testing.assert_allclose(segment_totals(att.data, rows, 12), 1.0, atol=1e-12)

    def test_translation_invariant(self, random_graph12, rng):
        weights = make_weights("tran")
        graphs = prepare_graphs(random_graph12)
        X = rng.standard_normal((12, 4))
        shift = rng.standard_normal((1, 4))
        np.testing.assert_allclose(weights(RealTensor(X + shift), graphs).data, weights(RealTensor(X), graphs).data, atol=1e-12)

    def test_complex_translation_invariant(self, random_graph12, rng):
        weights = make_weights("tran", complex_input=True)
        graphs = prepare_graphs(random_graph12)
        Z = rng.standard_normal((12, 4)) + 1j * rng.standard_normal((12, 4))
        a = weights(ComplexMatrix.from_numpy(Z + (0.5 - 2j)), graphs).to_numpy()
        b = weights(ComplexMatrix.from_numpy(Z), graphs).to_numpy()
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_shift_of_one_graph_in_a_batch(self, rng):
        g = build_graph([(0, 1), (1, 2), (2, 0), (3, 4), (4, 5)], 6)
        ids = np.array([0, 0, 0, 1, 1, 1])
        weights = make_weights("tran")
        graphs = prepare_graphs(g, ids, 2)
        X = rng.standard_normal((6, 4))
        shifted = X.copy()
        shifted[3:] += rng.standard_normal((1, 4))
        np.testing.assert_allclose(weights(RealTensor(shifted), graphs).data[:3], weights(RealTensor(X), graphs).data[:3], atol=1e-12)


class TestCommon:
    """Properties every coupling shares."""

    @pytest.mark.parametrize("kind", ["gcn", "gat", "tran"])
    def test_permutation_equivariant(self, kind, random_graph12, rng):
        weights = make_weights(kind)
        X = rng.standard_normal((12, 4))
        perm = rng.permutation(12)
        base = weights(RealTensor(X), prepare_graphs(random_graph12)).data
        moved = weights(RealTensor(X[perm]), prepare_graphs(permuted(random_graph12, perm))).data
        np.testing.assert_allclose(moved, base[perm], atol=1e-12)

    @pytest.mark.parametrize("kind", ["gcn", "gat", "tran"])
    @pytest.mark.parametrize("complex_input", [False, True])
    def test_gradients(self, kind, complex_input, random_graph12, rng):
        weights = make_weights(kind, complex_input=complex_input, complex_weights=complex_input)
        graphs = prepare_graphs(random_graph12)
        if complex_input:
            X = ComplexMatrix(RealTensor(rng.standard_normal((12, 4)), requires_grad=True), RealTensor(rng.standard_normal((12, 4)), requires_grad=True))
            targets = [RealTensor(rng.standard_normal((12, 4))), RealTensor(rng.standard_normal((12, 4)))]
        else:
            X = RealTensor(rng.standard_normal((12, 4)), requires_grad=True)
            targets = [RealTensor(rng.standard_normal((12, 4)))]

        def loss():
            out = weights(X, graphs)
            planes = [out.re, out.im] if complex_input else [out]
            total = sum_all(hadamard(planes[0], targets[0]))
            for p, t in zip(planes[1:], targets[1:]):
                total = add(total, sum_all(hadamard(p, t)))
            return total

        params = list(weights.params.values()) + ([X.re, X.im] if complex_input else [X])
        with Tape() as tape:
            tape.backward(loss())
        for p in params:
            assert relative_error(p.grad, numerical_gradient(loss, p)) < 1e-6, p.name

    def test_weight_names(self):
        assert set(make_weights("gcn").params) == {"W"}
        assert set(make_weights("gat", complex_input=True, complex_weights=True).params) == {"W", "W_im", "a_src", "a_dst"}
        assert set(make_weights("tran").params) == {"W_Q", "W_K"}

    def test_prefixed_weights(self):
        cfg = CouplingConfig(kind="gat", hidden_dim=4, heads=2)
        weights = CouplingWeights.init(cfg, make_rng(0, "prefix"), prefix="layer0.")
        assert set(weights.params) == {"layer0.W", "layer0.a_src", "layer0.a_dst"}
        assert weights.weight() is weights.params["layer0.W"]
