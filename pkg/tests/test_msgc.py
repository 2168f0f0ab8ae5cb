import numpy as np

from stasmil.graphs import SpatialGraph, build_patch_graph
from stasmil.model import init_params
from stasmil.msgc import (BRANCHES, msgc_backward, msgc_forward, neighbor_mean,
                          neighbor_mean_backward, sage_aggregate)
from stasmil.tensorops import SeededRng, grad_check


def graph_of(coords, features, k=3):
    return build_patch_graph(np.asarray(coords, dtype=float), features, "small", k)


def agg_oracle(graph, h):
    """Documented order: self seeds the sum, neighbors added in edge order."""
    out = np.empty_like(h)
    for v in range(graph.n_nodes):
        acc = h[v].copy()
        cnt = 1
        for s, d in graph.edges:
            if s == v:
                acc = acc + h[d]
                cnt += 1
        out[v] = acc / cnt
    return out


class TestNeighborMean:
    def test_identical_neighbors_preserve_vector(self):
        feats = np.tile(np.array([2.0, -4.0, 6.0]), (4, 1))
        g = graph_of([(0, 0), (1, 0), (0, 1), (1, 1)], feats, k=2)
        agg, _ = neighbor_mean(g, feats)
        assert np.array_equal(agg, feats)

    def test_self_included_mean(self):
        feats = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        g = SpatialGraph(node_features=feats, coords=np.zeros((3, 2)),
                         edges=np.array([[0, 1], [0, 2]]), scale_tag="small")
        agg, _ = neighbor_mean(g, feats)
        assert np.allclose(agg[0], [1 / 3, 1 / 3])

    def test_matches_loop_oracle_exactly(self):
        rng = SeededRng(9)
        feats = rng.normal((10, 5))
        g = graph_of(rng.uniform(0, 10, (10, 2)), feats, k=3)
        agg, _ = neighbor_mean(g, feats)
        assert np.array_equal(agg, agg_oracle(g, feats))

    def test_isolated_node(self):
        feats = np.array([[5.0, 7.0]])
        g = graph_of([(0, 0)], feats, k=3)
        agg, _ = neighbor_mean(g, feats)
        assert np.array_equal(agg, feats)

    def test_backward_is_transpose(self):
        rng = SeededRng(4)
        feats = rng.normal((8, 3))
        g = graph_of(rng.uniform(0, 5, (8, 2)), feats, k=2)
        cot = rng.normal((8, 3))

        def loss_and_grad(p):
            agg, counts = neighbor_mean(g, p["h"])
            return float((cot * agg).sum()), {"h": neighbor_mean_backward(cot, g, counts)}

        for rep in grad_check(loss_and_grad, {"h": feats}, tol=1e-7):
            assert rep.passed, rep


class TestSageAggregate:
    def test_affine_composition(self):
        rng = SeededRng(2)
        feats = rng.normal((6, 4))
        g = graph_of(rng.uniform(0, 3, (6, 2)), feats, k=2)
        w, b = rng.normal((5, 4)), rng.normal((5,))
        out = sage_aggregate(g, feats, w, b, slope=0.01)
        agg, _ = neighbor_mean(g, feats)
        manual = agg @ w.T + b
        assert np.allclose(out, np.where(manual >= 0, manual, 0.01 * manual))


def branch_graphs(cfg, seed=7, n=12):
    rng = SeededRng(seed)
    graphs = {}
    for branch, dim in (("small", cfg.feature_dim), ("large", cfg.feature_dim),
                        ("tme", cfg.cell_feature_dim)):
        feats = rng.normal((n, dim))
        graphs[branch] = graph_of(rng.uniform(0, 50, (n, 2)), feats, k=3)
    return graphs


class TestMsgcForward:
    def test_single_node_shapes(self, small_cfg):
        graphs = branch_graphs(small_cfg, n=1)
        out, _ = msgc_forward(graphs, init_params(small_cfg, 0), small_cfg, None, False)
        for branch in BRANCHES:
            assert out[branch].shape == (1, small_cfg.hidden)

    def test_zero_weights_give_zero_rows(self, small_cfg):
        graphs = branch_graphs(small_cfg)
        params = init_params(small_cfg, 0)
        for name in list(params):
            if name.startswith("msgc.") and (name.endswith(".w") or name.endswith(".b")):
                params[name] = np.zeros_like(params[name])
        out, _ = msgc_forward(graphs, params, small_cfg, None, False)
        for branch in BRANCHES:
            assert np.array_equal(out[branch], np.zeros_like(out[branch]))

    def test_permutation_equivariance_bit_exact(self, small_cfg):
        params = init_params(small_cfg, 1)
        rng = SeededRng(33)
        coords = rng.uniform(0, 100, (14, 2))
        base = {}
        feats = {}
        for branch, dim in (("small", small_cfg.feature_dim),
                            ("large", small_cfg.feature_dim),
                            ("tme", small_cfg.cell_feature_dim)):
            feats[branch] = rng.normal((14, dim))
            base[branch] = graph_of(coords, feats[branch], k=3)
        out0, _ = msgc_forward(base, params, small_cfg, None, False)
        for trial in range(20):
            perm = SeededRng(trial).permutation(14)
            permuted = {b: graph_of(coords[perm], feats[b][perm], k=3) for b in BRANCHES}
            out_p, _ = msgc_forward(permuted, params, small_cfg, None, False)
            for branch in BRANCHES:
                assert np.array_equal(out_p[branch], out0[branch][perm]), (trial, branch)

    def test_dropout_off_deterministic(self, small_cfg):
        graphs = branch_graphs(small_cfg)
        params = init_params(small_cfg, 2)
        a, _ = msgc_forward(graphs, params, small_cfg, None, False)
        b, _ = msgc_forward(graphs, params, small_cfg, None, False)
        for branch in BRANCHES:
            assert np.array_equal(a[branch], b[branch])

    def test_branch_independence_under_dropout(self, small_cfg):
        graphs = branch_graphs(small_cfg)
        params = init_params(small_cfg, 2)
        out1, _ = msgc_forward(graphs, params, small_cfg, SeededRng(5), True)
        graphs["tme"].node_features[:] += 3.0
        out2, _ = msgc_forward(graphs, params, small_cfg, SeededRng(5), True)
        assert np.array_equal(out1["small"], out2["small"])
        assert np.array_equal(out1["large"], out2["large"])
        assert not np.array_equal(out1["tme"], out2["tme"])

    def test_gradients(self, small_cfg):
        graphs = branch_graphs(small_cfg, n=6)
        params = init_params(small_cfg, 3)
        probe = SeededRng(8)
        cots = {b: probe.normal((6, small_cfg.hidden)) for b in BRANCHES}
        names = [n for n in params if n.startswith("msgc.")]

        def loss_and_grad(sub):
            full = dict(params)
            full.update(sub)
            out, caches = msgc_forward(graphs, full, small_cfg, None, False)
            loss = sum(float((cots[b] * out[b]).sum()) for b in BRANCHES)
            grads = {k: np.zeros_like(v) for k, v in full.items()}
            msgc_backward({b: cots[b] for b in BRANCHES}, graphs, full, caches,
                          grads, small_cfg)
            return loss, {k: grads[k] for k in sub}

        sub = {n: params[n] for n in names}
        for rep in grad_check(loss_and_grad, sub, tol=1e-4, max_coords=8):
            assert rep.passed, rep
