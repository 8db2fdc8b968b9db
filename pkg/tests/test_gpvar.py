import json

import numpy as np
import pytest

from relcp.gpvar import (
    GPVARParams,
    Graph,
    community_graph,
    normalize_propagation,
    paper_gpvar_params,
    read_sidecar_graph,
    simulate_gpvar,
    write_dataset,
)


def is_connected(adjacency):
    n = adjacency.shape[0]
    seen = {0}
    frontier = [0]
    while frontier:
        i = frontier.pop()
        for j in np.nonzero(adjacency[i])[0]:
            if j not in seen:
                seen.add(int(j))
                frontier.append(int(j))
    return len(seen) == n


class TestCommunityGraph:
    def test_single_community_is_complete(self):
        g = community_graph(4, 1)
        assert g.n_edges == 6
        assert np.all(g.adjacency + np.eye(4) == 1.0)

    def test_two_communities(self):
        # hand enumeration: cliques {0,1} and {2,3} plus ring bridges
        # (1,2) and (3,0) -> 4 edges
        g = community_graph(4, 2)
        assert g.n_edges == 4
        assert set(g.edge_list()) == {(0, 1), (2, 3), (1, 2), (0, 3)}

    def test_reference_size_edge_count(self):
        # 5 cliques of 12 plus one bridge per ring step: 5*66 + 5
        g = community_graph(60, 5)
        assert g.n_edges == 5 * (12 * 11 // 2) + 5

    def test_symmetric_and_connected(self):
        for n, c in ((60, 5), (12, 3), (8, 2), (6, 1)):
            g = community_graph(n, c)
            assert np.array_equal(g.adjacency, g.adjacency.T)
            assert np.all(np.diag(g.adjacency) == 0)
            assert is_connected(g.adjacency)

    def test_indivisible_errors(self):
        with pytest.raises(ValueError, match="divide"):
            community_graph(10, 3)

    def test_bad_community_count(self):
        with pytest.raises(ValueError, match="at least one"):
            community_graph(10, 0)


class TestNormalizePropagation:
    def test_single_edge(self):
        g = normalize_propagation(Graph(adjacency=np.array([[0.0, 1.0], [1.0, 0.0]])))
        assert np.allclose(g.propagation, [[0.0, 1.0], [1.0, 0.0]])

    def test_isolated_node(self):
        adj = np.zeros((3, 3))
        adj[0, 1] = adj[1, 0] = 1.0
        g = normalize_propagation(Graph(adjacency=adj))
        assert np.all(g.propagation[2] == 0.0)
        assert np.all(g.propagation[:, 2] == 0.0)

    def test_triangle(self):
        adj = np.ones((3, 3)) - np.eye(3)
        g = normalize_propagation(Graph(adjacency=adj))
        expected = (np.ones((3, 3)) - np.eye(3)) * 0.5
        assert np.allclose(g.propagation, expected)


class TestGraphType:
    def test_rejects_asymmetric(self):
        with pytest.raises(ValueError, match="symmetric"):
            Graph(adjacency=np.array([[0.0, 1.0], [0.0, 0.0]]))

    def test_rejects_self_loops(self):
        with pytest.raises(ValueError, match="diagonal"):
            Graph(adjacency=np.eye(2))

    def test_rejects_weights(self):
        with pytest.raises(ValueError, match="binary"):
            Graph(adjacency=np.array([[0.0, 0.5], [0.5, 0.0]]))


class TestSimulate:
    def test_zero_theta_zero_noise_fixed_point(self):
        graph = community_graph(4, 2)
        params = GPVARParams(theta=np.zeros((2, 3)), a=0.5, b=0.5, sigma=0.0)
        out = simulate_gpvar(params, graph, n_steps=20, burn_in=0)
        assert np.all(out.values == 0.0)

    def test_one_step_hand_evaluation(self):
        # two nodes, one edge, Q=L=1, theta=[[1]], a=1, b=0, sigma=0:
        # the filter reduces to the identity, so x_1 = tanh(x_0)
        graph = Graph(adjacency=np.array([[0.0, 1.0], [1.0, 0.0]]))
        params = GPVARParams(theta=np.array([[1.0]]), a=1.0, b=0.0, sigma=0.0)
        out = simulate_gpvar(
            params, graph, n_steps=1, burn_in=0, initial=np.array([[1.0, 0.0]])
        )
        assert np.allclose(out.values[0], [np.tanh(1.0), 0.0])

    def test_paper_parameter_set(self):
        params = paper_gpvar_params()
        assert params.theta.tolist() == [[2.5, -2.0, -0.5], [1.0, 3.0, 0.0]]
        assert (params.a, params.b, params.sigma) == (0.5, 0.5, 0.4)
        assert (params.n_lags, params.n_powers) == (2, 3)

    @pytest.mark.parametrize("filter_matrix,offset", [("propagation", 0), ("adjacency", 1)])
    def test_trajectory_satisfies_recursion(self, filter_matrix, offset):
        # reconstruct the deterministic part from the output and check the
        # innovations are bounded-complement noise of the right scale
        graph = normalize_propagation(community_graph(12, 3))
        params = paper_gpvar_params()
        rng = np.random.default_rng(3)
        out = simulate_gpvar(
            params, graph, n_steps=4000, burn_in=50, rng=rng,
            filter_matrix=filter_matrix, filter_lag_offset=offset,
        )
        x = out.values
        shift = graph.propagation if filter_matrix == "propagation" else graph.adjacency
        powers = [np.eye(12), shift, shift @ shift]
        lag_filters = [
            sum(params.theta[q, l] * powers[l] for l in range(3)) for q in range(2)
        ]
        first = offset + 2
        det = np.empty_like(x[first:-1])
        for i, t in enumerate(range(first, x.shape[0] - 1)):
            filt = sum(lag_filters[q] @ x[t - offset - q] for q in range(2))
            det[i] = params.a * np.tanh(filt) + params.b * np.tanh(x[t - 1])
        innovations = x[first + 1 :] - det
        assert np.max(np.abs(det)) <= abs(params.a) + abs(params.b) + 1e-9
        assert abs(innovations.std() - params.sigma) < 0.02
        assert abs(innovations.mean()) < 0.02

    def test_zero_noise_reproducible(self):
        graph = community_graph(6, 2)
        params = GPVARParams(theta=np.array([[0.8, 0.3]]), a=0.7, b=0.2, sigma=0.0)
        init = np.random.default_rng(0).normal(size=(3, 6))
        a = simulate_gpvar(params, graph, 50, burn_in=5, initial=init)
        b = simulate_gpvar(params, graph, 50, burn_in=5, initial=init)
        assert np.array_equal(a.values, b.values)

    def test_seeded_noise_reproducible(self):
        graph = community_graph(6, 2)
        params = paper_gpvar_params()
        a = simulate_gpvar(params, graph, 50, rng=np.random.default_rng(7))
        b = simulate_gpvar(params, graph, 50, rng=np.random.default_rng(7))
        assert np.array_equal(a.values, b.values)

    def test_variance_stable_across_seeds(self):
        graph = community_graph(60, 5)
        params = paper_gpvar_params()
        variances = []
        for seed in range(5):
            out = simulate_gpvar(
                params, graph, 3000, rng=np.random.default_rng(seed),
                filter_matrix="adjacency", filter_lag_offset=1,
            )
            variances.append(out.values.var())
        variances = np.asarray(variances)
        assert variances.std() / variances.mean() < 0.10

    def test_invalid_filter_matrix(self):
        graph = community_graph(4, 2)
        with pytest.raises(ValueError, match="filter_matrix"):
            simulate_gpvar(paper_gpvar_params(), graph, 10, filter_matrix="foo")


class TestDatasetFiles:
    def test_sidecar_round_trip(self, tmp_path):
        graph = community_graph(8, 2)
        params = paper_gpvar_params()
        out = simulate_gpvar(params, graph, 30, rng=np.random.default_rng(0))
        write_dataset(
            out, graph, params, seed=0, burn_in=100,
            values_path=tmp_path / "values.csv",
            sidecar_path=tmp_path / "sidecar.json",
            filter_matrix="adjacency", filter_lag_offset=1,
        )
        sidecar = json.loads((tmp_path / "sidecar.json").read_text())
        assert sidecar["params"]["theta"] == params.theta.tolist()
        assert sidecar["filter_matrix"] == "adjacency"
        back = read_sidecar_graph(tmp_path / "sidecar.json")
        assert np.array_equal(back.adjacency, graph.adjacency)
