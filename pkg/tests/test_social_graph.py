import pytest

from services.social_graph import SocialGraph, build_graph, split_edges, two_hop_neighbors


@pytest.fixture
def path_graph():
    # 0 - 1 - 2 - 3 - 4
    return SocialGraph(5, [(0, 1), (1, 2), (2, 3), (3, 4)])


def test_edges_are_undirected_and_sorted(path_graph):
    assert path_graph.edges == [(0, 1), (1, 2), (2, 3), (3, 4)]
    assert path_graph.has_edge(1, 0)
    assert path_graph.num_edges == 4
    assert path_graph.degree(2) == 2


def test_two_hop_neighbors(path_graph):
    assert two_hop_neighbors(path_graph, 0) == {1, 2}
    assert path_graph.two_hop_neighbors(2) == {0, 1, 3, 4}


def test_two_hop_on_isolated_user():
    assert SocialGraph(3, [(0, 1)]).two_hop_neighbors(2) == set()


def test_rejects_self_loops_and_unknown_users():
    graph = SocialGraph(3)
    with pytest.raises(ValueError):
        graph.add_edge(1, 1)
    with pytest.raises(ValueError):
        graph.add_edge(0, 3)


def test_build_graph_drops_unknown_users(toy_dataset):
    graph = build_graph([("u1", "u2"), ("u2", "ghost"), ("u3", "u1")], toy_dataset)
    assert graph.edges == [(0, 1), (0, 2)]


def test_split_edges_is_disjoint_and_complete(path_graph):
    kept, held = split_edges(path_graph, 0.25, seed=3)
    assert len(held) == 1
    assert sorted(kept.edges + held) == path_graph.edges
    assert split_edges(path_graph, 0.25, seed=3)[1] == held


def test_split_edges_on_empty_graph():
    kept, held = split_edges(SocialGraph(4), 0.1, seed=0)
    assert held == [] and kept.num_edges == 0
