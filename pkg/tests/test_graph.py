import networkx as nx
import pytest

from conftest import CONFIGS
from oracles import chordless_paths_bruteforce
from mselink.graph import (
    GraphError,
    InteractionGraph,
    collapsibility,
    is_collapsible,
    parse_graph,
    read_graph,
    short_paths,
)


def graph(edges, registers=("A", "B")):
    return InteractionGraph(registers, edges)


class TestShortPaths:
    def test_covariate_between_two_registers(self):
        assert short_paths(graph([("A", "X1"), ("X1", "B")]), "A", "B") == [("A", "X1", "B")]

    def test_chord_removes_the_longer_path(self):
        assert short_paths(graph([("A", "X"), ("X", "B"), ("A", "B")]), "A", "B") == [("A", "B")]

    def test_one_sided_covariate_gives_no_path(self):
        assert short_paths(graph([("A", "X1")]), "A", "B") == []

    def test_long_induced_path(self):
        g = graph([("A", "X"), ("X", "Y"), ("Y", "B"), ("A", "Z"), ("Z", "B")])
        assert short_paths(g, "A", "B") == [("A", "Z", "B"), ("A", "X", "Y", "B")]

    def test_endpoints_must_be_registers(self):
        g = graph([("A", "X"), ("X", "B")])
        with pytest.raises(GraphError, match="not a register"):
            short_paths(g, "A", "X")
        with pytest.raises(GraphError, match="not in the graph"):
            short_paths(g, "A", "Q")

    def test_agrees_with_bruteforce_on_a_dense_graph(self):
        g = nx.gnp_random_graph(8, 0.4, seed=3)
        g = nx.relabel_nodes(g, {i: f"n{i}" for i in g})
        ig = InteractionGraph(["n0", "n7"], g.edges, [f"n{i}" for i in range(1, 7)])
        assert short_paths(ig, "n0", "n7") == chordless_paths_bruteforce(g, "n0", "n7")


class TestCollapsibility:
    def test_m2_is_collapsible(self):
        v = is_collapsible(read_graph(CONFIGS / "graphs" / "m2.txt"), "X1")
        assert v.collapsible and v.describe() == "X1: collapsible"

    def test_m3_is_not_collapsible(self):
        v = is_collapsible(read_graph(CONFIGS / "graphs" / "m3.txt"), "X1")
        assert not v.collapsible and v.witness == ("A", "X1", "B")
        assert v.describe() == "X1: not collapsible (A–X1–B)"

    def test_chord_between_registers_makes_it_collapsible(self):
        assert is_collapsible(read_graph(CONFIGS / "graphs" / "m17.txt"), "X").collapsible

    def test_age_with_direct_register_edge(self):
        g = read_graph(CONFIGS / "graphs" / "age_four_registers.txt")
        assert is_collapsible(g, "Age").collapsible

    def test_covariate_adjacent_to_all_of_three_registers(self):
        g = read_graph(CONFIGS / "graphs" / "three_registers_maximal_x.txt")
        v = is_collapsible(g, "X")
        assert not v.collapsible and v.witness == ("A", "B", "C")
        assert v.describe() == "X: not collapsible (adjacent to every register: A, B, C)"

    def test_covariate_on_every_register_without_a_path(self):
        # no induced path runs through X, but its neighbourhood needs the AB term
        g = graph([("A", "X"), ("X", "B"), ("A", "B")])
        assert short_paths(g, "A", "B") == [("A", "B")]
        assert is_collapsible(g, "X").reason == "adjacent to every register"

    def test_only_register_pairs_count(self):
        # X -- W -- Y is a path through W, but its endpoints are covariates
        g = InteractionGraph(["A", "B"], [("X", "W"), ("W", "Y"), ("A", "B"), ("A", "X")])
        assert is_collapsible(g, "W").collapsible
        assert is_collapsible(g, "X").collapsible

    def test_register_is_not_a_covariate(self):
        with pytest.raises(GraphError, match="is a register"):
            is_collapsible(graph([("A", "B")]), "A")

    def test_empty_covariate_set(self):
        assert collapsibility(graph([("A", "B")])) == []

    def test_witness_is_shortest(self):
        g = graph([("A", "X"), ("X", "B"), ("A", "Y"), ("Y", "Z"), ("Z", "X")])
        assert is_collapsible(g, "X").witness == ("A", "X", "B")


class TestParse:
    def test_text_format(self):
        g = parse_graph("# comment\nregisters: A, B\ncovariates: W\nA -- X1  # trailing\nX1 -- B\n")
        assert sorted(g.registers) == ["A", "B"] and sorted(g.covariates) == ["W", "X1"]
        assert g.has_edge("B", "X1")

    def test_missing_header(self):
        with pytest.raises(GraphError, match="registers"):
            parse_graph("A -- B\n")

    def test_bad_edge_line(self):
        with pytest.raises(GraphError, match="line 2"):
            parse_graph("registers: A B\nA - B\n")

    def test_self_loop(self):
        with pytest.raises(GraphError, match="self-loop"):
            parse_graph("registers: A B\nA -- A\n")

    def test_one_register_is_not_enough(self):
        with pytest.raises(GraphError, match="two registers"):
            InteractionGraph(["A"])

    def test_name_declared_twice(self):
        with pytest.raises(GraphError, match="both register and covariate"):
            InteractionGraph(["A", "B"], covariates=["A"])


def test_relabel_keeps_verdicts():
    g = graph([("A", "X1"), ("X1", "B")])
    h = g.relabel({"A": "P", "B": "Q", "X1": "Z"})
    assert is_collapsible(h, "Z").witness == ("P", "Z", "Q")
