"""Interaction graphs and collapsibility over covariates.

A covariate that defines the partial coverage of a register can be ignored
(the model collapsed over it) unless it is an interior node of a short path
between two registers. A short path is an induced path: no two nodes of the
path that are not consecutive on it are joined by an edge.

One case is invisible to paths. A covariate adjacent to every register can
only be collapsed over if its whole neighbourhood sits inside one fitted
term, and that term would join all registers, which a population-size model
can never estimate. Such a covariate is reported as not collapsible with its
register neighbourhood as witness.

The text format has one header line naming the registers, further nodes
taken from the edges (or an optional ``covariates:`` line), one
``U -- V`` edge per line and ``#`` comments::

    registers: A B
    A -- X1
    X1 -- B
"""

from __future__ import annotations

from collections.abc import Iterable, Iterator
from dataclasses import dataclass
from pathlib import Path

import networkx as nx

REGISTER = "register"
COVARIATE = "covariate"


class GraphError(ValueError):
    pass


class InteractionGraph:
    """A simple graph whose nodes are typed as register or covariate."""

    def __init__(self, registers: Iterable[str], edges: Iterable[tuple[str, str]] = (), covariates: Iterable[str] = ()):
        self._g = nx.Graph()
        registers = list(registers)
        if len(set(registers)) < 2:
            raise GraphError("an interaction graph needs at least two registers")
        for r in registers:
            self._g.add_node(r, kind=REGISTER)
        for c in covariates:
            if c in self._g and self._g.nodes[c]["kind"] == REGISTER:
                raise GraphError(f"{c} is declared both register and covariate")
            self._g.add_node(c, kind=COVARIATE)
        for u, v in edges:
            self.add_edge(u, v)

    def add_edge(self, u: str, v: str) -> None:
        if u == v:
            raise GraphError(f"self-loop on {u}")
        for n in (u, v):
            if n not in self._g:
                self._g.add_node(n, kind=COVARIATE)
        self._g.add_edge(u, v)

    @property
    def nodes(self) -> list[str]:
        return list(self._g.nodes)

    @property
    def registers(self) -> list[str]:
        return [n for n, k in self._g.nodes(data="kind") if k == REGISTER]

    @property
    def covariates(self) -> list[str]:
        return [n for n, k in self._g.nodes(data="kind") if k == COVARIATE]

    @property
    def edges(self) -> list[tuple[str, str]]:
        return list(self._g.edges)

    def kind(self, node: str) -> str:
        self._require(node)
        return self._g.nodes[node]["kind"]

    def neighbors(self, node: str) -> set[str]:
        return set(self._g[node])

    def has_edge(self, u: str, v: str) -> bool:
        return self._g.has_edge(u, v)

    def to_networkx(self) -> nx.Graph:
        return self._g.copy()

    def relabel(self, mapping: dict[str, str]) -> "InteractionGraph":
        m = lambda n: mapping.get(n, n)  # noqa: E731
        return InteractionGraph(
            [m(r) for r in self.registers],
            [(m(u), m(v)) for u, v in self.edges],
            [m(c) for c in self.covariates],
        )

    def _require(self, node: str) -> None:
        if node not in self._g:
            raise GraphError(f"node {node!r} is not in the graph")

    def __repr__(self) -> str:
        return f"InteractionGraph(registers={self.registers}, edges={self.edges})"


def _induced_paths(g: InteractionGraph, u: str, v: str) -> Iterator[tuple[str, ...]]:
    adj = {n: g.neighbors(n) for n in g.nodes}
    path = [u]
    on_path = {u}

    def extend():
        last = path[-1]
        for w in sorted(adj[last]):
            if w in on_path:
                continue
            # w may touch the path only at its last node
            if any(p in adj[w] for p in path[:-1]):
                continue
            path.append(w)
            on_path.add(w)
            if w == v:
                yield tuple(path)
            else:
                yield from extend()
            path.pop()
            on_path.discard(w)

    yield from extend()


def short_paths(g: InteractionGraph, u: str, v: str) -> list[tuple[str, ...]]:
    """All induced paths between registers ``u`` and ``v``."""
    for n in (u, v):
        g._require(n)
        if g.kind(n) != REGISTER:
            raise GraphError(f"{n} is not a register")
    if u == v:
        raise GraphError("the end points of a short path must differ")
    return sorted(_induced_paths(g, u, v), key=lambda p: (len(p), p))


PATH = "short path"
ALL_REGISTERS = "adjacent to every register"


@dataclass(frozen=True)
class Verdict:
    covariate: str
    collapsible: bool
    witness: tuple[str, ...] | None = None
    reason: str | None = None  # PATH or ALL_REGISTERS when not collapsible

    def describe(self) -> str:
        if self.collapsible:
            return f"{self.covariate}: collapsible"
        if self.reason == ALL_REGISTERS:
            return f"{self.covariate}: not collapsible ({ALL_REGISTERS}: {', '.join(self.witness)})"
        return f"{self.covariate}: not collapsible ({'–'.join(self.witness)})"


def is_collapsible(g: InteractionGraph, covariate: str) -> Verdict:
    """Collapsible unless ``covariate`` is interior to a short path between
    two registers (the shortest such path is the witness) or is adjacent to
    every register (the registers are the witness)."""
    if g.kind(covariate) != COVARIATE:
        raise GraphError(f"{covariate} is a register, not a covariate")
    regs = sorted(g.registers)
    found = []
    for i, u in enumerate(regs):
        for v in regs[i + 1:]:
            found.extend(p for p in _induced_paths(g, u, v) if covariate in p[1:-1])
    if found:
        return Verdict(covariate, False, min(found, key=lambda p: (len(p), p)), PATH)
    if set(regs) <= g.neighbors(covariate):
        return Verdict(covariate, False, tuple(regs), ALL_REGISTERS)
    return Verdict(covariate, True)


def collapsibility(g: InteractionGraph) -> list[Verdict]:
    return [is_collapsible(g, c) for c in sorted(g.covariates)]


def parse_graph(text: str) -> InteractionGraph:
    registers = None
    covariates: list[str] = []
    edges = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        head, sep, rest = line.partition(":")
        if sep and head.strip().lower() in ("registers", "covariates"):
            names = rest.replace(",", " ").split()
            if head.strip().lower() == "registers":
                registers = names
            else:
                covariates.extend(names)
            continue
        parts = [p.strip() for p in line.split("--")]
        if len(parts) != 2 or not all(parts) or any(" " in p for p in parts):
            raise GraphError(f"line {lineno}: expected 'U -- V', got {raw!r}")
        edges.append((parts[0], parts[1]))
    if registers is None:
        raise GraphError("missing 'registers:' header line")
    return InteractionGraph(registers, edges, covariates)


def read_graph(path: str | Path) -> InteractionGraph:
    return parse_graph(Path(path).read_text(encoding="utf-8"))
