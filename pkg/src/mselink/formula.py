"""Bracket-notation hierarchical loglinear formulas and their design matrices.

``"[Ac][ac][Ca]"`` lists the maximal interaction terms; every subset of a
maximal term (and the intercept) is part of the model. Variables are binary
and coded by treatment contrasts with level 0 as reference, so the column of
term T is 1 exactly in cells where every variable of T equals 1.
"""

from __future__ import annotations

import itertools
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .ingest import VariableSchema

Term = frozenset

INTERCEPT: frozenset = frozenset()


class FormulaError(ValueError):
    def __init__(self, message: str, position: int | None = None):
        self.position = position
        super().__init__(f"{message} (at position {position})" if position is not None else message)


class DesignError(ValueError):
    def __init__(self, message: str, aliased: Sequence[str] = ()):
        self.aliased = list(aliased)
        super().__init__(message)


def term_key(term: Iterable[str], variables: Sequence[str]) -> tuple:
    idx = sorted(variables.index(v) for v in term)
    return (len(idx), idx)


def term_label(term: Iterable[str], variables: Sequence[str]) -> str:
    names = sorted(term, key=variables.index)
    return ":".join(names) if names else "(Intercept)"


@dataclass(frozen=True)
class ModelFormula:
    """A hierarchical formula over an ordered variable universe.

    ``maximal_terms`` holds the written terms with redundant ones (subsets of
    other written terms) removed, in canonical order.
    """

    variables: tuple[str, ...]
    maximal_terms: tuple[frozenset, ...]

    @classmethod
    def from_terms(cls, variables: Sequence[str], terms: Iterable[Iterable[str]]) -> "ModelFormula":
        variables = tuple(variables)
        terms = {frozenset(t) for t in terms}
        for t in terms:
            bad = [v for v in t if v not in variables]
            if bad:
                raise FormulaError(f"unknown variable(s) {bad}")
        maximal = [t for t in terms if t and not any(t < u for u in terms)]
        maximal.sort(key=lambda t: term_key(t, variables))
        return cls(variables, tuple(maximal))

    @cached_property
    def expanded_terms(self) -> tuple[frozenset, ...]:
        out = {INTERCEPT}
        for t in self.maximal_terms:
            items = sorted(t)
            for r in range(1, len(items) + 1):
                out.update(frozenset(c) for c in itertools.combinations(items, r))
        return tuple(sorted(out, key=lambda t: term_key(t, self.variables)))

    @property
    def labels(self) -> list[str]:
        return [term_label(t, self.variables) for t in self.expanded_terms]

    def render(self) -> str:
        single = all(len(v) == 1 for v in self.variables)
        sep = "" if single else " "
        return "".join(
            "[" + sep.join(sorted(t, key=self.variables.index)) + "]" for t in self.maximal_terms
        )

    def __str__(self) -> str:
        return self.render()

    def with_variables(self, variables: Sequence[str]) -> "ModelFormula":
        return ModelFormula.from_terms(variables, self.maximal_terms)

    def used_variables(self) -> set[str]:
        return set().union(*self.maximal_terms) if self.maximal_terms else set()


def parse(text: str, schema: VariableSchema | Sequence[str], latent: Sequence[str] = ()) -> ModelFormula:
    """Parse ``"[Ac][ac][Ca]"``-style text.

    Names are matched case-sensitively, longest known name first, so
    multi-letter names (``[Age B]``) work; whitespace, ``:`` and ``,`` inside
    brackets are separators.
    """
    base = schema.variables if isinstance(schema, VariableSchema) else tuple(schema)
    variables = tuple(base) + tuple(v for v in latent if v not in base)
    names = sorted(variables, key=len, reverse=True)
    terms: list[set[str]] = []
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch.isspace():
            i += 1
            continue
        if ch != "[":
            raise FormulaError(f"expected '[' but found {ch!r}", i)
        start = i
        i += 1
        current: set[str] = set()
        while True:
            if i >= n:
                raise FormulaError("unbalanced bracket", start)
            ch = text[i]
            if ch == "]":
                i += 1
                break
            if ch == "[":
                raise FormulaError("nested '['", i)
            if ch.isspace() or ch in ":,*":
                i += 1
                continue
            for name in names:
                if text.startswith(name, i):
                    current.add(name)
                    i += len(name)
                    break
            else:
                raise FormulaError(f"unknown variable starting {text[i:i + 8]!r}", i)
        if not current:
            raise FormulaError("empty bracket", start)
        terms.append(current)
    if not terms:
        raise FormulaError("formula has no terms", 0)
    return ModelFormula.from_terms(variables, terms)


def validate_estimability(formula: ModelFormula, schema: VariableSchema) -> list[tuple[frozenset, str]]:
    """Return minimal inestimable terms with the reason; empty when fine.

    A term cannot be estimated when it joins a register with its own
    ethnicity (that ethnicity is never seen with the register out), or when it
    joins all registers (the all-out margin is never seen).
    """
    regs = set(schema.registers)
    pairs = [frozenset(p) for p in schema.pairing.items()]
    bad: list[tuple[frozenset, str]] = []
    for t in formula.expanded_terms:
        if any(p <= t for p in pairs):
            reason = "register with its own ethnicity"
        elif regs <= t:
            reason = "all registers jointly"
        else:
            continue
        if not any(b < t for b, _ in bad):
            bad.append((t, reason))
    return bad


def describe_inestimable(formula: ModelFormula, bad: list[tuple[frozenset, str]]) -> str:
    return "; ".join(
        f"inestimable term {''.join(sorted(t, key=formula.variables.index))} ({why})" for t, why in bad
    )


class CellSpace:
    """All 2^k binary cells over ordered variables; first variable slowest."""

    def __init__(self, variables: Sequence[str]):
        self.variables = tuple(variables)
        k = len(self.variables)
        grid = np.indices((2,) * k).reshape(k, -1).T
        self.cells = np.ascontiguousarray(grid, dtype=np.int8)

    def __len__(self) -> int:
        return len(self.cells)

    def column(self, name: str) -> np.ndarray:
        return self.cells[:, self.variables.index(name)]

    def all_zero(self, names: Iterable[str]) -> np.ndarray:
        mask = np.ones(len(self), dtype=bool)
        for name in names:
            mask &= self.column(name) == 0
        return mask

    def index_of(self, values: dict[str, int]) -> int:
        idx = 0
        for v in self.variables:
            idx = idx * 2 + int(values[v])
        return idx


@dataclass(frozen=True)
class DesignMatrix:
    matrix: np.ndarray
    terms: tuple[frozenset, ...]
    labels: tuple[str, ...]
    space: CellSpace
    structural: np.ndarray

    @property
    def estimable(self) -> np.ndarray:
        return ~self.structural


def build_design(formula: ModelFormula, space: CellSpace, structural: np.ndarray | None = None) -> DesignMatrix:
    """Treatment-coded design over every cell of ``space``.

    ``structural`` marks cells excluded from the likelihood; the design must
    have full column rank on the remaining cells.
    """
    if tuple(space.variables) != formula.variables:
        space_vars = set(space.variables)
        if not set(formula.variables) <= space_vars:
            raise DesignError("cell space lacks formula variables")
    cols = []
    for t in formula.expanded_terms:
        col = np.ones(len(space), dtype=np.float64)
        for v in t:
            col *= space.column(v)
        cols.append(col)
    X = np.column_stack(cols)
    if structural is None:
        structural = np.zeros(len(space), dtype=bool)
    labels = tuple(formula.labels)
    aliased = _aliased_columns(X[~structural])
    if aliased:
        raise DesignError(
            "design is rank deficient; aliased terms: " + ", ".join(labels[j] for j in aliased),
            [labels[j] for j in aliased],
        )
    return DesignMatrix(X, formula.expanded_terms, labels, space, np.asarray(structural, dtype=bool))


def _aliased_columns(X: np.ndarray, tol: float = 1e-9) -> list[int]:
    """Columns that are linear combinations of earlier columns."""
    aliased = []
    basis = np.zeros((X.shape[0], 0))
    for j in range(X.shape[1]):
        col = X[:, j]
        if basis.shape[1]:
            coef, *_ = np.linalg.lstsq(basis, col, rcond=None)
            resid = col - basis @ coef
        else:
            resid = col
        if np.linalg.norm(resid) <= tol * max(1.0, np.linalg.norm(col)):
            aliased.append(j)
        else:
            basis = np.column_stack([basis, resid / np.linalg.norm(resid)])
    return aliased
