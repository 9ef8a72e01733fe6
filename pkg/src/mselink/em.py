"""EM for loglinear models on incomplete register tables.

Each observed pattern is compatible with a set of completed binary cells:
those agreeing with it on every recorded value. Item-missing and
structurally missing ethnicities, and any latent variable in the formula,
are free coordinates. The E-step spreads each pattern's count over its
compatible cells in proportion to the current fitted means; the M-step is an
ordinary Poisson loglinear fit on the completed counts.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
from scipy import sparse

from .formula import (
    CellSpace,
    DesignMatrix,
    ModelFormula,
    build_design,
    describe_inestimable,
    validate_estimability,
)
from .ingest import IncompleteTable
from .loglin import FitOptions, FittedLoglinear, fit_poisson, poisson_deviance

log = logging.getLogger(__name__)


class ModelError(ValueError):
    """The formula cannot be fitted to this table."""


class EMError(RuntimeError):
    pass


@dataclass(frozen=True)
class EMOptions:
    tol_loglik: float = 1e-9
    tol_counts: float = 1e-8
    max_iter: int = 5_000
    fit: FitOptions = field(default_factory=FitOptions)
    strict_monotone: bool = True


@dataclass(frozen=True)
class MissingStructure:
    """Pattern-by-cell compatibility for one table and one cell space."""

    space: CellSpace
    structural: np.ndarray
    compat: sparse.csr_matrix  # patterns x cells, 0/1
    counts: np.ndarray
    registers: tuple[str, ...] = ()

    @property
    def n_patterns(self) -> int:
        return self.compat.shape[0]


def compatibility(table: IncompleteTable, space: CellSpace) -> MissingStructure:
    schema = table.schema
    structural = space.all_zero(schema.registers)
    cols = [space.variables.index(v) for v in schema.variables]
    cells = space.cells[:, cols]
    rows, idx = [], []
    for i, p in enumerate(table.patterns):
        mask = np.ones(len(space), dtype=bool)
        for j, v in enumerate(p):
            if v >= 0:
                mask &= cells[:, j] == v
        mask &= ~structural
        hit = np.flatnonzero(mask)
        if not len(hit):
            raise ModelError(f"pattern {i} has no compatible completed cell")
        rows.append(np.full(len(hit), i))
        idx.append(hit)
    r = np.concatenate(rows)
    c = np.concatenate(idx)
    M = sparse.csr_matrix((np.ones(len(r)), (r, c)), shape=(len(table), len(space)))
    return MissingStructure(space, structural, M, np.asarray(table.counts, dtype=float), tuple(schema.registers))


@dataclass(frozen=True)
class CompletedTable:
    """Expected complete-data counts plus where each pattern's mass went."""

    space: CellSpace
    counts: np.ndarray
    allocation: sparse.csr_matrix  # patterns x cells, expected persons

    def distribution(self, pattern: int) -> dict[int, float]:
        row = self.allocation.getrow(pattern)
        return {int(j): float(v) for j, v in zip(row.indices, row.data)}

    @property
    def total(self) -> float:
        return float(self.counts.sum())


def _allocate(ms: MissingStructure, weights: np.ndarray) -> sparse.csr_matrix:
    M = ms.compat
    mass = M @ weights
    ok = mass > 0
    scale = np.zeros_like(mass)
    scale[ok] = ms.counts[ok] / mass[ok]
    alloc = sparse.diags(scale) @ M @ sparse.diags(weights)
    if not ok.all():
        # degenerate start: uniform split where the current fit puts no mass
        size = np.asarray(M.sum(axis=1)).ravel()
        bad = ~ok
        uni = sparse.diags(np.where(bad, ms.counts / np.maximum(size, 1), 0.0)) @ M
        alloc = alloc + uni
    return sparse.csr_matrix(alloc)


def e_step(ms: MissingStructure, fitted: np.ndarray) -> CompletedTable:
    alloc = _allocate(ms, np.asarray(fitted, dtype=float))
    counts = np.asarray(alloc.sum(axis=0)).ravel()
    return CompletedTable(ms.space, counts, alloc)


def e_step_counts(ms: MissingStructure, fitted: np.ndarray) -> np.ndarray:
    """Fast path of ``e_step`` returning only completed counts."""
    M = ms.compat
    mass = M @ fitted
    if np.all(mass > 0):
        return fitted * (M.T @ (ms.counts / mass))
    return e_step(ms, fitted).counts


def uniform_start(ms: MissingStructure) -> np.ndarray:
    return e_step_counts(ms, (~ms.structural).astype(float))


def observed_loglik(ms: MissingStructure, fitted: np.ndarray) -> float:
    """Poisson log-likelihood of the observed patterns (constants dropped).

    With an ignorable missingness mechanism the pattern means are the sums of
    the compatible cell means times a mechanism factor that does not involve
    the loglinear parameters; that factor is omitted.
    """
    mass = ms.compat @ fitted
    y = ms.counts
    pos = y > 0
    return float(np.sum(y[pos] * np.log(mass[pos])) - fitted[~ms.structural].sum())


def pattern_means(ms: MissingStructure, fitted: np.ndarray) -> np.ndarray:
    return ms.compat @ fitted


def saturated_loglik(ms: MissingStructure, tol: float = 1e-10, max_iter: int = 100_000) -> float:
    """Observed-data log-likelihood with unrestricted means on estimable cells.

    The M-step of the saturated model is the identity, so EM reduces to
    repeated E-steps. The result depends only on the observed patterns and
    the set of free coordinates, not on any formula.
    """
    mu = uniform_start(ms)
    ll = observed_loglik(ms, mu)
    for _ in range(max_iter):
        mu = e_step_counts(ms, mu)
        new = observed_loglik(ms, mu)
        if abs(new - ll) < tol * max(1.0, abs(new)):
            return new
        ll = new
    raise EMError("saturated fit did not converge")


def observed_deviance(ms: MissingStructure, fitted: np.ndarray, saturated: float | None = None) -> float:
    """Twice the observed-data log-likelihood gap to the saturated fit."""
    if saturated is None:
        saturated = saturated_loglik(ms)
    return max(0.0, 2.0 * (saturated - observed_loglik(ms, fitted)))


@dataclass(frozen=True)
class EMResult:
    fit: FittedLoglinear
    completed: CompletedTable
    structure: MissingStructure
    formula: ModelFormula
    loglik: float
    history: tuple[float, ...]
    iterations: int
    converged: bool

    @property
    def fitted(self) -> np.ndarray:
        return self.fit.fitted

    @cached_property
    def deviance(self) -> float:
        return observed_deviance(self.structure, self.fit.fitted)

    @property
    def complete_deviance(self) -> float:
        est = ~self.structure.structural
        return poisson_deviance(self.completed.counts[est], self.fit.fitted[est])


def prepare(table: IncompleteTable, formula: ModelFormula) -> tuple[DesignMatrix, MissingStructure]:
    schema = table.schema
    base = set(schema.variables)
    if not base <= set(formula.variables):
        formula = formula.with_variables(tuple(schema.variables) + tuple(v for v in formula.variables if v not in base))
    bad = validate_estimability(formula, schema)
    if bad:
        raise ModelError(describe_inestimable(formula, bad))
    space = CellSpace(formula.variables)
    ms = compatibility(table, space)
    design = build_design(formula, space, ms.structural)
    return design, ms


def fit_em(
    table: IncompleteTable,
    formula: ModelFormula,
    opts: EMOptions | None = None,
    init: np.ndarray | None = None,
    start_beta: np.ndarray | None = None,
) -> EMResult:
    """Alternate E- and M-steps until the completed table settles.

    ``init`` replaces the uniform first split by an allocation proportional
    to the given cell weights (used for latent-class restarts).
    """
    opts = opts or EMOptions()
    design, ms = prepare(table, formula)
    return run_em(design, ms, design_formula(formula, design), opts, init=init, start_beta=start_beta)


def design_formula(formula: ModelFormula, design: DesignMatrix) -> ModelFormula:
    if formula.variables == design.space.variables:
        return formula
    return formula.with_variables(design.space.variables)


def run_em(
    design: DesignMatrix,
    ms: MissingStructure,
    formula: ModelFormula,
    opts: EMOptions,
    init: np.ndarray | None = None,
    start_beta: np.ndarray | None = None,
    quiet: bool = False,
) -> EMResult:
    inner = replace(opts.fit, covariance=False)
    z = uniform_start(ms) if init is None else e_step_counts(ms, np.where(ms.structural, 0.0, init))
    beta = start_beta
    history: list[float] = []
    converged = False
    it = 0
    for it in range(1, opts.max_iter + 1):
        fit = fit_poisson(design, z, replace(inner, start=beta))
        beta = fit.beta
        mu = fit.fitted
        ll = observed_loglik(ms, mu)
        if history:
            drop = history[-1] - ll
            if drop > 1e-8 + 1e-12 * abs(ll):
                msg = f"observed log-likelihood decreased by {drop:.3g} at EM iteration {it}"
                if opts.strict_monotone:
                    raise EMError(msg)
                log.warning(msg)
        history.append(ll)
        z_new = e_step_counts(ms, mu)
        change = float(np.max(np.abs(z_new - z) / np.maximum(z_new, 1.0)))
        dll = abs(history[-1] - history[-2]) if len(history) > 1 else np.inf
        z = z_new
        if change < opts.tol_counts and dll < opts.tol_loglik * max(1.0, abs(ll)):
            converged = True
            break
    fit = fit_poisson(design, z, replace(opts.fit, start=beta))
    completed = e_step(ms, fit.fitted)
    ll = observed_loglik(ms, fit.fitted)
    if not converged and not quiet:
        log.warning("EM stopped after %d iterations without converging", it)
    return EMResult(
        fit=fit,
        completed=completed,
        structure=ms,
        formula=formula,
        loglik=ll,
        history=tuple(history),
        iterations=it,
        converged=converged,
    )


def odds_ratio(counts: np.ndarray, space: CellSpace, u: str, v: str, fixed: dict[str, int]) -> float:
    """Odds ratio between binary u and v among cells matching ``fixed``,
    summing over every other variable."""
    mask = np.ones(len(space), dtype=bool)
    for name, val in fixed.items():
        mask &= space.column(name) == val
    cu, cv = space.column(u), space.column(v)
    m = {(i, j): counts[mask & (cu == i) & (cv == j)].sum() for i in (0, 1) for j in (0, 1)}
    return float(m[1, 1] * m[0, 0] / (m[1, 0] * m[0, 1]))


def margin(counts: np.ndarray, space: CellSpace, names: Sequence[str]) -> np.ndarray:
    """Marginal table over ``names`` as a (2,)*len(names) array."""
    code = np.zeros(len(space), dtype=np.int64)
    for v in names:
        code = code * 2 + space.column(v)
    return np.bincount(code, weights=counts, minlength=2 ** len(names)).reshape((2,) * len(names))
