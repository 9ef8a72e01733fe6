"""Synthetic linked-register populations with a known truth.

Each person gets a true ethnicity, an optional binary covariate, and for every
register an inclusion draw, a recorded ethnicity (possibly misclassified) and
possibly an item-missing ethnicity. Persons found in no register are dropped
from the observed table, as they would be in a real linkage.
"""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from .ingest import ITEM_MISSING, STRUCT_MISSING, IncompleteTable, VariableSchema

CHUNK = 1_000_000


@dataclass(frozen=True)
class SimSpec:
    """Generating model for :func:`generate`.

    Parameters
    ----------
    N_true : int
        Population size.
    prevalence : float
        Probability that a person is truly Maori.
    inclusion : mapping of register name to probability
        A scalar, a length-2 sequence indexed by the covariate level, or a
        2x2 array indexed by (covariate level, true ethnicity).
    error : mapping of register name to a 2x2 row-stochastic matrix
        ``error[r][e, k]`` is the probability of recording ``k`` for true
        ethnicity ``e``; registers not listed record without error.
    item_missing : mapping of register name to probability
        Probability that a listed person's ethnicity is unrecorded.
    covariate : float or None
        Probability of covariate level 1; ``None`` means no covariate.
    covariate_name : str
        Name of the covariate column when ``emit_covariate`` is set.
    emit_covariate : bool
        Whether the observed table includes the covariate.
    seed : int
    """

    N_true: int
    prevalence: float
    inclusion: Mapping[str, object]
    error: Mapping[str, object] = field(default_factory=dict)
    item_missing: Mapping[str, float] = field(default_factory=dict)
    covariate: float | None = None
    covariate_name: str = "Z"
    emit_covariate: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.N_true < 0:
            raise ValueError("N_true must be non-negative")
        _prob(self.prevalence, "prevalence")
        if len(self.inclusion) < 2:
            raise ValueError("at least two registers are required")
        for r, p in self.inclusion.items():
            arr = np.asarray(p, dtype=float)
            if arr.shape not in ((), (2,), (2, 2)):
                raise ValueError(f"inclusion of {r} must be scalar, (2,) or (2, 2)")
            _prob(arr, f"inclusion of {r}")
        for r, m in self.error.items():
            m = np.asarray(m, dtype=float)
            if m.shape != (2, 2):
                raise ValueError(f"error matrix of {r} must be 2x2")
            _prob(m, f"error of {r}")
            if not np.allclose(m.sum(axis=1), 1.0):
                raise ValueError(f"rows of the error matrix of {r} must sum to 1")
        for r, q in self.item_missing.items():
            _prob(q, f"item missingness of {r}")
        unknown = (set(self.error) | set(self.item_missing)) - set(self.inclusion)
        if unknown:
            raise ValueError(f"unknown registers {sorted(unknown)}")
        if self.covariate is not None:
            _prob(self.covariate, "covariate")
        if self.emit_covariate and self.covariate is None:
            raise ValueError("emit_covariate needs a covariate probability")

    @property
    def registers(self) -> tuple[str, ...]:
        return tuple(self.inclusion)

    def schema(self) -> VariableSchema:
        covs = (self.covariate_name,) if self.emit_covariate else ()
        return VariableSchema(self.registers, tuple(r.lower() for r in self.registers), covs)


def _prob(value, what: str) -> None:
    arr = np.asarray(value, dtype=float)
    if np.any(~np.isfinite(arr)) or np.any(arr < 0) or np.any(arr > 1):
        raise ValueError(f"{what} must lie in [0, 1]")


@dataclass(frozen=True)
class SimTruth:
    N_true: int
    n_observed: int
    n_unlisted: int
    maori: int
    class_sizes: tuple[float, float]
    covariate_ones: int = 0


def _inclusion_prob(p, z: np.ndarray, e: np.ndarray) -> np.ndarray:
    arr = np.asarray(p, dtype=float)
    if arr.ndim == 0:
        return np.full(len(z), float(arr))
    if arr.ndim == 1:
        return arr[z]
    return arr[z, e]


def generate(spec: SimSpec) -> tuple[IncompleteTable, SimTruth]:
    """Draw one population and return its observed table and the truth."""
    rng = np.random.default_rng(spec.seed)
    schema = spec.schema()
    regs = spec.registers
    counts: dict[bytes, list] = {}
    maori = listed = zones = 0
    remaining = spec.N_true
    while remaining > 0:
        n = min(CHUNK, remaining)
        remaining -= n
        e = (rng.random(n) < spec.prevalence).astype(np.int64)
        z = (rng.random(n) < spec.covariate).astype(np.int64) if spec.covariate is not None else np.zeros(n, np.int64)
        maori += int(e.sum())
        zones += int(z.sum())
        inc = np.empty((n, len(regs)), dtype=np.int8)
        eth = np.empty((n, len(regs)), dtype=np.int8)
        for j, r in enumerate(regs):
            inc[:, j] = rng.random(n) < _inclusion_prob(spec.inclusion[r], z, e)
            m = np.asarray(spec.error.get(r, np.eye(2)), dtype=float)
            rec = np.where(rng.random(n) < m[e, 1], 1, 0)
            q = spec.item_missing.get(r, 0.0)
            if q > 0:
                rec = np.where(rng.random(n) < q, ITEM_MISSING, rec)
            eth[:, j] = np.where(inc[:, j] == 1, rec, STRUCT_MISSING)
        cols = [inc, eth]
        if spec.emit_covariate:
            cols.append(z[:, None].astype(np.int8))
        pats = np.hstack(cols)
        keep = inc.any(axis=1)
        pats = pats[keep]
        listed += int(keep.sum())
        uniq, cnt = np.unique(pats, axis=0, return_counts=True)
        for p, c in zip(uniq, cnt):
            key = p.tobytes()
            if key in counts:
                counts[key][1] += int(c)
            else:
                counts[key] = [p, int(c)]
    if counts:
        items = sorted(counts.values(), key=lambda v: tuple(v[0]))
        patterns = np.array([v[0] for v in items], dtype=np.int8)
        cnts = np.array([v[1] for v in items], dtype=float)
    else:
        patterns = np.zeros((0, len(schema.variables)), dtype=np.int8)
        cnts = np.zeros(0)
    table = IncompleteTable(schema, patterns, cnts)
    frac = maori / spec.N_true if spec.N_true else 0.0
    truth = SimTruth(
        N_true=spec.N_true,
        n_observed=listed,
        n_unlisted=spec.N_true - listed,
        maori=maori,
        class_sizes=(1 - frac, frac),
        covariate_ones=zones,
    )
    return table, truth


def complete_margin(table: IncompleteTable, names: Sequence[str]) -> np.ndarray:
    """Joint margin over ``names`` of patterns fully recorded on them."""
    idx = [table.schema.index(v) for v in names]
    sub = table.patterns[:, idx]
    ok = np.all(sub >= 0, axis=1)
    code = np.zeros(int(ok.sum()), dtype=np.int64)
    for j in range(len(idx)):
        code = code * 2 + sub[ok, j]
    return np.bincount(code, weights=table.counts[ok], minlength=2 ** len(idx)).reshape((2,) * len(idx))
