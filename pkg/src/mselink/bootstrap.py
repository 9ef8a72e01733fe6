"""Hybrid bootstrap intervals for population-size estimates.

The observed pattern counts are augmented with one synthetic pattern holding
the fitted number of unlisted persons. Each replicate draws a multinomial
sample of size round(N_hat) from these proportions, discards the persons
that landed in the unlisted pattern (they could not have been observed),
refits the model and records the statistics. Intervals are percentile
intervals over the converged replicates.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable, Mapping
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .em import EMOptions, EMResult, fit_em
from .formula import ModelFormula, parse
from .ingest import IncompleteTable
from .latent import LATENT_EM, LatentSpec, fit_lcmse, latent_summary
from .popsize import EstimateReport, full_population, report

log = logging.getLogger(__name__)

RANK_RULE = "lower = sorted[ceil(alpha/2 * R)], upper = sorted[ceil((1 - alpha/2) * R)], 1-based, R = converged replicates"
DEGRADED_FAILURE_RATE = 0.05


class BootstrapError(RuntimeError):
    pass


@dataclass(frozen=True)
class BootstrapConfig:
    replicates: int = 2000
    seed: int = 0
    level: float = 0.95
    statistics: tuple[str, ...] | None = None  # None: every statistic

    def __post_init__(self):
        if self.replicates < 1:
            raise ValueError("replicates must be at least 1")
        if not 0 < self.level < 1:
            raise ValueError("level must lie strictly between 0 and 1")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")


@dataclass(frozen=True)
class Interval:
    point: float
    lower: float
    upper: float

    @property
    def contains_point(self) -> bool:
        return self.lower <= self.point <= self.upper


@dataclass(frozen=True)
class BootstrapResult:
    intervals: dict[str, Interval]
    replicates: int
    converged: int
    failed: int
    seed: int
    level: float
    values: dict[str, np.ndarray] = field(repr=False, default_factory=dict)
    rank_rule: str = RANK_RULE

    @property
    def degraded(self) -> bool:
        return self.failed > DEGRADED_FAILURE_RATE * self.replicates

    @property
    def violations(self) -> list[str]:
        """Statistics whose point estimate falls outside their interval."""
        return [k for k, iv in self.intervals.items() if not iv.contains_point]


def report_statistics(rep: EstimateReport) -> dict[str, float]:
    out = {"N_hat": rep.N_hat, "n_unobserved": rep.n_unobserved}
    for reg, m in rep.registers.items():
        out[f"{reg}_maori"] = m["maori"]
        out[f"{reg}_non_maori"] = m["non_maori"]
    return out


def percentile_interval(values: np.ndarray, level: float) -> tuple[float, float]:
    """Order statistics at ranks ceil(alpha/2 R) and ceil((1 - alpha/2) R)."""
    s = np.sort(np.asarray(values, dtype=float))
    r = len(s)
    if r == 0:
        raise BootstrapError("no converged replicates")
    alpha = 1 - level
    lo = max(1, math.ceil(alpha / 2 * r - 1e-9))
    hi = min(r, max(1, math.ceil((1 - alpha / 2) * r - 1e-9)))
    return float(s[lo - 1]), float(s[hi - 1])


def replicate_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for replicate ``index``, whatever the execution order."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(index,))))


def resample(table: IncompleteTable, n_unobserved: float, rng: np.random.Generator) -> IncompleteTable:
    """One hybrid-bootstrap table with the same patterns as ``table``."""
    weights = np.append(np.asarray(table.counts, dtype=float), float(n_unobserved))
    size = int(np.rint(weights.sum()))  # round half to even
    draw = rng.multinomial(size, weights / weights.sum())
    return IncompleteTable(table.schema, table.patterns, draw[:-1].astype(float))


# --- model adaptors --------------------------------------------------------


class _LoglinearModel:
    def __init__(self, table: IncompleteTable, formula: ModelFormula, opts: EMOptions):
        self.formula, self.opts = formula, opts
        self.base = fit_em(table, formula, opts)
        if not self.base.converged:
            raise BootstrapError("the model does not converge on the observed table")
        self.report = report(self.base, table.schema)

    def statistics(self, result: EMResult, table: IncompleteTable) -> dict[str, float]:
        return report_statistics(report(result, table.schema))

    def point(self) -> dict[str, float]:
        return report_statistics(self.report)

    def refit(self, table: IncompleteTable) -> dict[str, float] | None:
        r = fit_em(table, self.formula, self.opts, init=self.base.fit.fitted, start_beta=self.base.fit.beta)
        return self.statistics(r, table) if r.converged else None


class _LatentModel:
    def __init__(self, table: IncompleteTable, spec: LatentSpec, opts: EMOptions):
        self.spec, self.opts = spec, opts
        base = fit_lcmse(table, spec, opts)
        self.base = base.em
        self._point = self._stats(self.base, table)

    def _stats(self, r: EMResult, table: IncompleteTable) -> dict[str, float]:
        out = report_statistics(report(r, table.schema))
        full = full_population(r)
        sizes, _ = latent_summary(full, r.structure.space, "X", self.spec.loadings["X"])
        out["class_1_size"] = float(sizes[0])
        out["class_2_size"] = float(sizes[1])
        out["class_2_persons"] = float(sizes[1] * full.sum())
        return out

    def point(self) -> dict[str, float]:
        return self._point

    def refit(self, table: IncompleteTable) -> dict[str, float] | None:
        # warm start from the base fit keeps the class labels in place
        r = fit_em(table, self.spec.formula(table.schema), self.opts, init=self.base.fit.fitted, start_beta=self.base.fit.beta)
        return self._stats(r, table) if r.converged else None


def _build(table, model, opts):
    if isinstance(model, LatentSpec):
        return _LatentModel(table, model, opts or LATENT_EM)
    if isinstance(model, str):
        model = parse(model, table.schema)
    return _LoglinearModel(table, model, opts or EMOptions())


def _one(args) -> tuple[int, dict[str, float] | None]:
    adaptor, table, n_unobserved, seed, index = args
    rep = resample(table, n_unobserved, replicate_rng(seed, index))
    try:
        return index, adaptor.refit(rep)
    except Exception as exc:  # counted as a failed replicate
        log.info("replicate %d failed: %s", index, exc)
        return index, None


def run(
    table: IncompleteTable,
    model: ModelFormula | str | LatentSpec,
    cfg: BootstrapConfig = BootstrapConfig(),
    opts: EMOptions | None = None,
    workers: int = 1,
    progress: Callable[[int], None] | None = None,
) -> BootstrapResult:
    """Hybrid bootstrap of the estimates of ``model`` on ``table``.

    Parameters
    ----------
    table : IncompleteTable
        Observed patterns.
    model : formula, formula text or LatentSpec
        What to refit on every replicate.
    cfg : BootstrapConfig
        Replicates, master seed, interval level and statistic subset.
    workers : int
        Processes used for replicates; the result does not depend on it.

    Returns
    -------
    BootstrapResult
    """
    adaptor = _build(table, model, opts)
    point = adaptor.point()
    names = list(point) if cfg.statistics is None else list(cfg.statistics)
    unknown = set(names) - set(point)
    if unknown:
        raise ValueError(f"unknown statistics {sorted(unknown)}")
    n_un = point["n_unobserved"]
    jobs = [(adaptor, table, n_un, cfg.seed, i) for i in range(cfg.replicates)]
    results: dict[int, dict[str, float] | None] = {}
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for i, stats in pool.map(_one, jobs, chunksize=max(1, len(jobs) // (4 * workers))):
                results[i] = stats
                if progress:
                    progress(len(results))
    else:
        for job in jobs:
            i, stats = _one(job)
            results[i] = stats
            if progress:
                progress(len(results))
    ok = [results[i] for i in range(cfg.replicates) if results[i] is not None]
    failed = cfg.replicates - len(ok)
    if not ok:
        raise BootstrapError("every replicate failed")
    values = {k: np.array([s[k] for s in ok]) for k in names}
    intervals = {}
    for k in names:
        lo, hi = percentile_interval(values[k], cfg.level)
        intervals[k] = Interval(float(point[k]), lo, hi)
    res = BootstrapResult(intervals, cfg.replicates, len(ok), failed, cfg.seed, cfg.level, values)
    if res.degraded:
        log.warning("%d of %d replicates failed; intervals are degraded", failed, cfg.replicates)
    for k in res.violations:
        log.warning("point estimate of %s lies outside its bootstrap interval", k)
    return res


def summary(res: BootstrapResult) -> Mapping[str, object]:
    return {
        "replicates": res.replicates,
        "converged": res.converged,
        "failed": res.failed,
        "degraded": res.degraded,
        "seed": res.seed,
        "level": res.level,
        "rank_rule": res.rank_rule,
        "intervals": {k: {"estimate": iv.point, "lower": iv.lower, "upper": iv.upper} for k, iv in res.intervals.items()},
    }
