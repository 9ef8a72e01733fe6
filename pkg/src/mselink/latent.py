"""Latent-class models for ethnicity measured with error in every register.

Two routes are provided. :func:`fit_lc_margins` fits a plain latent-class
mixture to a joint margin of the ethnicity variables (a two-stage analysis
after a loglinear fit). :func:`fit_lcmse` integrates the latent class into the
loglinear population model itself: the latent variable becomes one more free
coordinate of the completed cell space, so the same EM that distributes
missing ethnicities also distributes class membership.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field, replace

import numpy as np

from .em import (
    EMOptions,
    EMResult,
    ModelError,
    design_formula,
    margin,
    prepare,
    run_em,
    saturated_loglik,
)
from .formula import ModelFormula, parse
from .ingest import IncompleteTable
from .loglin import deviance_normed
from .popsize import EstimateReport, full_population, report

log = logging.getLogger(__name__)

N_RESTARTS = 20
SCREEN_ITERATIONS = 100

LATENT_EM = EMOptions(tol_counts=1e-6, max_iter=20_000)


class IdentifiabilityError(ModelError):
    """The latent-class specification is not identified."""


def min_indicators(classes: int) -> int:
    """Smallest number of binary indicators for which ``classes`` latent
    classes are (generically) identified."""
    return 2 * math.ceil(math.log2(classes)) + 1


def check_identified(n_indicators: int, classes: int) -> None:
    if classes < 2:
        raise IdentifiabilityError("at least two latent classes are needed")
    need = min_indicators(classes)
    if n_indicators < need:
        raise IdentifiabilityError(
            f"a {classes}-class latent class model is not identified with {n_indicators} "
            f"binary indicators (needs at least {need}), even though the table may have "
            f"more cells than parameters"
        )


@dataclass(frozen=True)
class LatentSpec:
    """Which observed variables load on which latent variable.

    ``loadings`` maps latent names to observed variables; ``X`` is the latent
    ethnicity and an optional ``Y`` explains register overlap. ``extra_terms``
    are retained register terms (as bracket text), and ``interaction`` adds
    the term joining the latent variables.
    """

    loadings: Mapping[str, tuple[str, ...]]
    extra_terms: tuple[str, ...] = ()
    interaction: bool = False
    classes: int = 2

    @property
    def latent(self) -> tuple[str, ...]:
        return tuple(self.loadings)

    @classmethod
    def lcmse(cls, table_or_schema) -> "LatentSpec":
        """The integrated model: retained terms joining all registers but one
        with the missing register's ethnicity, plus ``[eX]`` for every
        ethnicity ``e``."""
        schema = getattr(table_or_schema, "schema", table_or_schema)
        regs = schema.registers
        extra = []
        for reg, eth in schema.pairing.items():
            others = [r for r in regs if r != reg]
            extra.append("[" + " ".join(others + [eth]) + "]")
        return cls({"X": tuple(schema.ethnicities)}, tuple(extra))

    @classmethod
    def from_formula(cls, text: str, schema, latent: Sequence[str] = ("X", "Y"), classes: int = 2) -> "LatentSpec":
        """Split a bracket formula into loadings and retained terms."""
        present = [v for v in latent if v in text]
        f = parse(text, schema, latent=present)
        lat = set(present)
        loadings: dict[str, list[str]] = {v: [] for v in present}
        extra = []
        inter = False
        for t in f.maximal_terms:
            hit = t & lat
            if not hit:
                extra.append("[" + " ".join(sorted(t, key=f.variables.index)) + "]")
            elif len(hit) == len(t):
                inter = inter or len(hit) > 1
                if len(hit) == 1:
                    loadings.setdefault(next(iter(hit)), [])
            elif len(hit) == 1 and len(t) == 2:
                (name,) = hit
                (obs,) = t - hit
                loadings[name].append(obs)
            else:
                raise ModelError(
                    f"term {''.join(sorted(t))} mixes a latent variable with more than one observed variable"
                )
        order = schema.variables
        return cls(
            {k: tuple(sorted(v, key=order.index)) for k, v in loadings.items()},
            tuple(extra),
            inter,
            classes,
        )

    def validate(self, schema) -> None:
        if self.classes != 2:
            check_identified(len(self.loadings.get("X", ())), self.classes)
            raise ModelError("the integrated model supports two latent classes only")
        if "X" not in self.loadings:
            raise ModelError("the specification needs the latent ethnicity X")
        missing = set(schema.ethnicities) - set(self.loadings["X"])
        if missing:
            raise ModelError(f"ethnicity variable(s) {sorted(missing)} do not load on X")
        for name, obs in self.loadings.items():
            check_identified(len(obs), self.classes)
            unknown = set(obs) - set(schema.variables)
            if unknown:
                raise ModelError(f"{name} loads on unknown variable(s) {sorted(unknown)}")
        eths = set(schema.ethnicities)
        for text in self.extra_terms:
            names = parse(text, schema).maximal_terms[0]
            if len(names & eths) > 1:
                raise ModelError(
                    f"term {text} joins two ethnicity variables, which contradicts local independence given X"
                )

    def formula(self, schema) -> ModelFormula:
        self.validate(schema)
        text = "".join(self.extra_terms)
        for name, obs in self.loadings.items():
            text += "".join(f"[{v} {name}]" for v in obs) or f"[{name}]"
        if self.interaction and len(self.loadings) > 1:
            text += "[" + " ".join(self.loadings) + "]"
        return parse(text, schema, latent=self.latent)


@dataclass(frozen=True)
class LatentFit:
    """Class sizes and the probability of a 1 on each indicator per class.

    Class 1 is the class with the smaller probability on the anchor
    indicator (the first one), so for ethnicity it is the non-Maori class.
    """

    class_sizes: np.ndarray
    conditionals: dict[str, np.ndarray]
    deviance: float
    normed_deviance: float
    df: int
    loglik: float
    converged: bool
    iterations: int
    N_hat: float | None = None
    secondary: dict[str, dict] = field(default_factory=dict)
    seed: int | None = None

    def table(self) -> list[list[float]]:
        """Rows per class: size followed by the conditionals."""
        names = list(self.conditionals)
        return [
            [float(self.class_sizes[k])] + [float(self.conditionals[v][k]) for v in names]
            for k in range(len(self.class_sizes))
        ]


# --- two-stage latent class on a complete margin ---------------------------


def _as_margin(margins: np.ndarray) -> np.ndarray:
    arr = np.asarray(margins, dtype=float)
    m = int(round(math.log2(arr.size)))
    if 2**m != arr.size:
        raise ValueError("margin must have 2^m cells")
    if np.any(arr < 0):
        raise ValueError("counts must be non-negative")
    return arr.reshape(-1), m


def _patterns(m: int) -> np.ndarray:
    return np.indices((2,) * m).reshape(m, -1).T.astype(float)


def lc_joint(sizes: np.ndarray, cond: np.ndarray, patterns: np.ndarray) -> np.ndarray:
    """Joint probabilities cell x class; ``cond`` is classes x indicators."""
    log_p = patterns @ np.log(cond.T) + (1 - patterns) @ np.log1p(-cond.T)
    return np.exp(log_p) * sizes


def lc_em_step(counts: np.ndarray, sizes: np.ndarray, cond: np.ndarray, patterns: np.ndarray):
    """One EM update of the latent class mixture; returns sizes, cond, loglik
    of the *input* parameters."""
    joint = lc_joint(sizes, cond, patterns)
    total = joint.sum(axis=1)
    pos = counts > 0
    ll = float(np.sum(counts[pos] * np.log(total[pos] / total.sum())))
    post = np.divide(joint, total[:, None], out=np.zeros_like(joint), where=total[:, None] > 0)
    w = counts[:, None] * post
    mass = w.sum(axis=0)
    new_sizes = mass / mass.sum()
    new_cond = (w.T @ patterns) / np.maximum(mass, 1e-300)[:, None]
    eps = 1e-12
    return new_sizes, np.clip(new_cond, eps, 1 - eps), ll


def _lc_loglik(counts, sizes, cond, patterns) -> float:
    total = lc_joint(sizes, cond, patterns).sum(axis=1)
    pos = counts > 0
    return float(np.sum(counts[pos] * np.log(total[pos] / total.sum())))


def _canonical_order(cond: np.ndarray, anchor: int = 0) -> np.ndarray:
    return np.argsort(cond[:, anchor], kind="stable")


def fit_lc_margins(
    margins: np.ndarray,
    classes: int = 2,
    names: Sequence[str] | None = None,
    restarts: int = N_RESTARTS,
    tol: float = 1e-12,
    max_iter: int = 20_000,
) -> LatentFit:
    """Latent class mixture for a complete table of binary indicators.

    Parameters
    ----------
    margins : array of 2**m counts
        Joint table of the indicators, first indicator varying slowest (any
        shape with 2**m entries, e.g. ``(2, 2, 2, 2)``).
    classes : int
        Number of latent classes.
    names : sequence of str, optional
        Indicator names used as keys of ``conditionals``.
    restarts : int
        Random starts with seeds ``1..restarts``; conditionals start
        uniform on (0.05, 0.95), class sizes start equal.

    Returns
    -------
    LatentFit
        The best restart by log-likelihood, classes ordered by the first
        indicator. ``df`` is cells minus free parameters.
    """
    counts, m = _as_margin(margins)
    check_identified(m, classes)
    names = list(names) if names is not None else [f"v{j}" for j in range(m)]
    if len(names) != m:
        raise ValueError("one name per indicator is required")
    pats = _patterns(m)
    best = None
    for seed in range(1, restarts + 1):
        rng = np.random.default_rng(seed)
        cond = rng.uniform(0.05, 0.95, size=(classes, m))
        sizes = np.full(classes, 1.0 / classes)
        ll_prev = -np.inf
        converged = False
        for it in range(1, max_iter + 1):
            sizes, cond, ll = lc_em_step(counts, sizes, cond, pats)
            if abs(ll - ll_prev) < tol * max(1.0, abs(ll)):
                converged = True
                break
            ll_prev = ll
        ll = _lc_loglik(counts, sizes, cond, pats)
        if best is None or ll > best[0] + 1e-9 * max(1.0, abs(ll)):
            best = (ll, sizes, cond, converged, it, seed)
    ll, sizes, cond, converged, it, seed = best
    order = _canonical_order(cond)
    sizes, cond = sizes[order], cond[order]
    n = counts.sum()
    fitted = lc_joint(sizes, cond, pats).sum(axis=1) * n
    pos = counts > 0
    dev = float(2 * np.sum(counts[pos] * np.log(counts[pos] / fitted[pos])))
    free = (classes - 1) + classes * m
    return LatentFit(
        class_sizes=sizes,
        conditionals={v: cond[:, j].copy() for j, v in enumerate(names)},
        deviance=dev,
        normed_deviance=deviance_normed(dev, n),
        df=2**m - free,
        loglik=ll,
        converged=converged,
        iterations=it,
        seed=seed,
    )


def maori_at_least_k(margins: np.ndarray, k: int) -> float:
    """Persons recorded as Maori in at least ``k`` of the ethnicity variables."""
    arr = np.asarray(margins, dtype=float)
    m = int(round(math.log2(arr.size)))
    if not 0 <= k <= m:
        raise ValueError(f"k must lie in [0, {m}]")
    ones = _patterns(m).sum(axis=1)
    return float(arr.reshape(-1)[ones >= k].sum())


# --- integrated latent class multiple system estimation --------------------


@dataclass(frozen=True)
class LCMSEResult:
    fit: LatentFit
    report: EstimateReport
    em: EMResult
    spec: LatentSpec


def _random_weights(space, spec: LatentSpec, rng: np.random.Generator) -> np.ndarray:
    """Initial cell weights from random class sizes and conditionals."""
    w = np.ones(len(space))
    for name, obs in spec.loadings.items():
        lat = space.column(name)
        px = rng.uniform(0.05, 0.95, 2)
        w *= np.where(lat == 1, px[1], px[0])
        for v in obs:
            p = rng.uniform(0.05, 0.95, 2)
            pv = np.where(lat == 1, p[1], p[0])
            w *= np.where(space.column(v) == 1, pv, 1 - pv)
    return w


def latent_summary(full: np.ndarray, space, name: str, obs: Sequence[str]) -> tuple[np.ndarray, dict]:
    """Class sizes and conditionals of ``obs`` for latent ``name``, computed
    over the full estimated population ``full``; classes ordered so the first
    has the smaller probability on ``obs[0]``."""
    sizes = margin(full, space, [name])
    cond = np.array([[margin(full, space, [name, v])[k, 1] / sizes[k] for v in obs] for k in (0, 1)])
    order = _canonical_order(cond)
    sizes = sizes[order] / sizes.sum()
    return sizes, {v: cond[order, j] for j, v in enumerate(obs)}


def fit_lcmse(
    table: IncompleteTable,
    spec: LatentSpec | None = None,
    opts: EMOptions = LATENT_EM,
    restarts: int = N_RESTARTS,
    screen: int = SCREEN_ITERATIONS,
) -> LCMSEResult:
    """Integrated latent class population-size model.

    Each of ``restarts`` random starts (seeds ``1..restarts``) runs
    ``screen`` EM iterations; the start with the best observed-data
    log-likelihood is then iterated to convergence. The deviance is the
    observed-data deviance against the saturated fit of the observed
    patterns.
    """
    spec = spec or LatentSpec.lcmse(table)
    formula = spec.formula(table.schema)
    design, ms = prepare(table, formula)
    formula = design_formula(formula, design)
    space = design.space
    screen_opts = replace(opts, max_iter=max(1, screen), strict_monotone=False)
    best = None
    for seed in range(1, restarts + 1):
        w = _random_weights(space, spec, np.random.default_rng(seed))
        try:
            r = run_em(design, ms, formula, screen_opts, init=w, quiet=True)
        except Exception as exc:  # a bad start must not sink the other restarts
            log.info("restart %d failed: %s", seed, exc)
            continue
        if best is None or r.loglik > best[1].loglik + 1e-9 * max(1.0, abs(r.loglik)):
            best = (seed, r)
    if best is None:
        raise ModelError("every latent-class restart failed")
    seed, r = best
    if not r.converged:
        r = run_em(design, ms, formula, opts, init=r.fit.fitted, start_beta=r.fit.beta)
    if not r.converged:
        raise ModelError(f"latent-class EM did not converge in {opts.max_iter} iterations")
    full = full_population(r)
    sizes, cond = latent_summary(full, space, "X", spec.loadings["X"])
    secondary = {}
    for name, obs in spec.loadings.items():
        if name != "X" and obs:
            s, c = latent_summary(full, space, name, obs)
            secondary[name] = {"class_sizes": s, "conditionals": c}
    dev = max(0.0, 2.0 * (saturated_loglik(ms) - r.loglik))
    rep = report(r, table.schema)
    fit = LatentFit(
        class_sizes=sizes,
        conditionals=cond,
        deviance=dev,
        normed_deviance=deviance_normed(dev, table.n),
        df=ms.n_patterns - len(r.fit.beta),
        loglik=r.loglik,
        converged=r.converged,
        iterations=r.iterations,
        N_hat=rep.N_hat,
        secondary=secondary,
        seed=seed,
    )
    return LCMSEResult(fit, rep, r, spec)
