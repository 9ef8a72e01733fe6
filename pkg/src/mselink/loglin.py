"""Poisson loglinear fitting with structural zeros.

Newton-Raphson (equivalently IRLS for the canonical log link) is the main
path; iterative proportional fitting over the maximal-term margins is the
fallback when Newton stalls, which happens near the boundary of the
parameter space.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .formula import DesignMatrix

log = logging.getLogger(__name__)


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, last=None):
        self.last = last
        super().__init__(message)


@dataclass(frozen=True)
class FitOptions:
    method: str = "auto"  # "newton", "ipf" or "auto" (newton, ipf on failure)
    tol_mu: float = 1e-10
    tol_dev: float = 1e-8
    max_iter: int = 10_000
    cap: float = 25.0
    covariance: bool = True
    start: np.ndarray | None = field(default=None, compare=False)


@dataclass(frozen=True)
class Parameter:
    label: str
    term: frozenset
    estimate: float
    se: float
    z: float
    p: float
    boundary: bool


@dataclass(frozen=True)
class FittedLoglinear:
    design: DesignMatrix
    beta: np.ndarray
    fitted: np.ndarray  # every cell of the space; 0 on structural cells
    deviance: float
    converged: bool
    iterations: int
    covariance: np.ndarray
    boundary: np.ndarray
    method: str

    @property
    def labels(self) -> tuple[str, ...]:
        return self.design.labels

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.covariance))

    @property
    def parameters(self) -> list[Parameter]:
        se = self.se
        out = []
        for j, (lab, term) in enumerate(zip(self.design.labels, self.design.terms)):
            z = self.beta[j] / se[j] if np.isfinite(se[j]) and se[j] > 0 else np.nan
            p = 2 * stats.norm.sf(abs(z)) if np.isfinite(z) else np.nan
            out.append(Parameter(lab, term, float(self.beta[j]), float(se[j]), float(z), float(p), bool(self.boundary[j])))
        return out

    def coef(self, term) -> float:
        """Estimate for a term given as label (``"A:c"``) or set of names."""
        key = frozenset(term) if not isinstance(term, str) else None
        for lab, t, b in zip(self.design.labels, self.design.terms, self.beta):
            if lab == term or t == key:
                return float(b)
        if isinstance(term, str):
            key = frozenset(term.split(":"))
            for t, b in zip(self.design.terms, self.beta):
                if t == key:
                    return float(b)
        raise KeyError(term)

    def linear_predictor(self) -> np.ndarray:
        return self.design.matrix @ self.beta

    def predicted(self) -> np.ndarray:
        """Model means on every cell, structural cells included."""
        return np.exp(self.linear_predictor())


def poisson_loglik(design: DesignMatrix, counts: np.ndarray, beta: np.ndarray) -> float:
    est = design.estimable
    eta = design.matrix[est] @ beta
    y = np.asarray(counts, dtype=float)[est]
    return float(np.sum(y * eta - np.exp(eta)))


def score(design: DesignMatrix, counts: np.ndarray, beta: np.ndarray) -> np.ndarray:
    est = design.estimable
    X = design.matrix[est]
    y = np.asarray(counts, dtype=float)[est]
    return X.T @ (y - np.exp(X @ beta))


def poisson_deviance(y: np.ndarray, mu: np.ndarray) -> float:
    """2 * sum(y log(y/mu) - (y - mu)) with 0 log 0 = 0."""
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    pos = y > 0
    terms = -(y - mu)
    terms[pos] += y[pos] * np.log(y[pos] / mu[pos])
    return max(0.0, float(2 * terms.sum()))  # rounding can dip below zero at a perfect fit


def deviance_normed(deviance: float, n: float) -> float:
    """Deviance rescaled to an observed population of 1,000."""
    if n <= 0:
        raise ValueError("observed population size must be positive")
    return deviance / (n / 1000.0)


def fit_poisson(design: DesignMatrix, counts: np.ndarray, opts: FitOptions | None = None) -> FittedLoglinear:
    opts = opts or FitOptions()
    counts = np.asarray(counts, dtype=float)
    if counts.shape != (len(design.matrix),):
        raise ValueError("counts must cover every cell of the design")
    if np.any(counts < 0):
        raise ValueError("counts must be non-negative")
    if np.any(counts[design.structural] != 0):
        raise ValueError("structural-zero cells must carry count 0")
    if opts.method not in ("auto", "newton", "ipf"):
        raise ValueError(f"unknown method {opts.method!r}")
    if opts.method in ("auto", "newton"):
        try:
            return _newton(design, counts, opts)
        except ConvergenceError as exc:
            if opts.method == "newton":
                raise
            log.info("newton failed (%s); falling back to IPF", exc)
    return _ipf(design, counts, opts)


def _start(design: DesignMatrix, counts: np.ndarray) -> np.ndarray:
    est = design.estimable
    X = design.matrix[est]
    target = np.log(counts[est] + 0.5)
    beta, *_ = np.linalg.lstsq(X, target, rcond=None)
    return beta


def _newton(design: DesignMatrix, y_all: np.ndarray, opts: FitOptions) -> FittedLoglinear:
    est = design.estimable
    X = design.matrix[est]
    y = y_all[est]
    beta = _start(design, y_all) if opts.start is None else np.array(opts.start, dtype=float)
    beta = np.clip(beta, -opts.cap, opts.cap)
    eta = X @ beta
    mu = np.exp(eta)
    ll = float(np.sum(y * eta - mu))
    dev = poisson_deviance(y, mu)
    for it in range(1, opts.max_iter + 1):
        grad = X.T @ (y - mu)
        # parameters pinned at the cap while the score pushes outward stay put
        pinned = (np.abs(beta) >= opts.cap) & (np.sign(grad) == np.sign(beta))
        free = ~pinned
        Xf = X[:, free]
        info = Xf.T @ (mu[:, None] * Xf)
        step = np.zeros_like(beta)
        try:
            step[free] = np.linalg.solve(info, grad[free])
        except np.linalg.LinAlgError:
            step[free] = np.linalg.lstsq(info, grad[free], rcond=None)[0]
        if not np.all(np.isfinite(step)):
            raise ConvergenceError("non-finite Newton step", beta)
        t = 1.0
        while True:
            cand = np.clip(beta + t * step, -opts.cap, opts.cap)
            eta_c = X @ cand
            if np.all(eta_c < 700):
                mu_c = np.exp(eta_c)
                ll_c = float(np.sum(y * eta_c - mu_c))
                if ll_c >= ll - 1e-12 * abs(ll):
                    break
            t *= 0.5
            if t < 1e-12:
                raise ConvergenceError("line search failed", beta)
        dev_c = poisson_deviance(y, mu_c)
        change = np.max(np.abs(mu_c - mu) / np.maximum(mu_c, 1.0))
        dchange = abs(dev_c - dev)
        beta, mu, ll, dev = cand, mu_c, ll_c, dev_c
        if change < opts.tol_mu and dchange < opts.tol_dev * max(1.0, abs(dev)):
            return _finish(design, beta, mu, dev, it, "newton", opts)
    raise ConvergenceError(f"newton did not converge in {opts.max_iter} iterations", beta)


def _ipf(design: DesignMatrix, y_all: np.ndarray, opts: FitOptions) -> FittedLoglinear:
    est = design.estimable
    space = design.space
    maximal = [t for t in design.terms if t and not any(t < u for u in design.terms)]
    groups = []
    for t in maximal:
        names = sorted(t, key=space.variables.index)
        code = np.zeros(len(space), dtype=np.int64)
        for v in names:
            code = code * 2 + space.column(v)
        code = code[est]
        obs = np.bincount(code, weights=y_all[est], minlength=2 ** len(names))
        groups.append((code, obs))
    mu = np.ones(int(est.sum()))
    for it in range(1, opts.max_iter + 1):
        old = mu.copy()
        for code, obs in groups:
            fit = np.bincount(code, weights=mu, minlength=len(obs))
            ratio = np.divide(obs, fit, out=np.zeros_like(obs), where=fit > 0)
            mu = mu * ratio[code]
        change = np.max(np.abs(mu - old) / np.maximum(mu, 1.0))
        if change < opts.tol_mu:
            break
    else:
        raise ConvergenceError(f"IPF did not converge in {opts.max_iter} iterations", mu)
    X = design.matrix[est]
    floor = np.exp(-2 * opts.cap)
    beta, *_ = np.linalg.lstsq(X, np.log(np.maximum(mu, floor)), rcond=None)
    beta = np.clip(beta, -opts.cap, opts.cap)
    return _finish(design, beta, mu, poisson_deviance(y_all[est], mu), it, "ipf", opts)


def _finish(design, beta, mu_est, dev, it, method, opts) -> FittedLoglinear:
    est = design.estimable
    fitted = np.zeros(len(design.matrix))
    fitted[est] = mu_est
    boundary = np.abs(beta) >= opts.cap * (1 - 1e-9)
    X = design.matrix[est]
    p = len(beta)
    cov = np.full((p, p), np.nan)
    free = ~boundary
    if opts.covariance and free.any():
        Xf = X[:, free]
        info = Xf.T @ (mu_est[:, None] * Xf)
        try:
            inv = np.linalg.inv(info)
        except np.linalg.LinAlgError:
            inv = np.linalg.pinv(info)
        cov[np.ix_(free, free)] = inv
    return FittedLoglinear(
        design=design,
        beta=np.asarray(beta, dtype=float),
        fitted=fitted,
        deviance=float(dev),
        converged=True,
        iterations=int(it),
        covariance=cov,
        boundary=boundary,
        method=method,
    )
