"""Population size and ethnicity margins from a fitted EM model."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .em import EMResult, margin
from .ingest import VariableSchema

REPORT_VERSION = 1


class PredictionError(ValueError):
    pass


@dataclass(frozen=True)
class EstimateReport:
    n_observed: float
    n_unobserved: float
    N_hat: float
    registers: dict[str, dict[str, float]]  # register -> {"maori", "non_maori"}
    joint: dict[str, float] = field(default_factory=dict)  # "0101" over ethnicities
    ethnicities: tuple[str, ...] = ()
    intervals: dict[str, tuple[float, float]] = field(default_factory=dict)

    def register_margin(self, register: str) -> tuple[float, float]:
        m = self.registers[register]
        return m["maori"], m["non_maori"]

    def joint_array(self) -> np.ndarray:
        k = len(self.ethnicities)
        arr = np.zeros((2,) * k)
        for key, v in self.joint.items():
            arr[tuple(int(ch) for ch in key)] = v
        return arr


def predict_unobserved(result: EMResult) -> np.ndarray:
    """Model means on the cells where every register is out (zero elsewhere).

    The fit never contains a term joining all registers, so these cells
    follow from the estimated parameters by extrapolation.
    """
    regs = set(result.structure.registers)
    if any(regs <= t for t in result.fit.design.terms):
        raise PredictionError("formula contains a term with every register; cannot predict the unlisted")
    st = result.structure.structural
    out = np.zeros(len(st))
    out[st] = result.fit.predicted()[st]
    return out


def full_population(result: EMResult) -> np.ndarray:
    """Completed observed mass plus predictions for the unlisted cells."""
    full = result.completed.counts.copy()
    st = result.structure.structural
    full[st] = predict_unobserved(result)[st]
    return full


def report(result: EMResult, schema: VariableSchema) -> EstimateReport:
    full = full_population(result)
    space = result.structure.space
    st = result.structure.structural
    n_obs = float(result.structure.counts.sum())
    n_un = float(full[st].sum())
    regs = {}
    for reg, eth in schema.pairing.items():
        m = margin(full, space, [eth])
        regs[reg] = {"maori": float(m[1]), "non_maori": float(m[0])}
    joint = {}
    eths = schema.ethnicities
    arr = margin(full, space, list(eths))
    for idx in np.ndindex(arr.shape):
        joint["".join(map(str, idx))] = float(arr[idx])
    return EstimateReport(
        n_observed=n_obs,
        n_unobserved=n_un,
        N_hat=n_obs + n_un,
        registers=regs,
        joint=joint,
        ethnicities=tuple(eths),
    )
