"""Multiple-system estimation of population size from linked registers.

Loglinear models with structural zeros are fitted by EM to count tables with
item-missing and structurally missing ethnicity codes; latent-class
extensions handle ethnicity recorded with error, a hybrid bootstrap gives
percentile intervals, and interaction graphs decide when partial register
coverage can be ignored.
"""

__version__ = "0.1.0"

from .em import EMOptions, EMResult, ModelError, fit_em
from .formula import ModelFormula, parse
from .ingest import IncompleteTable, VariableSchema, read_table, subset_registers
from .popsize import EstimateReport, report

__all__ = [
    "EMOptions",
    "EMResult",
    "EstimateReport",
    "IncompleteTable",
    "ModelError",
    "ModelFormula",
    "VariableSchema",
    "fit_em",
    "parse",
    "read_table",
    "report",
    "subset_registers",
    "__version__",
]
