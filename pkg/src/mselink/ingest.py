"""Reading linked-register count tables.

A table lists observed cell patterns: for every register an inclusion
indicator (0/1), for every register its own ethnicity code, plus the number
of persons with that pattern. Ethnicity codes are 0 (non-Maori), 1 (Maori),
or a missing marker. Whether a missing marker means *item missing* (person is
in the register, ethnicity unrecorded) or *structurally missing* (person is
not in the register) is decided by the paired register indicator, never by
the symbol itself.
"""

from __future__ import annotations

import csv
import logging
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

ITEM_MISSING = -1
STRUCT_MISSING = -2

MISSING_SYMBOLS = frozenset({"-", "‒", "–", "−", "x", "X"})
# what write_table emits for each missing kind
_ITEM_SYMBOL = "-"
_STRUCT_SYMBOL = "x"


class IngestionError(ValueError):
    """Raised for malformed count files; ``row`` is 1-based incl. header."""

    def __init__(self, message: str, row: int | None = None):
        self.row = row
        super().__init__(f"row {row}: {message}" if row is not None else message)


@dataclass(frozen=True)
class VariableSchema:
    """Register indicators, their paired ethnicity variables, and covariates.

    ``registers[i]`` is paired with ``ethnicities[i]``. Covariates are extra
    binary variables observed for every listed person (used for partial
    coverage studies); they may carry item-missing codes but are never
    structurally missing.
    """

    registers: tuple[str, ...]
    ethnicities: tuple[str, ...]
    covariates: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "registers", tuple(self.registers))
        object.__setattr__(self, "ethnicities", tuple(self.ethnicities))
        object.__setattr__(self, "covariates", tuple(self.covariates))
        if len(self.registers) != len(self.ethnicities):
            raise ValueError("every register needs exactly one ethnicity variable")
        if len(self.registers) < 2:
            raise ValueError("at least two registers are required")
        names = self.variables
        if len(set(names)) != len(names):
            raise ValueError(f"variable names must be unique: {names}")
        if any(not n or n == "Freq" for n in names):
            raise ValueError("variable names must be non-empty and not 'Freq'")

    @classmethod
    def from_letters(cls, registers: str, covariates: Sequence[str] = ()) -> "VariableSchema":
        """``from_letters("ABC")`` pairs A-a, B-b, C-c."""
        regs = tuple(registers)
        return cls(regs, tuple(r.lower() for r in regs), tuple(covariates))

    @property
    def variables(self) -> tuple[str, ...]:
        return self.registers + self.ethnicities + self.covariates

    @property
    def pairing(self) -> dict[str, str]:
        return dict(zip(self.registers, self.ethnicities))

    @property
    def n_registers(self) -> int:
        return len(self.registers)

    def index(self, name: str) -> int:
        return self.variables.index(name)

    def kind(self, name: str) -> str:
        if name in self.registers:
            return "register"
        if name in self.ethnicities:
            return "ethnicity"
        if name in self.covariates:
            return "covariate"
        raise KeyError(name)


@dataclass(frozen=True)
class IncompleteTable:
    """Observed patterns and their person counts.

    ``patterns`` has one row per observed pattern and one column per schema
    variable (order of ``schema.variables``). Register columns hold 0/1;
    ethnicity and covariate columns hold 0, 1, ``ITEM_MISSING`` or
    ``STRUCT_MISSING``.
    """

    schema: VariableSchema
    patterns: np.ndarray
    counts: np.ndarray
    dropped_unlisted: int = field(default=0, compare=False)

    def __post_init__(self):
        patterns = np.asarray(self.patterns, dtype=np.int8).reshape(-1, len(self.schema.variables))
        counts = np.asarray(self.counts, dtype=np.float64).ravel()
        if len(patterns) != len(counts):
            raise ValueError("patterns and counts differ in length")
        if np.any(counts < 0):
            raise ValueError("counts must be non-negative")
        _check_patterns(self.schema, patterns)
        if len({p.tobytes() for p in patterns}) != len(patterns):
            raise ValueError("duplicate patterns")
        patterns.setflags(write=False)
        counts.setflags(write=False)
        object.__setattr__(self, "patterns", patterns)
        object.__setattr__(self, "counts", counts)

    @property
    def n(self) -> float:
        return float(self.counts.sum())

    def __len__(self) -> int:
        return len(self.counts)

    def has_item_missing(self) -> bool:
        return bool(np.any(self.patterns == ITEM_MISSING))

    def cells(self) -> dict[tuple[int, ...], float]:
        return {tuple(int(v) for v in p): float(c) for p, c in zip(self.patterns, self.counts)}


def _check_patterns(schema: VariableSchema, patterns: np.ndarray) -> None:
    k = schema.n_registers
    regs = patterns[:, :k]
    eths = patterns[:, k : 2 * k]
    covs = patterns[:, 2 * k :]
    if np.any((regs != 0) & (regs != 1)):
        raise ValueError("register indicators must be 0 or 1")
    if np.any(regs.sum(axis=1) == 0):
        raise ValueError("pattern with every register out cannot be observed")
    out = regs == 0
    if np.any(out != (eths == STRUCT_MISSING)):
        raise ValueError("ethnicity must be structurally missing iff its register is out")
    if np.any(~np.isin(eths, (0, 1, ITEM_MISSING, STRUCT_MISSING))):
        raise ValueError("bad ethnicity code")
    if covs.size and np.any(~np.isin(covs, (0, 1, ITEM_MISSING))):
        raise ValueError("bad covariate code")


def make_table(
    schema: VariableSchema,
    rows: Iterable[tuple[Mapping[str, object] | Sequence[object], float]],
) -> IncompleteTable:
    """Build a table from (values, count) pairs using file-style symbols.

    ``values`` is either a mapping name -> symbol or a sequence in
    ``schema.variables`` order; symbols follow the file conventions.
    """
    patterns, counts = [], []
    for i, (values, count) in enumerate(rows, start=1):
        if isinstance(values, Mapping):
            values = [values[name] for name in schema.variables]
        patterns.append(_classify(schema, [str(v) for v in values], i))
        counts.append(count)
    return IncompleteTable(schema, np.array(patterns, dtype=np.int8), np.array(counts, dtype=float))


def _classify(schema: VariableSchema, symbols: list[str], row: int) -> list[int]:
    k = schema.n_registers
    if len(symbols) != len(schema.variables):
        raise IngestionError(f"expected {len(schema.variables)} values, got {len(symbols)}", row)
    out: list[int] = []
    for j, sym in enumerate(symbols[:k]):
        if sym not in ("0", "1"):
            raise IngestionError(f"register {schema.registers[j]} must be 0 or 1, got {sym!r}", row)
        out.append(int(sym))
    for j, sym in enumerate(symbols[k : 2 * k]):
        name = schema.ethnicities[j]
        if out[j] == 0:
            if sym in ("0", "1"):
                raise IngestionError(
                    f"{name}={sym} but register {schema.registers[j]} is 0 (impossible observation)", row
                )
            if sym not in MISSING_SYMBOLS:
                raise IngestionError(f"unknown symbol {sym!r} for {name}", row)
            out.append(STRUCT_MISSING)
        elif sym in ("0", "1"):
            out.append(int(sym))
        elif sym in MISSING_SYMBOLS:
            out.append(ITEM_MISSING)
        else:
            raise IngestionError(f"unknown symbol {sym!r} for {name}", row)
    for j, sym in enumerate(symbols[2 * k :]):
        if sym in ("0", "1"):
            out.append(int(sym))
        elif sym in MISSING_SYMBOLS:
            out.append(ITEM_MISSING)
        else:
            raise IngestionError(f"unknown symbol {sym!r} for {schema.covariates[j]}", row)
    return out


def read_table(path: str | Path, schema: VariableSchema | None = None) -> IncompleteTable:
    """Read a linked-register CSV file.

    The header must name every schema variable plus ``Freq`` (any column
    order). Without an explicit schema one is inferred from single-letter
    headers: capitals are registers, their lowercase twins ethnicities.

    Rows where every register is 0 describe persons seen only in registers
    outside the schema; they carry no information for this schema and are
    dropped (count kept in ``dropped_unlisted``).
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(path)
    with path.open(encoding="utf-8-sig", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise IngestionError("empty file") from None
        body = list(reader)
    if "Freq" not in header:
        raise IngestionError("no Freq column", 1)
    if schema is None:
        schema = infer_schema(header)
    missing = [v for v in schema.variables if v not in header]
    extra = [h for h in header if h != "Freq" and h not in schema.variables]
    if missing or extra:
        raise IngestionError(f"header mismatch: missing {missing}, unexpected {extra}", 1)
    order = [header.index(v) for v in schema.variables]
    freq_col = header.index("Freq")

    patterns: list[list[int]] = []
    counts: list[float] = []
    seen: dict[tuple[int, ...], int] = {}
    dropped = 0
    k = schema.n_registers
    for rowno, raw in enumerate(body, start=2):
        if not raw or all(not c.strip() for c in raw):
            continue
        cells = [c.strip() for c in raw]
        if len(cells) != len(header):
            raise IngestionError(f"expected {len(header)} fields, got {len(cells)}", rowno)
        try:
            count = int(cells[freq_col])
        except ValueError:
            raise IngestionError(f"Freq {cells[freq_col]!r} is not an integer", rowno) from None
        if count < 0:
            raise IngestionError(f"negative count {count}", rowno)
        symbols = [cells[i] for i in order]
        if all(s == "0" for s in symbols[:k]):
            # validate the ethnicity symbols anyway, then drop
            if any(s not in MISSING_SYMBOLS for s in symbols[k : 2 * k]):
                raise IngestionError("all registers out but ethnicity recorded", rowno)
            dropped += count
            continue
        pattern = _classify(schema, symbols, rowno)
        key = tuple(pattern)
        if key in seen:
            raise IngestionError(f"duplicate pattern (first seen in row {seen[key]})", rowno)
        seen[key] = rowno
        patterns.append(pattern)
        counts.append(count)
    if not patterns:
        raise IngestionError("no data rows")
    if dropped:
        log.warning("%s: dropped %d persons listed in no register of the schema", path.name, dropped)
    table = IncompleteTable(schema, np.array(patterns, dtype=np.int8), np.array(counts, dtype=float), dropped)
    if table.n <= 0:
        raise IngestionError("total count is zero")
    return table


def infer_schema(header: Sequence[str]) -> VariableSchema:
    names = [h for h in header if h != "Freq"]
    # a register is an upper-case column with a lower-case ethnicity partner
    regs = [n for n in names if n.isupper() and n.lower() in names]
    eths = [r.lower() for r in regs]
    covs = [n for n in names if n not in regs and n not in eths]
    if not regs:
        raise IngestionError("cannot infer schema: no register with a lower-case ethnicity column", 1)
    return VariableSchema(tuple(regs), tuple(eths), tuple(covs))


def _symbol(code: int) -> str:
    if code == ITEM_MISSING:
        return _ITEM_SYMBOL
    if code == STRUCT_MISSING:
        return _STRUCT_SYMBOL
    return str(int(code))


def write_table(table: IncompleteTable, path: str | Path) -> None:
    """Write in the format ``read_table`` accepts (ASCII missing symbols)."""
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*table.schema.variables, "Freq"])
        for p, c in zip(table.patterns, table.counts):
            w.writerow([*(_symbol(v) for v in p), _format_count(c)])


def _format_count(c: float) -> str:
    return str(int(c)) if float(c).is_integer() else repr(float(c))


def marginal_summary(table: IncompleteTable) -> dict[str, dict[str, float]]:
    """Per register: persons coded non-Maori, Maori, item missing, not listed."""
    k = table.schema.n_registers
    out = {}
    for j, reg in enumerate(table.schema.registers):
        col = table.patterns[:, k + j]
        out[reg] = {
            "0": float(table.counts[col == 0].sum()),
            "1": float(table.counts[col == 1].sum()),
            "item_missing": float(table.counts[col == ITEM_MISSING].sum()),
            "struct_missing": float(table.counts[col == STRUCT_MISSING].sum()),
        }
    return out


def subset_registers(table: IncompleteTable, registers: Sequence[str]) -> IncompleteTable:
    """Aggregate a table onto a subset of its registers.

    Persons present only in the removed registers fall out (they would be
    unlisted in the smaller linkage); their number goes to
    ``dropped_unlisted``.
    """
    s = table.schema
    registers = tuple(registers)
    unknown = [r for r in registers if r not in s.registers]
    if unknown:
        raise ValueError(f"unknown registers {unknown}")
    new = VariableSchema(registers, tuple(s.pairing[r] for r in registers), s.covariates)
    cols = [s.index(v) for v in new.variables]
    acc: dict[bytes, list] = {}
    dropped = table.dropped_unlisted
    k = new.n_registers
    for p, c in zip(table.patterns, table.counts):
        q = p[cols]
        if not q[:k].any():
            dropped += c
            continue
        key = q.tobytes()
        if key in acc:
            acc[key][1] += c
        else:
            acc[key] = [q, c]
    pats = np.array([v[0] for v in acc.values()], dtype=np.int8)
    cnts = np.array([v[1] for v in acc.values()], dtype=float)
    return IncompleteTable(new, pats, cnts, int(dropped))


def collapse_covariates(table: IncompleteTable, covariates: Sequence[str] | None = None) -> IncompleteTable:
    """Sum a table over some (default: all) of its covariates."""
    s = table.schema
    drop = set(s.covariates if covariates is None else covariates)
    unknown = drop - set(s.covariates)
    if unknown:
        raise ValueError(f"not covariates of this table: {sorted(unknown)}")
    new = VariableSchema(s.registers, s.ethnicities, tuple(c for c in s.covariates if c not in drop))
    cols = [s.index(v) for v in new.variables]
    acc: dict[bytes, list] = {}
    for p, c in zip(table.patterns, table.counts):
        q = p[cols]
        entry = acc.setdefault(q.tobytes(), [q, 0.0])
        entry[1] += c
    pats = np.array([v[0] for v in acc.values()], dtype=np.int8).reshape(-1, len(cols))
    cnts = np.array([v[1] for v in acc.values()], dtype=float)
    return IncompleteTable(new, pats, cnts, table.dropped_unlisted)
