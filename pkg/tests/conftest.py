from __future__ import annotations

import sys
from functools import lru_cache
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parents[1]
DATA = ROOT / "data"
CONFIGS = ROOT / "configs"
sys.path.insert(0, str(Path(__file__).parent))

from mselink.em import fit_em  # noqa: E402
from mselink.formula import parse  # noqa: E402
from mselink.ingest import read_table, subset_registers  # noqa: E402
from mselink.latent import LatentSpec, fit_lcmse  # noqa: E402

import targets as pv  # noqa: E402


@lru_cache(maxsize=None)
def table(name: str):
    if name == "s1":
        return read_table(DATA / "s1_census_moh.csv")
    if name == "s3":
        return read_table(DATA / "s3_census_dia_moh_moe.csv")
    if name == "s2":
        return subset_registers(table("s3"), "ABC")
    if name == "s4":
        return read_table(DATA / "s4_dia_moh_moe.csv")
    raise KeyError(name)


MODELS = {"s1": pv.S1_MODEL, "s2": pv.S2_MODEL, "s3": pv.S3_RESTRICTED, "s4": pv.S4_MODEL}


@lru_cache(maxsize=None)
def fitted(name: str):
    t = table(name)
    return fit_em(t, parse(MODELS[name], t.schema))


@lru_cache(maxsize=None)
def latent_fit(model: str):
    t = table("s3")
    return fit_lcmse(t, LatentSpec.from_formula(model, t.schema))


@pytest.fixture(scope="session")
def s1():
    return table("s1")


@pytest.fixture(scope="session")
def s1_fit():
    return fitted("s1")


def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(acceptance_log.LINES):
            terminalreporter.write_line(acceptance_log.LINES[n])
