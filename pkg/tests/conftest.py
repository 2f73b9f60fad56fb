import sys
import warnings
from functools import lru_cache
from pathlib import Path

import pytest

from tdlmp.netmodel import load_feeder, read_document
from tdlmp.opf import OpfOptions, assemble, solve
from tdlmp.schedules import SiteConfig, build_fleet, uniform_scenario

FIXTURES = Path(__file__).parent / "fixtures"
SOLVABLE = ("two_bus", "chain4", "feeder15")
# DER mix per solvable fixture: (EVs per site, PV kVA per site)
DER_MIX = {"two_bus": (0, 0.0), "chain4": (2, 20.0), "feeder15": (3, 30.0)}


def fixture_path(name: str) -> Path:
    return FIXTURES / f"{name}.json"


@lru_cache(maxsize=None)
def feeder_of(name: str):
    return load_feeder(fixture_path(name))


@lru_cache(maxsize=None)
def sites_of(name: str) -> SiteConfig:
    return SiteConfig.from_document(read_document(fixture_path(name)))


@lru_cache(maxsize=None)
def fleet_of(name: str, cyclic: bool = True):
    evs, pv = DER_MIX[name]
    fd, sites = feeder_of(name), sites_of(name)
    return build_fleet(uniform_scenario(sites, evs, pv), fd, sites, cyclic)


@lru_cache(maxsize=None)
def solution_of(name: str, transformer_cost: bool = True, cyclic: bool = True):
    """Full-opt (or PQ-opt) solution with the fixture's standard DER mix; shared across tests."""
    fd = feeder_of(name)
    opts = OpfOptions(include_transformer_cost=transformer_cost, cyclic=cyclic)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return solve(assemble(fd, fleet_of(name, cyclic), opts))


@pytest.fixture(params=SOLVABLE)
def solved(request):
    return request.param, solution_of(request.param)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    verdicts = getattr(mod, "VERDICTS", None)
    if not verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(verdicts):
        terminalreporter.write_line(verdicts[n])
