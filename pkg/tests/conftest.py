from __future__ import annotations

import json
from pathlib import Path

import pytest

from osmforge.osm import load_osm_json
from osmforge.tiling import TileRef

DATA = Path(__file__).resolve().parent / "data"
FIXTURES = DATA / "fixtures"
MAIN_TILE = TileRef(18, 74975, 100281)
EDIT_ARCHETYPES = ("add_stadium", "add_building", "remove_buildings", "remove_storage_tanks",
                   "lake_to_grass", "crop_to_solar")

collect_ignore = ["data/make_fixtures.py"]


@pytest.fixture(scope="session")
def data_dir() -> Path:
    return DATA


@pytest.fixture(scope="session")
def main_tile() -> TileRef:
    return MAIN_TILE


@pytest.fixture(scope="session")
def main_doc():
    return load_osm_json(FIXTURES / "osm" / "18" / "74975" / "100281.json")


@pytest.fixture(scope="session")
def fixture_ids() -> dict:
    return json.loads((DATA / "fixture_ids.json").read_text())


def pytest_configure(config):
    config._acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
