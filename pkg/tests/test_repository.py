"""tests.test_repository

CSV rendering and the run-directory repository.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
import pytest

from harness.repository import CsvResultsRepository, format_cell, parse_table, render_table
from sunet.models import NetworkConfig
from sunet.network import build_network


def test_format_cell() -> None:
    assert format_cell(0.123456789) == "0.123457"
    assert format_cell(1234567.0) == "1.23457e+06"
    assert format_cell(3.0) == "3"
    assert format_cell(math.nan) == "nan"
    assert format_cell(True) == "1"
    assert format_cell(7) == "7"
    assert format_cell("op1") == "op1"


def test_render_and_parse_table() -> None:
    text = render_table(("name", "value"), [("a", 0.5), ("b,c", 2)])
    assert text == 'name,value\na,0.5\n"b,c",2\n'
    assert parse_table(text) == [{"name": "a", "value": "0.5"}, {"name": "b,c", "value": "2"}]
    with pytest.raises(ValueError, match="expected 2"):
        render_table(("name", "value"), [("a",)])


def test_csv_repository_tables_and_json(tmp_path: Path) -> None:
    repository = CsvResultsRepository(tmp_path / "run")
    repository.write_table("nested/t.csv", ("x",), [(1,), (2.5,)])
    assert repository.read_table("nested/t.csv") == [{"x": "1"}, {"x": "2.5"}]
    repository.write_json("config.json", {"b": 1, "a": [1, 2]})
    text = (tmp_path / "run" / "config.json").read_text(encoding="utf-8")
    assert text.index('"a"') < text.index('"b"')
    assert json.loads(text) == {"a": [1, 2], "b": 1}
    with pytest.raises(FileNotFoundError, match="missing.csv"):
        repository.read_table("missing.csv")


def test_csv_repository_checkpoints(tmp_path: Path) -> None:
    repository = CsvResultsRepository(tmp_path)
    net = build_network(NetworkConfig(levels=1, channels=2), np.random.default_rng(0))
    repository.save_network("checkpoints/fold00_iter00010.ckpt", net, 10)
    restored, step = repository.load_network("checkpoints/fold00_iter00010.ckpt")
    assert step == 10
    for name, parameter in net.parameters.items():
        np.testing.assert_array_equal(restored.parameters[name].values, parameter.values)
    with pytest.raises(FileNotFoundError):
        repository.load_network("checkpoints/none.ckpt")
