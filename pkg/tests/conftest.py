"""tests.conftest

Shared pytest setup and fakes.
Environment defaults must be set before the CLI loads its settings.
"""

from __future__ import annotations

import os
from collections.abc import Iterable, Sequence

import numpy as np
import pytest

from harness.repository import Cell, parse_table, render_table
from sunet.network import Network

os.environ.setdefault("SUNET_LOG_LEVEL", "WARNING")
os.environ.setdefault("SUNET_WORKERS", "1")


class FakeResultsRepository:
    """In-memory repository matching the production repository contract."""

    def __init__(self) -> None:
        self.tables: dict[str, str] = {}
        self.documents: dict[str, object] = {}
        self.networks: dict[str, tuple[dict[str, np.ndarray], Network, int]] = {}

    def write_table(
        self, name: str, columns: Sequence[str], rows: Iterable[Sequence[Cell]]
    ) -> None:
        self.tables[name] = render_table(columns, rows)

    def read_table(self, name: str) -> list[dict[str, str]]:
        if name not in self.tables:
            raise FileNotFoundError(f"table not found: {name}")
        return parse_table(self.tables[name])

    def write_json(self, name: str, payload: object) -> None:
        self.documents[name] = payload

    def save_network(self, name: str, net: Network, step: int) -> None:
        snapshot = {key: p.values.copy() for key, p in net.parameters.items()}
        self.networks[name] = (snapshot, net, step)

    def load_network(self, name: str) -> tuple[Network, int]:
        if name not in self.networks:
            raise FileNotFoundError(f"checkpoint not found: {name}")
        snapshot, net, step = self.networks[name]
        for key, values in snapshot.items():
            net.parameters[key].values = values.copy()
        return net, step


@pytest.fixture
def repository() -> FakeResultsRepository:
    return FakeResultsRepository()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def make_repository() -> type[FakeResultsRepository]:
    return FakeResultsRepository
