"""harness.repository

Results storage for a run directory and a small repository interface.
Drivers write tables and checkpoints through the interface so tests can keep
everything in memory.
"""

from __future__ import annotations

import csv
import io
import json
from collections.abc import Iterable, Sequence
from pathlib import Path
from typing import Protocol

from sunet.checkpoint import load_checkpoint, save_checkpoint
from sunet.network import Network

Cell = str | int | float


def format_cell(value: Cell) -> str:
    """Floats with 6 significant digits; everything else via str()."""
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def render_table(columns: Sequence[str], rows: Iterable[Sequence[Cell]]) -> str:
    """CSV text with a header row; cells go through format_cell."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        if len(row) != len(columns):
            raise ValueError(f"row has {len(row)} cells, expected {len(columns)}")
        writer.writerow([format_cell(value) for value in row])
    return buffer.getvalue()


def parse_table(text: str) -> list[dict[str, str]]:
    """Rows of CSV text as header-keyed dicts of strings."""
    return list(csv.DictReader(io.StringIO(text)))


class ResultsRepository(Protocol):
    """Storage contract used by the cross-validation driver, reports and tests."""

    def write_table(
        self, name: str, columns: Sequence[str], rows: Iterable[Sequence[Cell]]
    ) -> None:
        """Persist a CSV table under ``name``."""

    def read_table(self, name: str) -> list[dict[str, str]]:
        """Return the rows of a stored table as column -> text dicts."""

    def write_json(self, name: str, payload: object) -> None:
        """Persist a JSON document (run metadata, resolved config)."""

    def save_network(self, name: str, net: Network, step: int) -> None:
        """Persist a training checkpoint."""

    def load_network(self, name: str) -> tuple[Network, int]:
        """Return a stored checkpoint and its iteration."""


class CsvResultsRepository:
    """Run-directory implementation: tables as CSV, checkpoints as binary files."""

    def __init__(self, root: Path) -> None:
        self.root = Path(root)

    def path(self, name: str) -> Path:
        return self.root / name

    def write_table(
        self, name: str, columns: Sequence[str], rows: Iterable[Sequence[Cell]]
    ) -> None:
        target = self.path(name)
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(render_table(columns, rows), encoding="utf-8")

    def read_table(self, name: str) -> list[dict[str, str]]:
        target = self.path(name)
        if not target.exists():
            raise FileNotFoundError(f"table not found: {target}")
        return parse_table(target.read_text(encoding="utf-8"))

    def write_json(self, name: str, payload: object) -> None:
        target = self.path(name)
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def save_network(self, name: str, net: Network, step: int) -> None:
        save_checkpoint(self.path(name), net, step)

    def load_network(self, name: str) -> tuple[Network, int]:
        return load_checkpoint(self.path(name))
