import csv
import logging
import os
from typing import Iterable, List, Optional, Sequence

import numpy as np

from config import config
from core import Grid, Trajectory
from iteration_log import IterationLog

logger = logging.getLogger(__name__)

ITERATION_HEADER = ["i", "J", "delta_u_sq", "eps_min", "c_increases", "accepted", "residual"]


class OutputWriter:
    """Writes run results as CSV and plain-text files into one directory"""

    def __init__(self, directory: str, precision: int = config.FLOAT_PRECISION):
        self.directory = directory
        self.precision = precision
        os.makedirs(directory, exist_ok=True)

    def path(self, name: str) -> str:
        return os.path.join(self.directory, name)

    def number(self, value: float) -> str:
        """Format with the configured number of significant digits"""
        return f"{float(value):.{self.precision}g}"

    def _write_rows(self, name: str, header: Sequence[str], rows: Iterable[Sequence[str]]) -> str:
        path = self.path(name)
        with open(path, "w", newline="", encoding="utf-8") as file:
            writer = csv.writer(file, lineterminator="\n")
            writer.writerow(header)
            writer.writerows(rows)
        logger.debug(f"Wrote {path}")
        return path

    def write_trajectory(self, name: str, trajectory: Trajectory, names: Sequence[str]) -> str:
        """One row per node: t followed by the components"""
        rows = (
            [self.number(t)] + [self.number(v) for v in values]
            for t, values in zip(trajectory.times, trajectory.values)
        )
        return self._write_rows(name, ["t", *names], rows)

    def write_states(self, state: Trajectory, names: Sequence[str]) -> str:
        return self.write_trajectory("trajectories.csv", state, names)

    def write_controls(self, control: Trajectory, names: Sequence[str]) -> str:
        return self.write_trajectory("controls.csv", control, names)

    def write_iterations(self, log: IterationLog) -> str:
        rows = (
            [str(r.index), self.number(r.J), self.number(r.delta_u_sq), self.number(r.eps_min),
             str(r.c_increases), "1" if r.accepted else "0",
             "" if r.residual is None else self.number(r.residual)]
            for r in log
        )
        return self._write_rows("iterations.csv", ITERATION_HEADER, rows)

    def write_summary(self, lines: List[str]) -> str:
        path = self.path("summary.txt")
        with open(path, "w", encoding="utf-8") as file:
            file.write("\n".join(lines) + "\n")
        return path


def read_control_csv(path: str, grid: Grid, names: Optional[Sequence[str]] = None) -> Trajectory:
    """
    Read a controls file in the controls.csv layout (t column first).

    Raises ValueError when the file does not hold exactly N+1 rows or the
    columns do not match `names`.
    """
    with open(path, "r", encoding="utf-8", newline="") as file:
        rows = list(csv.reader(file))
    if not rows:
        raise ValueError(f"Control file {path} is empty")
    header, body = rows[0], [row for row in rows[1:] if row]
    if header[0] != "t":
        raise ValueError(f"Control file {path} must start with a 't' column")
    if names is not None and list(header[1:]) != list(names):
        raise ValueError(f"Control file columns {header[1:]} do not match {list(names)}")
    if len(body) != grid.N + 1:
        raise ValueError(f"Control file has {len(body)} rows, grid needs {grid.N + 1}")
    values = np.array([[float(v) for v in row[1:]] for row in body])
    return Trajectory(grid, values)
