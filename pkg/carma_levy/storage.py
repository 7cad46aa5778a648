"""
Reading and writing experiment artifacts. Tabular data goes to CSV with a
header row, summaries to JSON. Floats are written with repr so that a rerun
with the same seed reproduces the files byte for byte.
"""

import csv
import logging
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from pydantic import BaseModel

from carma_levy.exceptions import ConfigError
from carma_levy.models.experiment import ReplicationRow


logger = logging.getLogger(__name__)


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (float, np.floating)):
        return repr(float(value))

    return str(value)


def h_label(h: float) -> str:
    """File name tag of a sampling interval, e.g. 0.01 -> '0.01'."""
    return repr(float(h))


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf8") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(value) for value in row])

    logger.debug(f"Wrote {path}")

    return path


def write_json(path: Path, model: BaseModel) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf8") as f:
        f.write(model.model_dump_json(indent=2))

    logger.debug(f"Wrote {path}")

    return path


def write_increments(
    out_dir: Path, h: float, estimates: np.ndarray, truth: Optional[np.ndarray] = None
) -> Path:
    """n, the recovered increment and, when known, the true one."""

    estimates = np.atleast_2d(np.asarray(estimates, dtype=float).T).T
    m = estimates.shape[1]
    header = ["n"] + [f"estimate_{i + 1}" for i in range(m)]
    columns = [estimates]
    if truth is not None:
        header += [f"truth_{i + 1}" for i in range(m)]
        columns.append(np.asarray(truth, dtype=float).reshape(estimates.shape))
    table = np.hstack(columns)

    return write_csv(
        out_dir / f"increments_h{h_label(h)}.csv",
        header,
        ([n] + list(row) for n, row in enumerate(table, start=1)),
    )


def write_ecdf(out_dir: Path, h: float, values: np.ndarray, cdf: Callable) -> Path:
    """Empirical CDF of univariate increments next to a reference CDF."""

    x = np.sort(np.asarray(values, dtype=float).ravel())
    empirical = np.arange(1, x.shape[0] + 1) / x.shape[0]
    reference = np.asarray(cdf(x), dtype=float)

    return write_csv(
        out_dir / f"ecdf_h{h_label(h)}.csv",
        ["x", "ecdf", "reference_cdf"],
        zip(x, empirical, reference),
    )


def write_replications(out_dir: Path, rows: Sequence[ReplicationRow], names) -> Path:
    width = max([len(row.theta) for row in rows] + [len(names)])
    names = list(names) + [f"theta_{i + 1}" for i in range(len(names), width)]
    header = (
        ["h", "replication", "seed_key"]
        + names
        + ["criterion", "dropped", "converged", "mean_abs_error", "stage", "message"]
    )

    def cells(row: ReplicationRow) -> list:
        theta = list(row.theta) + [None] * (width - len(row.theta))
        return (
            [row.h, row.replication, row.seed_key]
            + theta
            + [
                row.criterion,
                row.dropped,
                row.converged,
                row.mean_abs_error,
                row.stage,
                row.message,
            ]
        )

    return write_csv(out_dir / "replications.csv", header, map(cells, rows))


def read_series_csv(path: Path) -> np.ndarray:
    """Observations as written by the simulate command: the y_* columns, or
    every column after the first when none is named y_*."""

    try:
        with open(path, newline="", encoding="utf8") as f:
            reader = csv.reader(f)
            header = next(reader)
            columns = [i for i, name in enumerate(header) if name.startswith("y_")]
            columns = columns or list(range(1, len(header)))
            rows = [[float(row[i]) for i in columns] for row in reader if row]
    except (OSError, StopIteration, ValueError, IndexError) as err:
        raise ConfigError(f"Cannot read observations from {path}: {err}") from err

    if not rows:
        raise ConfigError(f"{path} contains no observations")

    return np.asarray(rows)


def write_series(
    out_dir: Path, h: float, values: np.ndarray, driver: Optional[np.ndarray] = None
) -> Path:
    """Sampled Y, and the driver path L on the same grid when given."""

    values = np.atleast_2d(np.asarray(values, dtype=float).T).T
    header = ["t"] + [f"y_{i + 1}" for i in range(values.shape[1])]
    if driver is not None:
        driver = np.atleast_2d(np.asarray(driver, dtype=float).T).T
        if driver.shape[0] != values.shape[0]:
            raise ValueError(
                f"Driver has {driver.shape[0]} rows, observations {values.shape[0]}"
            )
        header += [f"l_{i + 1}" for i in range(driver.shape[1])]
        values = np.hstack([values, driver])

    return write_csv(
        out_dir / f"series_h{h_label(h)}.csv",
        header,
        ([k / round(1 / h)] + list(row) for k, row in enumerate(values)),
    )
