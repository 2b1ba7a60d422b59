"""Dataset container and CSV ingestion.

The on-disk format is a header row ``y,d,x1,...,xp`` (case-insensitive)
followed by numeric rows; d must be 0 or 1.  Floats are written with 17
significant digits so write/load round-trips are exact.
"""
import csv
import numpy as np
from dataclasses import dataclass

from .exceptions import DataError

__all__ = ["Dataset", "load_csv", "write_csv"]


@dataclass(frozen=True)
class Dataset:
    """Observations (y_i, d_i, x_i): outcome, binary treatment, covariates."""
    y: np.ndarray
    d: np.ndarray
    x: np.ndarray
    column_names: tuple = None

    def __post_init__(self):
        y = np.ascontiguousarray(self.y, dtype=np.float64)
        d = np.ascontiguousarray(self.d, dtype=np.int64)
        x = np.ascontiguousarray(self.x, dtype=np.float64)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "x", x)
        if x.ndim != 2:
            raise DataError("x must be a 2-d array")
        n = x.shape[0]
        if y.shape != (n,) or d.shape != (n,):
            raise DataError("y, d, x row counts disagree")
        if not np.isfinite(y).all() or not np.isfinite(x).all():
            raise DataError("data contain NaN or Inf")
        if not np.isin(d, (0, 1)).all():
            raise DataError("treatment indicator must be 0 or 1")
        if self.column_names is not None:
            names = tuple(self.column_names)
            if len(names) != x.shape[1]:
                raise DataError("column_names length must equal p")
            object.__setattr__(self, "column_names", names)

    @property
    def n(self):
        return self.x.shape[0]

    @property
    def p(self):
        return self.x.shape[1]

    def arm(self, d):
        """(x, y, row indices) of the rows with treatment value d."""
        idx = np.flatnonzero(self.d == d)
        return self.x[idx], self.y[idx], idx

    def with_intercept(self):
        """Copy with an all-ones column prepended to x."""
        ones = np.ones((self.n, 1))
        names = None
        if self.column_names is not None:
            names = ("intercept",) + self.column_names
        return Dataset(y=self.y, d=self.d,
                       x=np.hstack([ones, self.x]), column_names=names)


def _parse_float(text, line_no, col):
    try:
        return float(text)
    except ValueError:
        raise DataError(
            f"line {line_no}: column {col!r} has non-numeric value {text!r}"
        ) from None


def load_csv(path, add_intercept=False):
    """Load a dataset from a ``y,d,x1,...,xp`` CSV file."""
    try:
        fh = open(path, newline="")
    except OSError as err:
        raise FileNotFoundError(f"cannot open data file {path}: {err}") from None
    with fh:
        reader = csv.reader(fh)
        rows = [(i + 1, row) for i, row in enumerate(reader)
                if any(field.strip() for field in row)]
    if not rows:
        raise DataError(f"{path}: file is empty")

    header_line, header = rows[0]
    names = [h.strip().lower() for h in header]
    p = len(names) - 2
    expected = ["y", "d"] + [f"x{j}" for j in range(1, p + 1)]
    if p < 1 or names != expected:
        raise DataError(
            f"line {header_line}: header must be y,d,x1,...,xp "
            f"(got {','.join(header)})")

    body = rows[1:]
    if not body:
        raise DataError(f"{path}: no data rows")
    n = len(body)
    y = np.empty(n)
    d = np.empty(n, dtype=np.int64)
    x = np.empty((n, p))
    for i, (line_no, row) in enumerate(body):
        if len(row) != p + 2:
            raise DataError(f"line {line_no}: expected {p + 2} fields, "
                            f"got {len(row)}")
        y[i] = _parse_float(row[0], line_no, "y")
        d_val = _parse_float(row[1], line_no, "d")
        if d_val not in (0.0, 1.0):
            raise DataError(f"line {line_no}: d must be 0 or 1, got {row[1]}")
        d[i] = int(d_val)
        for j in range(p):
            x[i, j] = _parse_float(row[2 + j], line_no, f"x{j + 1}")
    if not np.isfinite(y).all() or not np.isfinite(x).all():
        raise DataError(f"{path}: data contain NaN or Inf")

    ds = Dataset(y=y, d=d, x=x, column_names=tuple(expected[2:]))
    return ds.with_intercept() if add_intercept else ds


def write_csv(dataset, path):
    """Write a dataset in the load_csv format (17 significant digits)."""
    p = dataset.p
    header = ["y", "d"] + [f"x{j}" for j in range(1, p + 1)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(dataset.n):
            row = [format(dataset.y[i], ".17g"), str(int(dataset.d[i]))]
            row.extend(format(v, ".17g") for v in dataset.x[i])
            writer.writerow(row)
