"""Delimited-text ingestion and preprocessing.

Builds a Dataset from a header-bearing CSV/TSV: selected feature columns
parsed as reals, the anchor column as {0, 1}, an optional stratum column
recoded to consecutive integers.  Preprocessing is complete-case filtering
(missing tokens: empty string, NA, NaN, case-insensitive), log(1+x) on
listed columns, and standardization to mean 0 / SD 1.  The fitted
standardization constants are kept in the report so new data can be scored
with the training statistics instead of being re-standardized.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import DataError, Dataset

__all__ = [
    "ColumnTransform",
    "PreprocessReport",
    "ingest",
    "apply_transforms",
    "write_dataset_csv",
]

MISSING_TOKENS = frozenset({"", "na", "nan"})


def _is_missing(cell: str) -> bool:
    return cell.strip().lower() in MISSING_TOKENS


@dataclass(frozen=True)
class ColumnTransform:
    """Per-column preprocessing record: log1p applied, then (x-mean)/sd."""

    name: str
    log1p: bool
    mean: float | None
    sd: float | None


@dataclass(frozen=True)
class PreprocessReport:
    """What ingestion did, with the constants needed to score new data."""

    n_rows_read: int
    n_rows_dropped: int
    n_rows_kept: int
    n_anchor_positive: int
    transforms: tuple[ColumnTransform, ...]
    stratum_levels: tuple[str, ...] | None

    def as_dict(self) -> dict:
        return {
            "n_rows_read": self.n_rows_read,
            "n_rows_dropped": self.n_rows_dropped,
            "n_rows_kept": self.n_rows_kept,
            "n_anchor_positive": self.n_anchor_positive,
            "transforms": [
                {"name": t.name, "log1p": t.log1p, "mean": t.mean, "sd": t.sd}
                for t in self.transforms
            ],
            "stratum_levels": None
            if self.stratum_levels is None
            else list(self.stratum_levels),
        }


def _read_table(path, delimiter: str):
    path = Path(path)
    if not path.exists():
        raise DataError(f"input file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        rows = [row for row in reader if row and any(c.strip() for c in row)]
    if not rows:
        raise DataError(f"input file is empty: {path}")
    header = [c.strip() for c in rows[0]]
    return header, rows[1:]


def ingest(
    path,
    *,
    anchor: str,
    features: list[str],
    stratum: str | None = None,
    log_transform: tuple[str, ...] = (),
    standardize: bool = False,
    complete_case: bool = True,
    delimiter: str = ",",
):
    """Parse a delimited file into a (Dataset, PreprocessReport) pair.

    A row is dropped (complete_case=True) or rejected (complete_case=False)
    when any selected cell holds a missing token; cells that are neither
    missing tokens nor parseable numbers are always an error.  An intercept
    column of ones is prepended to the features.

    Raises
    ------
    DataError
        Missing file, unknown columns, unparseable cells, non-binary anchor
        values, zero-variance columns under standardization, or no
        anchor-positive rows after filtering.
    """
    header, body = _read_table(path, delimiter)

    wanted = list(features) + [anchor] + ([stratum] if stratum else [])
    missing_cols = [c for c in wanted if c not in header]
    if missing_cols:
        raise DataError(f"columns not found in header: {missing_cols}")
    unknown_log = [c for c in log_transform if c not in features]
    if unknown_log:
        raise DataError(f"log_transform columns not among features: {unknown_log}")
    col_of = {name: header.index(name) for name in wanted}

    kept_rows = []
    n_dropped = 0
    for lineno, row in enumerate(body, start=2):
        if len(row) < len(header):
            raise DataError(f"line {lineno}: expected {len(header)} cells, got {len(row)}")
        cells = [row[col_of[c]].strip() for c in wanted]
        if any(_is_missing(c) for c in cells):
            if complete_case:
                n_dropped += 1
                continue
            raise DataError(
                f"line {lineno}: missing value with complete_case disabled"
            )
        kept_rows.append((lineno, cells))

    if not kept_rows:
        raise DataError("no usable rows after complete-case filtering")

    n_feat = len(features)
    raw = np.empty((len(kept_rows), n_feat))
    anchor_vals = np.empty(len(kept_rows))
    stratum_raw: list[str] = []
    for i, (lineno, cells) in enumerate(kept_rows):
        for j in range(n_feat):
            try:
                raw[i, j] = float(cells[j])
            except ValueError:
                raise DataError(
                    f"line {lineno}: cannot parse '{cells[j]}' in column "
                    f"'{features[j]}' as a number"
                ) from None
        try:
            anchor_vals[i] = float(cells[n_feat])
        except ValueError:
            raise DataError(
                f"line {lineno}: cannot parse anchor value '{cells[n_feat]}'"
            ) from None
        if stratum:
            stratum_raw.append(cells[n_feat + 1])

    if not np.all((anchor_vals == 0.0) | (anchor_vals == 1.0)):
        bad = anchor_vals[(anchor_vals != 0.0) & (anchor_vals != 1.0)][0]
        raise DataError(f"anchor column '{anchor}' contains non-binary value {bad!r}")
    anchor_arr = anchor_vals.astype(np.int8)
    if anchor_arr.sum() == 0:
        raise DataError("zero anchor-positive rows after filtering")

    transforms = []
    design_cols = raw.copy()
    log_set = set(log_transform)
    for j, name in enumerate(features):
        use_log = name in log_set
        if use_log:
            if np.any(design_cols[:, j] <= -1.0):
                raise DataError(
                    f"column '{name}': log(1+x) undefined for values <= -1"
                )
            design_cols[:, j] = np.log1p(design_cols[:, j])
        mean = sd = None
        if standardize:
            mean = float(design_cols[:, j].mean())
            sd = float(design_cols[:, j].std(ddof=0))
            if sd == 0.0:
                raise DataError(f"zero variance column under standardization: '{name}'")
            design_cols[:, j] = (design_cols[:, j] - mean) / sd
        transforms.append(ColumnTransform(name=name, log1p=use_log, mean=mean, sd=sd))

    stratum_arr = None
    levels = None
    if stratum:
        levels = tuple(sorted(set(stratum_raw), key=_level_key))
        code = {lvl: i for i, lvl in enumerate(levels)}
        stratum_arr = np.asarray([code[v] for v in stratum_raw], dtype=np.int64)

    design = np.hstack([np.ones((design_cols.shape[0], 1)), design_cols])
    data = Dataset(
        design=design,
        anchor=anchor_arr,
        stratum=stratum_arr,
        feature_names=("intercept",) + tuple(features),
    )
    report = PreprocessReport(
        n_rows_read=len(body),
        n_rows_dropped=n_dropped,
        n_rows_kept=len(kept_rows),
        n_anchor_positive=int(anchor_arr.sum()),
        transforms=tuple(transforms),
        stratum_levels=levels,
    )
    return data, report


def _level_key(v: str):
    try:
        return (0, float(v), "")
    except ValueError:
        return (1, 0.0, v)


def apply_transforms(report: PreprocessReport, raw: np.ndarray) -> np.ndarray:
    """Score-time design matrix from raw feature columns.

    ``raw`` columns must follow the report's feature order.  Applies the
    stored log1p flags and the training-set standardization constants (never
    re-standardizes), then prepends the intercept column.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2 or raw.shape[1] != len(report.transforms):
        raise ValueError(
            f"expected {len(report.transforms)} feature columns, got {raw.shape}"
        )
    out = raw.copy()
    for j, t in enumerate(report.transforms):
        if t.log1p:
            out[:, j] = np.log1p(out[:, j])
        if t.mean is not None:
            out[:, j] = (out[:, j] - t.mean) / t.sd
    return np.hstack([np.ones((out.shape[0], 1)), out])


def write_dataset_csv(data: Dataset, path, delimiter: str = ",") -> None:
    """Export a Dataset (sans intercept column) as a header-bearing CSV.

    Columns: the non-intercept features under their names, then ``anchor``
    and, when present, ``stratum``.  Values are written with full
    round-trip precision so ingest(write(data)) reproduces the matrix.
    """
    has_intercept = np.all(data.design[:, 0] == 1.0)
    start = 1 if has_intercept else 0
    names = list(data.feature_names[start:])
    header = names + ["anchor"] + (["stratum"] if data.stratum is not None else [])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, delimiter=delimiter)
        writer.writerow(header)
        for i in range(data.n_rows):
            row = [repr(float(v)) for v in data.design[i, start:]]
            row.append(str(int(data.anchor[i])))
            if data.stratum is not None:
                row.append(str(int(data.stratum[i])))
            writer.writerow(row)
