"""CSV ingestion and result serialisation.

Datasets travel as comma-separated files with a header row, UTF-8, '.'
decimal separator.  Two layouts are supported: a single file with a
population column taking the values ``source`` / ``target``, or one
file per population.  Floats are written with 17 significant digits so
a round trip through text is value-identical.
"""

from __future__ import annotations

import csv
import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigurationError, IngestionError
from .model import TransferDataset

_FLOAT_FMT = "%.17g"


@dataclass(frozen=True)
class ColumnSchema:
    """Names the response, covariates and optional population column.

    ``covariate_columns`` empty means "every column that is neither the
    response nor the population marker", in file order.
    """

    response_column: str = "y"
    covariate_columns: tuple[str, ...] = ()
    population_column: str = "population"

    def __post_init__(self):
        object.__setattr__(self, "covariate_columns", tuple(self.covariate_columns))


def _read_rows(path: str):
    try:
        handle = open(path, "r", encoding="utf-8", newline="")
    except OSError as err:
        raise IngestionError(f"cannot open {err.filename or path}: {err.strerror}",
                             path=path) from None
    with handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError("file is empty", path=path) from None
        header = [h.strip() for h in header]
        rows = [(line_no, row) for line_no, row in enumerate(reader, start=2)]
    return header, rows


def _parse_block(path, header, rows, schema, covariates, need_response):
    col_pos = {name: i for i, name in enumerate(header)}
    y_pos = col_pos.get(schema.response_column)
    if need_response and y_pos is None:
        raise IngestionError(
            f"missing response column {schema.response_column!r}", path=path
        )
    for name in covariates:
        if name not in col_pos:
            raise IngestionError(f"missing covariate column {name!r}", path=path)
    x = np.empty((len(rows), len(covariates)))
    y = np.full(len(rows), np.nan)
    for r, (line_no, row) in enumerate(rows):
        if len(row) != len(header):
            raise IngestionError(
                f"expected {len(header)} fields, found {len(row)}",
                path=path, line=line_no,
            )
        for c, name in enumerate(covariates):
            cell = row[col_pos[name]].strip()
            if cell == "":
                raise IngestionError("missing covariate value", path=path,
                                     line=line_no, column=name)
            try:
                x[r, c] = float(cell)
            except ValueError:
                raise IngestionError(f"unparseable numeric {cell!r}", path=path,
                                     line=line_no, column=name) from None
        if y_pos is not None:
            cell = row[y_pos].strip()
            if cell == "":
                if need_response:
                    raise IngestionError("missing response on a source row",
                                         path=path, line=line_no,
                                         column=schema.response_column)
            else:
                try:
                    y[r] = float(cell)
                except ValueError:
                    raise IngestionError(f"unparseable numeric {cell!r}",
                                         path=path, line=line_no,
                                         column=schema.response_column) from None
        elif need_response:
            raise IngestionError("missing response on a source row", path=path,
                                 line=line_no, column=schema.response_column)
    return x, y


def _covariate_names(header, schema):
    if schema.covariate_columns:
        return list(schema.covariate_columns)
    drop = {schema.response_column, schema.population_column}
    return [h for h in header if h not in drop]


def load_dataset(source_path: str, target_path: str | None = None,
                 schema: ColumnSchema | None = None) -> TransferDataset:
    """Load a transfer dataset from one or two CSV files.

    Single-file mode requires the population column; two-file mode reads
    source rows (response required) from the first path and target rows
    from the second.
    """
    schema = schema or ColumnSchema()
    if target_path is None:
        header, rows = _read_rows(source_path)
        if schema.population_column not in header:
            raise IngestionError(
                f"missing population column {schema.population_column!r}",
                path=source_path,
            )
        pop_pos = header.index(schema.population_column)
        src_rows, tgt_rows = [], []
        for line_no, row in rows:
            if len(row) != len(header):
                raise IngestionError(
                    f"expected {len(header)} fields, found {len(row)}",
                    path=source_path, line=line_no,
                )
            value = row[pop_pos].strip().lower()
            if value == "source":
                src_rows.append((line_no, row))
            elif value == "target":
                tgt_rows.append((line_no, row))
            else:
                raise IngestionError(
                    f"population must be 'source' or 'target', found {value!r}",
                    path=source_path, line=line_no, column=schema.population_column,
                )
        covariates = _covariate_names(header, schema)
        sx, sy = _parse_block(source_path, header, src_rows, schema, covariates, True)
        tx, _ = _parse_block(source_path, header, tgt_rows, schema, covariates, False)
    else:
        s_header, s_rows = _read_rows(source_path)
        t_header, t_rows = _read_rows(target_path)
        covariates = _covariate_names(s_header, schema)
        missing = [c for c in covariates if c not in t_header]
        if missing:
            raise IngestionError(f"target file lacks columns {missing}",
                                 path=target_path)
        sx, sy = _parse_block(source_path, s_header, s_rows, schema, covariates, True)
        tx, _ = _parse_block(target_path, t_header, t_rows, schema, covariates, False)
    if sx.shape[0] == 0:
        raise IngestionError("source population is empty", path=source_path)
    if tx.shape[0] == 0:
        raise IngestionError("target population is empty",
                             path=target_path or source_path)
    return TransferDataset(sx, sy, tx, tuple(covariates))


def atomic_write_text(path: str, text: str) -> None:
    """Whole-file atomic write (temp file + rename, same directory)."""
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".atrel-", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as handle:
            handle.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_dataset(data: TransferDataset, path: str,
                 schema: ColumnSchema | None = None) -> None:
    """Write the dataset in single-file layout (value-exact floats)."""
    schema = schema or ColumnSchema()
    lines = []
    header = [schema.population_column, schema.response_column, *data.columns]
    lines.append(",".join(header))
    for i in range(data.n_source):
        cells = ["source", _FLOAT_FMT % data.source_y[i]]
        cells.extend(_FLOAT_FMT % v for v in data.source_x[i])
        lines.append(",".join(cells))
    for i in range(data.n_target):
        cells = ["target", ""]
        cells.extend(_FLOAT_FMT % v for v in data.target_x[i])
        lines.append(",".join(cells))
    atomic_write_text(path, "\n".join(lines) + "\n")


def orthogonalize(data: TransferDataset, column: str, against: str) -> TransferDataset:
    """Residualise one covariate on another over the pooled rows.

    Replaces ``column`` by the residual of its pooled least-squares
    regression on (1, ``against``).
    """
    idx = data.column_indices([column, against])
    pooled = np.vstack([data.source_x, data.target_x])
    a = np.column_stack([np.ones(pooled.shape[0]), pooled[:, idx[1]]])
    coef, *_ = np.linalg.lstsq(a, pooled[:, idx[0]], rcond=None)
    sx = data.source_x.copy()
    tx = data.target_x.copy()
    sx[:, idx[0]] -= np.column_stack(
        [np.ones(sx.shape[0]), sx[:, idx[1]]]) @ coef
    tx[:, idx[0]] -= np.column_stack(
        [np.ones(tx.shape[0]), tx[:, idx[1]]]) @ coef
    return TransferDataset(sx, data.source_y, tx, data.columns)


def write_report_csv(rows, path: str, header=("estimator", "parameter",
                                              "metric", "value")) -> None:
    """Long-format report rows to CSV with value-exact floats."""
    lines = [",".join(header)]
    for row in rows:
        cells = []
        for cell in row:
            if isinstance(cell, float):
                cells.append(_FLOAT_FMT % cell)
            else:
                cells.append(str(cell))
        lines.append(",".join(cells))
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_manifest(path: str, payload: dict) -> None:
    """Deterministic JSON manifest (sorted keys, no timestamps)."""
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_manifest(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as handle:
            return json.load(handle)
    except OSError as err:
        raise IngestionError(f"cannot open manifest: {err.strerror}", path=path) from None
    except json.JSONDecodeError as err:
        raise IngestionError(f"invalid manifest JSON: {err}", path=path) from None
