import csv
import os
from typing import Any, Dict, Iterable, List, Sequence, Type

from pydantic import BaseModel

from .config import InputError
from .models.report import StepReport


def format_nos(input_: float) -> int | float:
    """Removes ``.0`` float values.

    Args:
        input_: Strings or integers with ``.0`` at the end.

    Returns:
        int | float:
        Int if found, else returns the received float value.
    """
    return int(input_) if isinstance(input_, float) and input_.is_integer() else input_


def format_value(value: Any) -> str:
    """Renders a cell so that identical runs produce identical bytes."""
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        return str(format_nos(float(f"{value:.12g}")))
    if value is None:
        return ""
    return str(value)


def ensure_parent(filepath: str) -> None:
    """Creates the directory that will hold ``filepath``."""
    if directory := os.path.dirname(filepath):
        os.makedirs(directory, exist_ok=True)


def write_table(
    filepath: str, columns: Sequence[str], rows: Iterable[Dict[str, Any]]
) -> str:
    """Writes ``rows`` as CSV with a fixed column order.

    Args:
        filepath: Destination file.
        columns: Header, also the order of the cells.
        rows: Mappings keyed by column name.

    Returns:
        str:
        The filepath that was written.
    """
    ensure_parent(filepath)
    with open(filepath, "w", newline="") as file:
        writer = csv.writer(file, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([format_value(row[column]) for column in columns])
    return filepath


def write_models(
    filepath: str, model: Type[BaseModel], records: Sequence[BaseModel]
) -> str:
    """CSV of pydantic records, one column per field."""
    columns = list(model.model_fields)
    return write_table(filepath, columns, (record.model_dump() for record in records))


def emit_csv(reports: Sequence[StepReport], filepath: str) -> str:
    """Per-step CSV in ``StepReport`` column order; header only when empty."""
    return write_table(filepath, StepReport.columns(), (r.row() for r in reports))


def emit_summary(summary: BaseModel | Dict[str, Any], filepath: str) -> str:
    """Writes ``key=value`` lines."""
    data = summary.model_dump() if isinstance(summary, BaseModel) else summary
    ensure_parent(filepath)
    with open(filepath, "w") as file:
        for key, value in data.items():
            file.write(f"{key}={format_value(value)}\n")
    return filepath


def parse_list(value: str, cast: Type = str) -> List[Any]:
    """Splits a comma separated CLI value."""
    try:
        return [cast(part.strip()) for part in value.split(",") if part.strip()]
    except ValueError as error:
        raise InputError(f"cannot read {value!r} as a list of {cast.__name__}") from error
