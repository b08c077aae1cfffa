"""
JSON Lines helpers shared by the data pipeline, decoder traces and the CLI.
"""

import json
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, Tuple, Union

from src.core.errors import RecordSchemaError


def iter_jsonl(path: Union[str, Path]) -> Iterator[Tuple[int, Dict[str, Any]]]:
    """
    Yield (line_number, object) for every non-blank line of a JSONL file.

    Raises:
        RecordSchemaError: a line is not a JSON object
    """
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise RecordSchemaError(f"invalid JSON: {e.msg}", field="<line>", line_number=line_number) from None
            if not isinstance(obj, dict):
                raise RecordSchemaError("each line must hold a JSON object", field="<line>", line_number=line_number)
            yield line_number, obj


def write_jsonl(path: Union[str, Path], rows: Iterable[Dict[str, Any]]) -> Path:
    """Write one JSON object per line, creating parent directories."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, ensure_ascii=False) + "\n")
    return path
