"""
MLaaS federation engine.

Useful functions.

Created by Matua Doc.
Created on 2026-10-19.
"""

import json
from pathlib import Path
from typing import Any, Iterable, Iterator

import numpy as np

from main_model import ConfigError, TraceFormatError


def format_cost(cost: float, unit: str = "mUSD", prefix: bool = False) -> str:
    """
    Format a cost as text.

    The result has a unit and 3 decimal places, the precision costs are
    reported with in the comparison tables.

    Parameters:
    - cost (float): the cost to format, in units of 10^-3 USD.
    - unit (str): the unit label to use in the result.
    - prefix (bool): whether the unit goes at the front (True)/end (False).

    Returns a formatted string containing the cost.
    """
    if prefix:
        return f"{unit} {cost:.3f}"
    return f"{cost:.3f} {unit}"


def format_action(action: np.ndarray) -> str:
    """Return a binary action as a bit string, provider 0 first."""
    return "".join(str(int(bit)) for bit in action)


def action_from_index(index: int, n_providers: int) -> np.ndarray:
    """
    Return the action whose bit string is the binary form of index.

    Provider 0 is the most significant bit, so index 1 selects only the
    last provider.
    """
    bits = [(index >> (n_providers - 1 - i)) & 1 for i in range(n_providers)]
    return np.array(bits, dtype=np.int64)


def read_lines(path: Path) -> list[str]:
    """
    Read the non-empty lines of a text file.

    Raises ConfigError if the file does not exist.
    """
    try:
        with open(path, encoding="utf-8") as text_file:
            lines = text_file.read().splitlines()
    except FileNotFoundError:
        raise ConfigError(f"No such file: {path}")

    return [line for line in lines if line.strip()]


def read_json(path: Path) -> Any:
    """Load a JSON document, raising ConfigError if it is missing."""
    try:
        with open(path, encoding="utf-8") as json_file:
            return json.load(json_file)
    except FileNotFoundError:
        raise ConfigError(f"No such file: {path}")
    except json.decoder.JSONDecodeError as error:
        raise TraceFormatError(f"Unable to parse JSON in {path}: {error}")


def iter_json_lines(path: Path) -> Iterator[dict[str, Any]]:
    """Yield one JSON object per non-empty line of a file."""
    for number, line in enumerate(read_lines(path), start=1):
        try:
            yield json.loads(line)
        except json.decoder.JSONDecodeError as error:
            raise TraceFormatError(f"{path}:{number}: {error}")


def write_json_lines(path: Path, objects: Iterable[dict[str, Any]]) -> None:
    """Write objects one per line with a stable layout."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as out_file:
        for item in objects:
            out_file.write(json.dumps(item, separators=(",", ":")))
            out_file.write("\n")


def write_json(path: Path, document: Any) -> None:
    """Write an indented JSON document."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as out_file:
        json.dump(document, out_file, indent=2)
        out_file.write("\n")
