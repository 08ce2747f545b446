"""
Cross-cutting helpers: the exception hierarchy, deterministic rounding,
canonical JSON and dataclass overrides.
"""
from __future__ import annotations

import dataclasses
import decimal
import hashlib
import json
import logging
from pathlib import Path
from typing import Any

logger = logging.getLogger(__name__)


class RaymapError(Exception):
    """Base class for every error raised on purpose by raymap."""
    exit_code = 2


class InvalidArgument(RaymapError, ValueError):
    """An argument violates a documented precondition."""
    exit_code = 2


class NotFound(RaymapError, KeyError):
    """A referenced site or record does not exist."""
    exit_code = 2

    def __str__(self):
        # KeyError quotes its argument, we want the plain message
        return str(self.args[0]) if self.args else ''


class InvalidState(RaymapError, RuntimeError):
    """An operation was requested before its prerequisites exist."""
    exit_code = 4


class DatasetParseError(RaymapError, ValueError):
    """
    A CSV artifact could not be parsed.

    Parameters
    ----------
    message : str
        What went wrong.
    path : str or Path, optional
        The file being read.
    lineno : int, optional
        1-based line number of the offending row, header included.
    """
    exit_code = 2

    def __init__(self, message: str, path: str | Path | None = None,
                 lineno: int | None = None):
        self.path = path
        self.lineno = lineno
        where = ''
        if path is not None:
            where = f'{path}'
        if lineno is not None:
            where = f'{where}:{lineno}' if where else f'line {lineno}'
        super().__init__(f'{where}: {message}' if where else message)


class CheckpointError(RaymapError, ValueError):
    """A checkpoint document is malformed or has an unknown version."""
    exit_code = 2


def exit_code_for(exc: BaseException) -> int:
    """
    Map an exception to the command line exit code.

    Returns
    -------
    int
        2 for validation problems, 3 for I/O, 4 for invalid state.
    """
    if isinstance(exc, RaymapError):
        return exc.exit_code
    if isinstance(exc, OSError):
        return 3
    if isinstance(exc, (ValueError, KeyError)):
        return 2
    return 1


def round_half_up(value: float, fraction: float = 1.0) -> int:
    """
    Round ``fraction * value`` to the nearest integer, halves going up.

    The product is formed in decimal arithmetic from the shortest repr of
    both operands so that ``round_half_up(950, 0.15)`` is 143 on every
    platform, which binary floating point does not guarantee.
    """
    product = (decimal.Decimal(repr(float(value)))
               * decimal.Decimal(repr(float(fraction))))
    return int(product.quantize(decimal.Decimal(1),
                                rounding=decimal.ROUND_HALF_UP))


def canonical_json(document: Any) -> str:
    """Serialize with sorted keys and no incidental whitespace variation."""
    return json.dumps(document, sort_keys=True, indent=1)


def write_json(path: str | Path, document: Any) -> Path:
    path = Path(path)
    path.write_text(canonical_json(document) + '\n')
    return path


def read_json(path: str | Path) -> Any:
    with open(path) as fd:
        return json.load(fd)


def config_hash(document: Any) -> str:
    """Short sha256 of the canonical JSON form of ``document``."""
    digest = hashlib.sha256(
        json.dumps(document, sort_keys=True).encode('utf-8'))
    return digest.hexdigest()[:16]


def parse_override(text: str) -> tuple[str, Any]:
    """
    Split a ``key=value`` override.

    The value is read as a JSON literal when possible (numbers, booleans,
    lists) and kept as a plain string otherwise.
    """
    if '=' not in text:
        raise InvalidArgument(f'Override {text!r} is not of the form key=value')
    key, raw = text.split('=', 1)
    key = key.strip()
    if not key:
        raise InvalidArgument(f'Override {text!r} has an empty key')
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def apply_overrides(configs: list, overrides: dict[str, Any]) -> list:
    """
    Apply ``overrides`` to whichever dataclass in ``configs`` owns each key.

    Parameters
    ----------
    configs : list of dataclass instances
    overrides : dict
        Field name to new value.

    Returns
    -------
    list
        New dataclass instances, same order as ``configs``.
    """
    remaining = dict(overrides)
    updated = []
    for config in configs:
        names = {field.name for field in dataclasses.fields(config)}
        mine = {key: remaining.pop(key) for key in list(remaining)
                if key in names}
        if mine:
            logger.debug('Overriding %s with %s', type(config).__name__, mine)
            config = dataclasses.replace(config, **mine)
        updated.append(config)
    if remaining:
        raise InvalidArgument(
            f'Unknown configuration keys: {", ".join(sorted(remaining))}')
    return updated
