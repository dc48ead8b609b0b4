"""Utility functions for cfpoison."""

import hashlib
import logging
import math
from pathlib import Path
from typing import Any, Optional

import numpy as np
from rich.console import Console
from rich.logging import RichHandler

console = Console()
err_console = Console(stderr=True)

FLOAT_DIGITS = 12


def setup_logging(verbose: bool = False) -> None:
    """Route library logging through rich on stderr"""
    level = logging.DEBUG if verbose else logging.INFO
    handler = RichHandler(console=err_console, show_path=False, markup=False)
    root = logging.getLogger("cfpoison")
    root.handlers[:] = [handler]
    root.setLevel(level)
    root.propagate = False


def rng_for(seed: int, *keys: int) -> np.random.Generator:
    """Counter-based generator keyed by a seed and a purpose path.

    The same (seed, keys) always yields the same stream, independent of the order in
    which other streams were consumed.
    """
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF, *(int(k) & 0xFFFFFFFFFFFFFFFF for k in keys)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))


def derive_seed(seed: int, *keys: int) -> int:
    """Derive a 63-bit child seed from a seed and a purpose path"""
    return int(rng_for(seed, *keys).integers(0, 2**63 - 1))


def to_jsonable(value: Any, digits: Optional[int] = FLOAT_DIGITS) -> Any:
    """Convert numpy/dataclass-free structures into JSON-safe python values.

    Floats are rounded to ``digits`` significant digits (``None`` keeps full precision),
    NaN becomes ``None`` and infinities become ``"+inf"``/``"-inf"``.
    """
    if isinstance(value, dict):
        return {str(k): to_jsonable(v, digits) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v, digits) for v in value]
    if isinstance(value, np.ndarray):
        return [to_jsonable(v, digits) for v in value.tolist()]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        f = float(value)
        if math.isnan(f):
            return None
        if math.isinf(f):
            return "+inf" if f > 0 else "-inf"
        if digits is None:
            return f
        return float(f"{f:.{digits}g}")
    if isinstance(value, Path):
        return str(value)
    return value


def from_json_float(value: Any) -> float:
    """Inverse of the float encoding used by :func:`to_jsonable`"""
    if value is None:
        return math.nan
    if value == "+inf":
        return math.inf
    if value == "-inf":
        return -math.inf
    return float(value)


def sha256_file(path: Path) -> str:
    """Content hash of a file"""
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def parse_list(value: Optional[str], cast=str) -> Optional[list]:
    """Parse a comma-separated flag value"""
    if value is None:
        return None
    return [cast(v.strip()) for v in value.split(",") if v.strip()]


def print_header(action: str, subject: str, items: Optional[list[str]] = None, color: str = "cyan"):
    """Print a styled header for an action"""
    if items:
        item_list = ", ".join(items) if len(items) <= 3 else f"{len(items)} items"
        console.print(f"\n[bold {color}]▶ {action.capitalize()}[/] [{color}]{subject}[/]: {item_list}")
    else:
        console.print(f"\n[bold {color}]▶ {action.capitalize()}[/] [{color}]{subject}[/]")


def print_success(message: str = "Done"):
    """Print a success message"""
    console.print(f"[green]✓[/] {message}")


def print_error(kind: str, message: str):
    """Print a single-line machine-parsable error on stderr"""
    flat = " ".join(str(message).split())
    err_console.print(f"error[{kind}]: {flat}", markup=False, highlight=False, soft_wrap=True)
