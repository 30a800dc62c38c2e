"""Byte-stable CSV writing.

Floats are rendered with repr (shortest round-trip form), rows end with
a bare newline regardless of platform, and an optional comment line
(the resolved-config hash, normally) precedes the header. Identical
inputs therefore produce identical bytes, which the determinism checks
rely on.
"""
from __future__ import annotations

from typing import Iterable, Sequence

__all__ = ["format_cell", "write_csv"]


def format_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path: str, header: Sequence[str], rows: Iterable[Sequence],
              comment: str | None = None) -> None:
    lines = []
    if comment is not None:
        lines.append(f"# {comment}")
    lines.append(",".join(header))
    for row in rows:
        lines.append(",".join(format_cell(v) for v in row))
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")
