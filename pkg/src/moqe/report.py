"""Line-oriented text and TSV rendering shared by all reports."""

from __future__ import annotations

from typing import Mapping, Sequence, TextIO


def write_rows(rows: Sequence[Mapping[str, object]], out: TextIO, fmt: str = "text", title: str | None = None) -> None:
    """Emit rows either as ``key=value`` lines or as TSV with a header.

    TSV columns follow the key order of the first row.
    """
    if fmt == "tsv":
        if not rows:
            return
        cols = list(rows[0])
        out.write("\t".join(cols) + "\n")
        for r in rows:
            out.write("\t".join(str(r.get(c, "")) for c in cols) + "\n")
        return
    if fmt != "text":
        raise ValueError(f"unknown format {fmt!r}")
    if title:
        out.write(f"# {title}\n")
    for r in rows:
        out.write(" ".join(f"{k}={v}" for k, v in r.items()) + "\n")
