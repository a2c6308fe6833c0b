"""Plain-text matrix bundles and atomic file writes.

Bundle format::

    # mmcctl-bundle 1
    # key: value            (optional metadata lines)
    [Kx] 6 6
    <6 rows of 6 numbers, %.17g, space separated>

    [Kw] 6 8
    ...

Sections appear in the order written; every value round-trips exactly.
"""

from __future__ import annotations

import os
import tempfile
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

MAGIC = "# mmcctl-bundle 1"


def atomic_write_text(path, text: str) -> None:
    """Write ``text`` to a temporary file next to ``path`` and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        # mkstemp creates 0600; use the mode a plain open() would give
        mask = os.umask(0)
        os.umask(mask)
        os.chmod(tmp, 0o666 & ~mask)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def format_bundle(sections: Dict[str, np.ndarray], meta: Dict[str, str] = None) -> str:
    lines = [MAGIC]
    for k, v in (meta or {}).items():
        lines.append(f"# {k}: {v}")
    for name, M in sections.items():
        if any(c.isspace() or c in "[]" for c in name):
            raise ValueError(f"invalid section name {name!r}")
        M = np.atleast_2d(np.asarray(M, dtype=float))
        lines.append(f"[{name}] {M.shape[0]} {M.shape[1]}")
        lines.extend(" ".join(f"{x:.17g}" for x in row) for row in M)
        lines.append("")
    return "\n".join(lines) + "\n"


def write_bundle(path, sections: Dict[str, np.ndarray], meta: Dict[str, str] = None) -> None:
    atomic_write_text(path, format_bundle(sections, meta))


def read_bundle(path) -> Tuple[Dict[str, np.ndarray], Dict[str, str]]:
    """Return ``(sections, meta)``."""
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines or lines[0].strip() != MAGIC:
        raise ValueError(f"{path} is not a matrix bundle")
    sections, meta = {}, {}
    i = 1
    while i < len(lines):
        line = lines[i].strip()
        i += 1
        if not line:
            continue
        if line.startswith("#"):
            key, _, value = line[1:].partition(":")
            meta[key.strip()] = value.strip()
            continue
        if not line.startswith("["):
            raise ValueError(f"{path}:{i}: expected a section header")
        name, _, dims = line[1:].partition("]")
        r, c = (int(t) for t in dims.split())
        rows = [np.array(lines[i + k].split(), dtype=float) for k in range(r)]
        if any(row.size != c for row in rows):
            raise ValueError(f"{path}: section {name} has rows of the wrong length")
        sections[name] = np.array(rows).reshape(r, c)
        i += r
    return sections, meta


def controller_sections(controller) -> Dict[str, np.ndarray]:
    out = {"Kx": controller.Kx, "Kw": controller.Kw, "P": controller.P}
    if controller.Pi is not None:
        out["Pi"] = controller.Pi
    if controller.Gamma is not None:
        out["Gamma"] = controller.Gamma
    return out


def write_controller(path, controller, meta=None) -> None:
    write_bundle(path, controller_sections(controller), meta)


def read_controller(path):
    from .synthesis import Controller

    s, meta = read_bundle(path)
    missing = {"Kx", "Kw", "P"} - set(s)
    if missing:
        raise ValueError(f"{path} lacks sections {sorted(missing)}")
    return Controller(s["Kx"], s["Kw"], s["P"], s.get("Pi"), s.get("Gamma"), dict(meta))


def write_certificate(path, result, meta=None) -> None:
    margins = np.array([[v[0], v[1], m] for v, m in result.vertex_margins.items()])
    sections = {"Q_phase": result.Q_phase, "vertex_margins": margins}
    if result.worst_direction is not None:
        sections["worst_direction"] = result.worst_direction[None]
    info = {"feasible": str(result.feasible).lower(), "margin_used": f"{result.margin_used:.17g}"}
    info.update(meta or {})
    write_bundle(path, sections, info)


def matrix_csv(M, columns=None) -> str:
    """Row-major CSV with a header row (``c1, c2, ...`` unless ``columns`` given)."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    columns = list(columns) if columns is not None else [f"c{j + 1}" for j in range(M.shape[1])]
    if len(columns) != M.shape[1]:
        raise ValueError("one column name per matrix column is required")
    lines = [",".join(columns)]
    lines.extend(",".join(f"{x:.17g}" for x in row) for row in M)
    return "\n".join(lines) + "\n"


def dump_model_csv(model, directory) -> None:
    """Write ``A_bar.csv``, ``B_bar.csv``, ``E.csv``, ``C_bar.csv``, ``S.csv``, ``O.csv``."""
    directory = Path(directory)
    for name in ("A_bar", "B_bar", "E", "C_bar", "S", "O"):
        atomic_write_text(directory / f"{name}.csv", matrix_csv(getattr(model, name)))
