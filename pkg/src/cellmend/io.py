"""Reading and writing material records.

Dataset files are JSON lines, one material per line:

    {"rho": [[r11, r12, r13], ...], "x": [[f, f, f], ...],
     "z": [int, ...], "id": "..."}

``rho`` is row-major in Angstrom (rows are the generators), ``x`` holds
fractional coordinates in [0, 1).  Readers reject NaN/Inf and
out-of-range coordinates; repair-by-wrapping is opt-in (the CLI exposes
it as ``--wrap``).
"""

from __future__ import annotations

import json
from typing import Iterable, List

import numpy as np

from .core import MAX_ATOMIC_NUMBER, DomainError, Material, wrap_frac


def material_to_dict(m: Material) -> dict:
    return {
        "rho": m.rho.tolist(),
        "x": m.x.tolist(),
        "z": m.z.tolist(),
        "id": m.ident,
    }


def _check_finite(values, what: str):
    flat = np.asarray(values, dtype=np.float64).ravel()
    if not np.all(np.isfinite(flat)):
        raise DomainError(f"{what} contains NaN or Inf")


def dict_to_material(rec: dict, wrap: bool = False) -> Material:
    """Validate and build a material from one JSON record.

    Fractional coordinates outside [0, 1) are an error unless ``wrap``
    is set, in which case they are wrapped back onto the torus.
    """
    try:
        rho = np.asarray(rec["rho"], dtype=np.float64)
        x = np.asarray(rec["x"], dtype=np.float64)
        z = rec["z"]
    except (KeyError, TypeError, ValueError) as exc:
        raise DomainError(f"malformed material record: {exc}") from exc
    _check_finite(rho, "rho")
    _check_finite(x, "x")
    zs = np.asarray(z)
    if zs.size == 0 or np.any(zs != np.floor(zs)):
        raise DomainError("z must be a non-empty list of integers")
    zs = zs.astype(np.int64)
    if np.any(zs < 1) or np.any(zs > MAX_ATOMIC_NUMBER):
        raise DomainError(
            f"atomic numbers must lie in [1, {MAX_ATOMIC_NUMBER}]"
        )
    if wrap:
        x = wrap_frac(x)
    elif x.size and (np.any(x < 0.0) or np.any(x >= 1.0)):
        raise DomainError(
            "fractional coordinates outside [0, 1); pass wrap to repair"
        )
    return Material(rho, x, zs, str(rec.get("id", "")))


def write_materials(path: str, materials: Iterable[Material]):
    with open(path, "w", encoding="ascii") as fh:
        for m in materials:
            fh.write(json.dumps(material_to_dict(m)) + "\n")


def read_materials(path: str, wrap: bool = False) -> List[Material]:
    out = []
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line, parse_constant=_reject_constant)
            except ValueError as exc:
                raise DomainError(f"{path}:{lineno}: {exc}") from exc
            try:
                out.append(dict_to_material(rec, wrap=wrap))
            except DomainError as exc:
                raise DomainError(f"{path}:{lineno}: {exc}") from exc
    if not out:
        raise DomainError(f"{path}: no material records")
    return out


def _reject_constant(name: str):
    raise DomainError(f"non-finite JSON constant {name!r}")


def write_graph_dump(path: str, graph) -> None:
    """Debug dump of a graph's canonical edge/triplet lists."""
    with open(path, "w", encoding="ascii") as fh:
        json.dump(graph.to_json_dict(), fh)
