"""Convergence tables (CSV/JSON) and VTU field output."""
from __future__ import annotations

import csv
import json
import math
import xml.etree.ElementTree as ET
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .adapt import IterationRecord
from .mesh import QuadMesh

CSV_COLUMNS = ("iter", "dofs_primal", "dofs_dual", "J_uh", "err_exact", "eta", "eta_max",
               "ieff", "cells_refined", "cells_coarsened", "seconds")
_FLOAT_COLUMNS = {"J_uh", "err_exact", "eta", "eta_max", "ieff", "seconds"}
_INT_COLUMNS = {"iter", "dofs_primal", "dofs_dual", "cells_refined", "cells_coarsened"}
_ATTR = {"iter": "iteration"}

VTK_QUAD = 9
VTK_BIQUADRATIC_QUAD = 28


class ReportError(OSError):
    """I/O failure while writing or reading a report file."""


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return str(int(value))
    return "%.12e" % float(value)


def convergence_rates(dofs, errors):
    """Rates between consecutive rows: ``(rate in dofs, rate in h)``.

    The dof rate is ``-log(e1/e0) / log(N1/N0)``; in 2D the h rate is twice
    that.  Rows without a nonzero error on both ends give ``None``.
    """
    out = [(None, None)]
    for i in range(1, len(dofs)):
        e0, e1 = errors[i - 1], errors[i]
        if not e0 or not e1 or dofs[i] == dofs[i - 1]:
            out.append((None, None))
            continue
        r = -math.log(abs(e1) / abs(e0)) / math.log(dofs[i] / dofs[i - 1])
        out.append((r, 2.0 * r))
    return out


@dataclass
class RunReport:
    config: dict
    records: list = field(default_factory=list)
    reason: Optional[str] = None

    def rates(self):
        return convergence_rates([r.dofs_primal for r in self.records],
                                 [r.err_exact for r in self.records])

    def to_dict(self) -> dict:
        rows = []
        for rec, (rd, rh) in zip(self.records, self.rates()):
            row = asdict(rec)
            row["rate_dofs"] = rd
            row["rate_h"] = rh
            rows.append(row)
        return {"config": self.config, "reason": self.reason, "iterations": rows}


def write_csv(report, path, timing: bool = False) -> Path:
    """One row per iteration; ``seconds`` stays empty unless ``timing``."""
    records = report.records if isinstance(report, RunReport) else list(report)
    path = Path(path)
    try:
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_COLUMNS)
            for rec in records:
                row = []
                for col in CSV_COLUMNS:
                    val = getattr(rec, _ATTR.get(col, col))
                    if col == "seconds" and not timing:
                        val = None
                    row.append(_fmt(val))
                w.writerow(row)
    except OSError as exc:
        raise ReportError(f"cannot write CSV {path}: {exc}") from exc
    return path


def read_csv(path) -> list:
    """Parse a file written by :func:`write_csv` back into records."""
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise ReportError(f"cannot read CSV {path}: {exc}") from exc
    out = []
    for row in rows:
        kw = {}
        for col in CSV_COLUMNS:
            s = row[col]
            if s == "":
                val = None
            elif col in _INT_COLUMNS:
                val = int(s)
            else:
                val = float(s)
            kw[_ATTR.get(col, col)] = val
        kw["seconds"] = kw["seconds"] or 0.0
        kw["cells_refined"] = kw["cells_refined"] or 0
        kw["cells_coarsened"] = kw["cells_coarsened"] or 0
        out.append(IterationRecord(**kw))
    return out


def _json_default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def write_json(report: RunReport, path, timing: bool = False) -> Path:
    path = Path(path)
    data = report.to_dict()
    if not timing:
        for row in data["iterations"]:
            row["seconds"] = None
    try:
        path.write_text(json.dumps(data, indent=2, default=_json_default) + "\n")
    except OSError as exc:
        raise ReportError(f"cannot write JSON {path}: {exc}") from exc
    return path


# reference node layouts in VTK ordering: corners, then edge midpoints, then centre
_CORNERS = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
_BIQUADRATIC = np.vstack([_CORNERS, [[0.5, 0.0], [1.0, 0.5], [0.5, 1.0], [0.0, 0.5]],
                          [[0.5, 0.5]]])


def _data_array(parent, name, values, ncomp=1, dtype="Float64"):
    el = ET.SubElement(parent, "DataArray", type=dtype, Name=name, format="ascii")
    if ncomp > 1:
        el.set("NumberOfComponents", str(ncomp))
    values = np.asarray(values).ravel()
    if dtype.startswith("Float"):
        el.text = " ".join("%.16e" % v for v in values)
    else:
        el.text = " ".join(str(int(v)) for v in values)
    return el


def write_vtu(mesh: QuadMesh, fields: dict, path, quadratic: Optional[bool] = None) -> Path:
    """ASCII VTU with one output cell per active cell.

    ``fields`` maps names either to ``(space, coeffs)`` pairs, written as
    point data, or to arrays with one value per active cell, written as cell
    data.  Every cell gets its own points, so hanging nodes need no special
    treatment.  With ``quadratic`` the cells are 9-node biquadratic quads
    sampled on a once-subdivided grid; by default this is used whenever a
    point field has degree >= 2.
    """
    point_fields = {k: v for k, v in fields.items() if isinstance(v, tuple)}
    cell_fields = {k: np.asarray(v, dtype=float) for k, v in fields.items()
                   if not isinstance(v, tuple)}
    ncell = len(mesh)
    for name, arr in cell_fields.items():
        if arr.shape != (ncell,):
            raise ValueError(f"cell field {name!r} has shape {arr.shape}, expected ({ncell},)")
    if quadratic is None:
        quadratic = any(sp.degree >= 2 for sp, _ in point_fields.values())
    ref, ctype = (_BIQUADRATIC, VTK_BIQUADRATIC_QUAD) if quadratic else (_CORNERS, VTK_QUAD)
    npc = len(ref)
    x0, y0, hx, hy = mesh.geometry
    X = x0[:, None] + hx[:, None] * ref[None, :, 0]
    Y = y0[:, None] + hy[:, None] * ref[None, :, 1]
    pts = np.stack([X.ravel(), Y.ravel(), np.zeros(X.size)], axis=1)
    conn = np.arange(ncell * npc)

    root = ET.Element("VTKFile", type="UnstructuredGrid", version="0.1",
                      byte_order="LittleEndian")
    grid = ET.SubElement(root, "UnstructuredGrid")
    piece = ET.SubElement(grid, "Piece", NumberOfPoints=str(len(pts)),
                          NumberOfCells=str(ncell))
    pd = ET.SubElement(piece, "PointData")
    cells = np.arange(ncell)
    for name, (space, coeffs) in sorted(point_fields.items()):
        if space.mesh is not mesh and not np.array_equal(space.mesh.keys, mesh.keys):
            raise ValueError(f"point field {name!r} lives on a different mesh")
        vals = space.evaluate(np.asarray(coeffs, dtype=float), cells, ref, derivs=0)["v"]
        _data_array(pd, name, vals)
    cd = ET.SubElement(piece, "CellData")
    for name, arr in sorted(cell_fields.items()):
        _data_array(cd, name, arr)
    pe = ET.SubElement(piece, "Points")
    _data_array(pe, "Points", pts, ncomp=3)
    ce = ET.SubElement(piece, "Cells")
    _data_array(ce, "connectivity", conn, dtype="Int64")
    _data_array(ce, "offsets", npc * np.arange(1, ncell + 1), dtype="Int64")
    _data_array(ce, "types", np.full(ncell, ctype), dtype="UInt8")

    path = Path(path)
    try:
        ET.ElementTree(root).write(path, encoding="utf-8", xml_declaration=True)
    except OSError as exc:
        raise ReportError(f"cannot write VTU {path}: {exc}") from exc
    return path


def read_vtu(path) -> dict:
    """Minimal reader for files from :func:`write_vtu` (used in checks)."""
    path = Path(path)
    try:
        root = ET.parse(path).getroot()
    except (OSError, ET.ParseError) as exc:
        raise ReportError(f"cannot read VTU {path}: {exc}") from exc
    piece = root.find("UnstructuredGrid/Piece")

    def arrays(tag):
        out = {}
        for el in piece.find(tag).findall("DataArray"):
            dtype = float if el.get("type").startswith("Float") else np.int64
            vals = np.array((el.text or "").split(), dtype=dtype)
            ncomp = int(el.get("NumberOfComponents", "1"))
            out[el.get("Name")] = vals.reshape(-1, ncomp) if ncomp > 1 else vals
        return out

    return {
        "n_points": int(piece.get("NumberOfPoints")),
        "n_cells": int(piece.get("NumberOfCells")),
        "points": arrays("Points")["Points"],
        "cells": arrays("Cells"),
        "point_data": arrays("PointData"),
        "cell_data": arrays("CellData"),
    }
