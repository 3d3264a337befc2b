"""
Plot-data export from a results directory.

Every figure is written as plain CSV. Line plots use a tidy layout with
one value per row; crosstalk matrices are dense grids labeled by mode.
Output depends only on the stored results, so repeated exports are
byte-identical.
"""

from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Optional

import numpy as np

from .experiment import ResultSet
from .metrics import MetricsReport

FIGURES = ("gmi_vs_power", "mdl_vs_power", "xt_matrix")
TIDY_COLUMNS = ("power_dbm", "mode", "k_rx", "capture", "metric", "value")


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _write_rows(path: Path, header, rows) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    path.write_text(buf.getvalue())
    return path


def _ordered(rs: ResultSet) -> list[MetricsReport]:
    """Per-capture reports followed by the average for each (power, k)."""
    out = []
    for p in rs.spec.sweep:
        for k in rs.spec.subsets:
            out += [r for r in rs.reports if r.power_dbm == p and r.k_rx == k]
            avg = rs.average(p, k)
            if avg is not None:
                out.append(avg)
    return out


def gmi_rows(rs: ResultSet) -> list[tuple]:
    return [
        (r.power_dbm, mode, r.k_rx, r.capture, "gmi", float(g))
        for r in _ordered(rs)
        for mode, g in zip(r.tx_modes, r.gmi_per_mode)
    ]


def mdl_rows(rs: ResultSet) -> list[tuple]:
    return [(r.power_dbm, "all", r.k_rx, r.capture, "mdl_db", r.mdl_db) for r in _ordered(rs)]


def pick_xt_point(rs: ResultSet, power_dbm: Optional[float] = None, k_rx: Optional[int] = None) -> MetricsReport:
    """Averaged report used for the crosstalk grids.

    Defaults to the largest receiver subset at the launch power with the
    highest mean GMI, where the taps are best converged.
    """
    k = max(rs.spec.subsets) if k_rx is None else k_rx
    cands = [a for a in rs.averages if a.k_rx == k and a.crosstalk is not None]
    if power_dbm is not None:
        cands = [a for a in cands if np.isclose(a.power_dbm, power_dbm)]
    if not cands:
        raise ValueError(f"no crosstalk data for k={k}" + ("" if power_dbm is None else f" at {power_dbm} dBm"))
    return max(cands, key=lambda a: (float(np.mean(a.gmi_per_mode)), -a.power_dbm))


def _grid(path: Path, m: np.ndarray, rows, cols, corner: str) -> Path:
    return _write_rows(path, [corner, *cols], ([r, *map(float, line)] for r, line in zip(rows, m)))


def export_plotdata(rs: ResultSet, figure: str, out_dir, *, power_dbm: Optional[float] = None,
                    k_rx: Optional[int] = None) -> list[Path]:
    """Write the CSV files of ``figure`` into ``out_dir``.

    Parameters
    ----------
    figure : {"gmi_vs_power", "mdl_vs_power", "xt_matrix"}
    power_dbm, k_rx : optional
        Operating point for ``xt_matrix``; see :func:`pick_xt_point`.

    Returns
    -------
    list of Path
        Files written.

    Raises
    ------
    ValueError
        Unknown figure id, or no data for the requested point.
    """
    if figure not in FIGURES:
        raise ValueError(f"unknown figure {figure!r}; choose from {list(FIGURES)}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if figure == "gmi_vs_power":
        return [_write_rows(out / "gmi_vs_power.csv", TIDY_COLUMNS, gmi_rows(rs))]
    if figure == "mdl_vs_power":
        return [_write_rows(out / "mdl_vs_power.csv", TIDY_COLUMNS, mdl_rows(rs))]
    rep = pick_xt_point(rs, power_dbm, k_rx)
    x = rep.crosstalk
    return [
        _grid(out / "xt_spatial.csv", x.spatial_db, x.rx_modes, x.tx_modes, "rx\\tx"),
        _grid(out / "xt_group.csv", x.group_db, [f"G{g}" for g in x.rx_groups],
              [f"G{g}" for g in x.tx_groups], "rx\\tx"),
    ]


__all__ = ["FIGURES", "TIDY_COLUMNS", "export_plotdata", "gmi_rows", "mdl_rows", "pick_xt_point"]
