"""CSV writers and the matching loaders used by the CLI and the tests."""

from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np

from .pricing import COMPONENTS, DlmpDecomposition
from .schedules import CellResult, ComparisonRow


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "nan" if math.isnan(v) else f"{float(v):.10g}"
    return str(v)


def write_csv(path, header, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _parse(s: str):
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        return s


def read_csv(path) -> dict:
    """Column name -> list of parsed values (int, float or str)."""
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    return {h: [_parse(r[i]) for r in body] for i, h in enumerate(header)}


def write_table(rows, path) -> None:
    write_csv(path, ComparisonRow.COLUMNS, (r.as_list() for r in rows))


def read_table(path) -> list:
    cols = read_csv(path)
    n = len(cols["option"])
    out = []
    for i in range(n):
        vals = {c: cols[c][i] for c in ComparisonRow.COLUMNS}
        for c in ("dP", "dQ", "dTransformer", "dTotal", "LoL"):
            vals[c] = float(vals[c])
        vals["scenario"] = str(vals["scenario"])
        vals["status"] = str(vals["status"])
        out.append(ComparisonRow(**vals))
    return out


def hourly_columns(cell: CellResult, feeder) -> tuple:
    """Header and rows of the per-cell hourly file (schedules, prices, thermal states)."""
    T = feeder.horizon
    ex, sched = cell.expost, cell.schedule
    cols = {"hour": list(range(T)), "lmp": feeder.lmp, "p0": ex.p0, "q0": ex.q0}
    sol = cell.solution
    for i in range(sched.pv_p.shape[0]):
        cols[f"pv{i}_p"] = sched.pv_p[i]
        cols[f"pv{i}_q"] = sched.pv_q[i]
    for i in range(sched.ev_p.shape[0]):
        cols[f"ev{i}_p"] = sched.ev_p[i]
        cols[f"ev{i}_q"] = sched.ev_q[i]
    for name in feeder.monitored:
        tr = ex.trajectories.get(name)
        if tr is None:
            continue
        k = [kk for kk, n in feeder.transformer_lines() if n == name][0]
        cols[f"{name}_load_ratio_sq"] = ex.l[k] / feeder.transformers[name].rated_current_sq
        cols[f"{name}_top_oil"] = tr.top_oil[1:]
        cols[f"{name}_hot_spot"] = tr.hot_spot
        cols[f"{name}_aging"] = tr.aging_factor
        if sol is not None:
            node = k + 1
            cols[f"dlmp_p_node{node}"] = sol.lam_p[node]
            cols[f"dlmp_q_node{node}"] = sol.lam_q[node]
    header = list(cols)
    rows = [[cols[h][t] for h in header] for t in range(T)]
    return header, rows


def write_hourly(cell: CellResult, feeder, path) -> None:
    header, rows = hourly_columns(cell, feeder)
    write_csv(path, header, rows)


DLMP_COLUMNS = ("node", "hour", "kind", "dlmp", *COMPONENTS, "closure_error", "untrusted")


def write_decomposition(dec: DlmpDecomposition, path) -> None:
    n, T = dec.lam_p.shape
    rows = []
    for kind, comps, lam, clos in (("P", dec.p, dec.lam_p, dec.closure_p), ("Q", dec.q, dec.lam_q, dec.closure_q)):
        for j in range(n):
            for t in range(T):
                rows.append([j, t, kind, lam[j, t], *(comps[c][j, t] for c in COMPONENTS), clos[j, t],
                             bool(dec.untrusted[j, t])])
    write_csv(path, DLMP_COLUMNS, rows)


def read_decomposition(path) -> dict:
    """Returns {'P': {column: (N+1, T) array}, 'Q': {...}}."""
    cols = read_csv(path)
    node = np.asarray(cols["node"], dtype=int)
    hour = np.asarray(cols["hour"], dtype=int)
    kind = np.asarray(cols["kind"])
    n, T = node.max() + 1, hour.max() + 1
    out = {}
    for k in ("P", "Q"):
        m = kind == k
        d = {}
        for c in ("dlmp", *COMPONENTS, "closure_error", "untrusted"):
            arr = np.zeros((n, T))
            arr[node[m], hour[m]] = np.asarray(cols[c], dtype=float)[m]
            d[c] = arr
        out[k] = d
    return out
