"""Deterministic synthetic radial feeders with daily profiles and DER sites.

A medium-voltage random recursive tree carries about 36 % service transformers,
each feeding one low-voltage customer node.  The first two service
transformers are 30 kVA "focus" units (one residential, one commercial) that
host the EV/PV scenarios and are the monitored transformers.
"""

from __future__ import annotations

import math

import numpy as np

from .thermal import suggested_hourly_cost

HOURS = 24
S_BASE = 1000.0
MV_KV = 12.47
LV_KV = 0.24
TX_SIZES = (25.0, 50.0, 75.0, 100.0, 167.0)
FOCUS_KVA = 30.0
FOCUS_COST = 0.2  # $/h

EV_DEFAULTS = {"battery_kWh": 24.0, "rate_kW": 3.3, "charger_kVA": 6.6}
PV_UNIT_KVA = 10.0


def _r(values, nd=6):
    return [round(float(v), nd) for v in values]


def lmp_series() -> list:
    """Flat overnight, rising through the working day, peaking 19-21 h ($/kWh)."""
    day = [0.050 + 0.005 * k for k in range(8)]  # 9..16
    lmp = [0.030] * 6 + [0.035, 0.040, 0.045] + day + [0.088, 0.090, 0.110, 0.120, 0.110, 0.030, 0.030]
    assert len(lmp) == HOURS
    return _r(lmp)


def ambient_series() -> list:
    t = np.arange(HOURS)
    return _r(26.0 + 6.0 * np.cos(2 * np.pi * (t - 15) / HOURS), 3)


def irradiation_series() -> list:
    t = np.arange(HOURS) + 0.5
    rho = np.where((t > 6) & (t < 19), np.sin(np.pi * (t - 6) / 13), 0.0)
    return _r(np.clip(rho, 0, 1), 4)


def residential_profile() -> list:
    """Per-customer shape normalised to a 1 kW peak (evening)."""
    t = np.arange(HOURS)
    shape = 0.35 + 0.15 * np.exp(-0.5 * ((t - 7.5) / 1.5) ** 2) + 0.65 * np.exp(-0.5 * ((t - 19.5) / 2.0) ** 2)
    return _r(shape / shape.max(), 4)


def commercial_profile() -> list:
    t = np.arange(HOURS)
    shape = 0.25 + 0.75 * np.exp(-0.5 * ((t - 13.0) / 3.2) ** 2)
    return _r(shape / shape.max(), 4)


def _ampacity(kva, kv, factor=2.0):
    return round(factor * kva / (math.sqrt(3) * kv) + 1.0, 3)


def _two_bus():
    return {
        "name": "two_bus", "horizon": HOURS, "dt_h": 1.0, "v0": 1.0,
        "bases": {"s_base_kVA": S_BASE, "levels": {"mv": 10.0}},
        "nodes": [
            {"id": 0, "parent": None, "level": "mv"},
            {"id": 1, "parent": 0, "level": "mv", "vmin": 0.9, "vmax": 1.1, "load_profile": "residential",
             "pf": 0.95, "scale": 500.0},
        ],
        "lines": [{"from": 0, "to": 1, "r_ohm": 1.0, "x_ohm": 1.0, "ampacity_A": 200.0}],
        "transformers": [],
        "profiles": {"residential": residential_profile()},
        "series": {"lmp": lmp_series(), "ambient": ambient_series(), "irradiation": irradiation_series()},
    }


def synth_feeder(nodes: int, seed: int = 0) -> dict:
    """Return a feeder document (see ``netmodel.to_per_unit`` for the schema)."""
    if nodes < 2:
        raise ValueError("a feeder needs at least 2 nodes")
    if nodes == 2:
        return _two_bus()
    rng = np.random.default_rng(seed)
    n_tx = max(1, round(0.36 * (nodes - 1)))
    if nodes >= 4:
        n_tx = max(n_tx, 2)
    n_mv = nodes - 1 - n_tx
    if n_mv < 1:
        n_mv, n_tx = 1, nodes - 2

    parent = {0: None}
    seg_km = {}
    for i in range(1, n_mv + 1):
        parent[i] = int(rng.integers(0, i))
        seg_km[i] = float(rng.uniform(0.2, 0.8))
    lv = list(range(n_mv + 1, nodes))
    mv_ids = np.arange(1, n_mv + 1)
    hosts = rng.choice(mv_ids, size=len(lv), replace=len(lv) > n_mv)

    node_docs = [{"id": 0, "parent": None, "level": "mv"}]
    for i in range(1, n_mv + 1):
        node_docs.append({"id": i, "parent": parent[i], "level": "mv", "vmin": 0.95, "vmax": 1.05})
    tx_docs, lv_lines = [], []
    kva_at = {}
    sites = []
    for idx, (j, host) in enumerate(zip(lv, hosts)):
        parent[j] = int(host)
        if idx == 0:
            kind, rated, peak = "residential", FOCUS_KVA, 0.75 * FOCUS_KVA
        elif idx == 1:
            kind, rated, peak = "commercial", FOCUS_KVA, 0.75 * FOCUS_KVA
        else:
            kind = "residential" if rng.random() < 0.7 else "commercial"
            rated = float(rng.choice(TX_SIZES))
            peak = round(float(rng.uniform(0.55, 0.8)) * rated, 2)
        pf = 0.95 if kind == "residential" else 0.85
        kva_at[j] = peak / pf
        name = f"T{j}"
        focus = idx < 2
        tx_docs.append({
            "name": name, "rated_kVA": rated, "R": 5.0, "dtheta_TO_R": 55.0, "dtheta_H_R": 25.0,
            "tau_TO_h": 3.0, "k11": 1.0, "n": 0.8, "m": 0.8,
            "cost_per_hour": FOCUS_COST if focus else round(suggested_hourly_cost(300.0 * rated), 6),
            "monitor": focus,
        })
        node_docs.append({"id": j, "parent": int(host), "level": "lv", "vmin": 0.95, "vmax": 1.05,
                          "load_profile": kind, "pf": pf, "scale": round(peak, 3)})
        # ~2 % resistance, ~4 % reactance on the transformer's own base
        zb_own = LV_KV**2 * 1000.0 / rated
        lv_lines.append({"from": int(host), "to": j, "r_ohm": round(0.02 * zb_own, 6),
                         "x_ohm": round(0.04 * zb_own, 6), "ampacity_A": _ampacity(rated, LV_KV),
                         "transformer": name})
        if focus:
            arrive, depart, need = (19, 7, 18.0) if kind == "residential" else (9, 17, 12.0)
            sites.append({"kind": kind, "node": j, "transformer": name, "arrive_h": arrive, "depart_h": depart,
                          "need_kWh": need})

    # downstream apparent power for MV ampacities
    down = {i: 0.0 for i in range(nodes)}
    for j, kva in kva_at.items():
        i = j
        while i is not None:
            down[i] += kva
            i = parent[i]
    mv_lines = []
    for i in range(1, n_mv + 1):
        km = seg_km[i]
        mv_lines.append({"from": parent[i], "to": i, "r_ohm": round(0.3 * km, 6), "x_ohm": round(0.4 * km, 6),
                         "ampacity_A": _ampacity(max(down[i], 100.0), MV_KV, factor=3.0)})
    return {
        "name": f"synth_{nodes}_{seed}", "horizon": HOURS, "dt_h": 1.0, "v0": 1.03,
        "bases": {"s_base_kVA": S_BASE, "levels": {"mv": MV_KV, "lv": LV_KV}},
        "nodes": node_docs,
        "lines": mv_lines + lv_lines,
        "transformers": tx_docs,
        "profiles": {"residential": residential_profile(), "commercial": commercial_profile()},
        "series": {"lmp": lmp_series(), "ambient": ambient_series(), "irradiation": irradiation_series()},
        "sites": {"ev": dict(EV_DEFAULTS), "pv_unit_kVA": PV_UNIT_KVA, "locations": sites},
    }
