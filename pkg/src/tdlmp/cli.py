"""Command-line entry point: ``tdlmp {solve,validate,synth,dlmp}``."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .conic import ConicResult, SolverConfig
from .der import ev_itinerary_check
from .netmodel import FeederError, read_document, to_per_unit
from .opf import EXACTNESS_TOL, OpfOptions, assemble, unpack
from .powerflow import PowerFlowError, base_injections, fixed_injection_powerflow
from .pricing import decompose
from .reporting import write_decomposition, write_hourly, write_table
from .schedules import (ALL_OPTIONS, Option, ScenarioSpec, SiteConfig, build_fleet, comparison_table,
                        uniform_scenario)
from .synth import synth_feeder
from .thermal import periodic_top_oil, simulate_exact

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_VALIDATION = 0, 1, 2, 3

log = logging.getLogger("tdlmp")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    feeder: str | None
    out: Path
    ev_counts: tuple = (0, 3, 6)
    pv_kvas: tuple = (0.0, 30.0, 60.0)
    options: tuple = ALL_OPTIONS
    solver: SolverConfig = field(default_factory=SolverConfig)
    exactness_tol: float = EXACTNESS_TOL
    lol_factor: float = 10.0
    cyclic: bool = True
    seed: int = 0
    synth_nodes: int | None = None
    decompose: bool = True
    figures: bool = False
    export_cbf: bool = False

    def validate(self):
        if self.feeder is None and self.synth_nodes is None:
            raise ConfigError("give a feeder file or --synth NODES")
        for name in ("tol_gap_abs", "tol_gap_rel", "tol_feas"):
            if not getattr(self.solver, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if not self.exactness_tol > 0:
            raise ConfigError("exactness tolerance must be positive")
        if not self.lol_factor > 0:
            raise ConfigError("LoL threshold factor must be positive")
        if any(c < 0 for c in self.ev_counts) or any(k < 0 for k in self.pv_kvas):
            raise ConfigError("EV counts and PV sizes must be nonnegative")


def _csv_list(text, cast):
    try:
        return tuple(cast(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _slug(text: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "-" for c in text)


def _load_doc(cfg: RunConfig) -> dict:
    if cfg.synth_nodes is not None:
        return synth_feeder(cfg.synth_nodes, cfg.seed)
    return read_document(cfg.feeder)


def _versions(backend: str = "clarabel") -> dict:
    import clarabel
    import scipy

    out = {"tdlmp": __version__, "python": platform.python_version(), "numpy": np.__version__,
           "scipy": scipy.__version__, "clarabel": clarabel.__version__}
    if backend == "scs":
        import scs

        out["scs"] = scs.__version__
    return out


def cmd_solve(cfg: RunConfig) -> int:
    cfg.validate()
    doc = _load_doc(cfg)
    feeder = to_per_unit(doc)
    sites = SiteConfig.from_document(doc)
    if not sites.sites and (any(cfg.ev_counts) or any(cfg.pv_kvas)):
        raise ConfigError("feeder has no 'sites' section; only the base case can be run")
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()

    scenarios = []
    for e in cfg.ev_counts:
        for k in cfg.pv_kvas:
            scenarios.append(uniform_scenario(sites, e, k))
    rows, cells, base = comparison_table(scenarios, feeder, sites, cfg.options, cfg.solver, cfg.cyclic,
                                         cfg.lol_factor, cfg.exactness_tol)
    write_table(rows, out / "comparison.csv")
    if base.solved:
        write_hourly(base, feeder, out / "cells" / "base.csv")

    manifest_cells = []
    for cell in cells:
        stem = _slug(f"{cell.spec.label}_{cell.option.value}")
        entry = {"scenario": cell.spec.label, "option": cell.option.value, "status": cell.status,
                 "failures": cell.failures}
        if cell.solved:
            write_hourly(cell, feeder, out / "cells" / f"{stem}.csv")
        sol = cell.solution
        if sol is not None:
            entry.update(solver_status=sol.status, iterations=sol.iterations, objective=round(sol.objective, 8),
                         max_exactness_gap=float(sol.exactness_gap.max(initial=0.0)), degenerate=sol.degenerate)
            sdir = out / "solutions"
            sdir.mkdir(exist_ok=True)
            spec = {"ev_count": {str(k): v for k, v in cell.spec.ev_count.items()},
                    "pv_kva": {str(k): v for k, v in cell.spec.pv_kva.items()}, "option": cell.option.value,
                    "name": cell.spec.label, "cyclic": cfg.cyclic, "exactness_tol": cfg.exactness_tol}
            raw = sol.raw
            np.savez_compressed(sdir / f"{stem}.npz", x=raw.x, z=raw.z, s=raw.s, spec=json.dumps(spec),
                                feeder=json.dumps(doc, sort_keys=True), status=raw.status)
            if cfg.decompose:
                dec = decompose(sol)
                write_decomposition(dec, out / "dlmp" / f"{stem}.csv")
                entry["max_closure_error"] = dec.max_closure_error
                if cfg.figures:
                    from .plotting import dlmp_figure

                    (out / "figures").mkdir(exist_ok=True)
                    node = sites.sites[0].node if sites.sites else feeder.n_nodes - 1
                    dlmp_figure(dec, node, out / "figures" / f"dlmp_{stem}.png")
            if cfg.export_cbf:
                sol.problem.export_cbf(out / "solutions" / f"{stem}.cbf")
        manifest_cells.append(entry)

    if cfg.figures:
        from .plotting import comparison_figure, thermal_figure

        (out / "figures").mkdir(exist_ok=True)
        comparison_figure(rows, out / "figures" / "comparison.png")
        for spec in scenarios:
            group = [c for c in cells if c.spec.label == spec.label]
            for name in feeder.monitored:
                if group:
                    thermal_figure(group, name, out / "figures" / f"hotspot_{_slug(spec.label)}_{name}.png")

    manifest = {
        "versions": _versions(cfg.solver.backend),
        "feeder": cfg.feeder or f"synth:{cfg.synth_nodes}:{cfg.seed}",
        "feeder_sha256": hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest(),
        "solver": asdict(cfg.solver),
        "exactness_tol": cfg.exactness_tol,
        "lol_factor": cfg.lol_factor,
        "cyclic": cfg.cyclic,
        "seed": cfg.seed,
        "base_lol_h": base.expost.lol if base.solved else None,
        "cells": manifest_cells,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True, default=str))
    (out / "run_times.json").write_text(json.dumps({"started": started, "finished": time.time()}, indent=1))
    produced = [c for c in cells if c.solved]
    for r in rows:
        print(",".join(str(v) for v in r.as_list()))
    if cells and not produced:
        return EXIT_SOLVER
    return EXIT_OK


def cmd_validate(path, evs: int = 1) -> tuple[int, list]:
    """Returns (exit code, report lines)."""
    lines, problems = [], 0
    doc = read_document(path)
    try:
        feeder = to_per_unit(doc)
    except FeederError as exc:
        kind = type(exc).__name__.replace("Error", "").lower()
        return EXIT_VALIDATION, [f"FAIL {kind}: {exc}", "FAILED (1 problem)"]
    except ValueError as exc:
        return EXIT_VALIDATION, [f"FAIL parameters: {exc}", "FAILED (1 problem)"]
    lines.append(f"ok   network: {feeder.n_nodes} nodes, {feeder.n_lines} lines, radial, horizon {feeder.horizon}")
    try:
        pf = fixed_injection_powerflow(feeder, *base_injections(feeder))
        vmag = np.sqrt(pf.v)
        lines.append(f"ok   base power flow: {pf.iterations} sweeps, |V| in [{vmag.min():.4f}, {vmag.max():.4f}] pu")
        over = pf.l > feeder.lmax[:, None]
        if over.any():
            lines.append(f"warn base load exceeds ampacity on {int(over.any(axis=1).sum())} lines")
    except PowerFlowError as exc:
        problems += 1
        lines.append(f"FAIL base power flow: {exc}")
        pf = None
    for k, name in feeder.transformer_lines():
        prm = feeder.transformers[name]
        if pf is None:
            continue
        tr = simulate_exact(prm, pf.l[k], feeder.ambient, periodic_top_oil(prm, pf.l[k], feeder.ambient))
        status = "ok  " if tr.hot_spot.max() < 140.0 else "warn"
        lines.append(f"{status} transformer {name}: {prm.rated_kva:g} kVA, base peak hot spot {tr.hot_spot.max():.1f} °C, "
                     f"LoL {tr.loss_of_life:.3g} h/day")
    try:
        sites = SiteConfig.from_document(doc)
    except (KeyError, TypeError, ValueError) as exc:
        problems += 1
        lines.append(f"FAIL sites: {exc}")
        sites = SiteConfig(())
    for s in sites.sites:
        if not 0 <= s.node < feeder.n_nodes:
            problems += 1
            lines.append(f"FAIL site {s.kind}: node {s.node} not in feeder")
            continue
        try:
            fleet = build_fleet(ScenarioSpec({s.node: evs}, {}), feeder, sites)
            issues = [msg for ev in fleet.evs for msg in ev_itinerary_check(ev, feeder.horizon, feeder.dt)]
        except ValueError as exc:
            issues = [str(exc)]
        if issues:
            problems += len(issues)
            lines.extend(f"FAIL itinerary at {s.kind} site (node {s.node}): {m}" for m in issues)
        else:
            lines.append(f"ok   itinerary at {s.kind} site (node {s.node}): {s.need_kwh:g} kWh in "
                         f"{s.arrive_h:g}-{s.depart_h:g} h")
    lines.append("OK" if problems == 0 else f"FAILED ({problems} problem{'s' if problems > 1 else ''})")
    return (EXIT_OK if problems == 0 else EXIT_VALIDATION), lines


def cmd_synth(nodes: int, seed: int, out) -> Path:
    doc = synth_feeder(nodes, seed)
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return out


def load_saved_solution(path):
    """Rebuild an OpfSolution from a saved ``.npz`` (re-assembles the same program)."""
    data = np.load(path, allow_pickle=False)
    spec_doc = json.loads(str(data["spec"]))
    doc = json.loads(str(data["feeder"]))
    feeder = to_per_unit(doc)
    sites = SiteConfig.from_document(doc)
    spec = ScenarioSpec({int(k): v for k, v in spec_doc["ev_count"].items()},
                        {int(k): v for k, v in spec_doc["pv_kva"].items()}, Option(spec_doc["option"]),
                        name=spec_doc["name"])
    fleet = build_fleet(spec, feeder, sites, spec_doc["cyclic"])
    opts = OpfOptions(include_transformer_cost=spec.option is Option.FULL_OPT, cyclic=spec_doc["cyclic"],
                      exactness_tol=spec_doc["exactness_tol"])
    prob = assemble(feeder, fleet, opts)
    x, z, s = data["x"], data["z"], data["s"]
    if len(x) != prob.n_vars:
        raise ConfigError(f"{path}: saved solution does not match the re-assembled problem")
    res = ConicResult(x, z, s, float(prob.program.c @ x), str(data["status"]), 0, 0.0, "saved")
    return unpack(prob, res)


def cmd_dlmp(solution_path, out) -> int:
    sol = load_saved_solution(solution_path)
    dec = decompose(sol)
    write_decomposition(dec, out)
    print(f"wrote {out}: max closure error {dec.max_closure_error:.3g}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tdlmp", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("solve", help="run the scenario x option grid and write tables")
    s.add_argument("feeder", nargs="?", help="feeder JSON file")
    s.add_argument("--synth", type=int, metavar="NODES", help="use a synthetic feeder instead of a file")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", type=Path, default=Path("out"))
    s.add_argument("--evs", type=lambda t: _csv_list(t, int), default=(0, 3, 6), help="EV counts per site")
    s.add_argument("--pv", type=lambda t: _csv_list(t, float), default=(0.0, 30.0, 60.0), help="PV kVA per site")
    s.add_argument("--options", type=lambda t: _csv_list(t, Option), default=ALL_OPTIONS)
    s.add_argument("--no-cyclic", dest="cyclic", action="store_false")
    s.add_argument("--lol-factor", type=float, default=10.0)
    s.add_argument("--tol", type=float, default=1e-9, help="solver gap/feasibility tolerance")
    s.add_argument("--max-iter", type=int, default=200)
    s.add_argument("--backend", choices=("clarabel", "scs"), default="clarabel", help="conic solver")
    s.add_argument("--exactness-tol", type=float, default=EXACTNESS_TOL)
    s.add_argument("--no-decompose", dest="decompose", action="store_false")
    s.add_argument("--figures", action="store_true", help="also render PNG figures")
    s.add_argument("--export-cbf", action="store_true", help="write each conic program in CBF format")

    v = sub.add_parser("validate", help="check a feeder file")
    v.add_argument("feeder")
    v.add_argument("--evs", type=int, default=1, help="EVs per site used for itinerary checks")

    y = sub.add_parser("synth", help="write a synthetic feeder")
    y.add_argument("--nodes", type=int, required=True)
    y.add_argument("--seed", type=int, default=0)
    y.add_argument("--out", type=Path, required=True)

    d = sub.add_parser("dlmp", help="decompose DLMPs of a saved solution")
    d.add_argument("solution", type=Path)
    d.add_argument("--out", type=Path, required=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "solve":
            cfg = RunConfig(
                feeder=args.feeder, out=args.out, ev_counts=args.evs, pv_kvas=args.pv, options=args.options,
                solver=SolverConfig(backend=args.backend, tol_gap_abs=args.tol, tol_gap_rel=args.tol, tol_feas=args.tol,
                                    max_iter=args.max_iter),
                exactness_tol=args.exactness_tol, lol_factor=args.lol_factor, cyclic=args.cyclic, seed=args.seed,
                synth_nodes=args.synth, decompose=args.decompose, figures=args.figures, export_cbf=args.export_cbf,
            )
            return cmd_solve(cfg)
        if args.command == "validate":
            code, lines = cmd_validate(args.feeder, args.evs)
            print("\n".join(lines))
            return code
        if args.command == "synth":
            if args.nodes < 2:
                raise ConfigError("--nodes must be at least 2")
            print(cmd_synth(args.nodes, args.seed, args.out))
            return EXIT_OK
        if args.command == "dlmp":
            return cmd_dlmp(args.solution, args.out)
    except (ConfigError, FeederError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
