"""Generic conic program container, builder and solver adapters.

Programs use the standard primal form

    minimize    c'x
    subject to  A x + s = b,   s in K = {0}^z x R_+^l x SOC(d_1) x ... x SOC(d_k)

with dual ``z in K*``.  The Lagrangian is ``c'x + z'(Ax - b)``, so for an
equality row ``d(opt)/d b_i = -z_i`` and for an inequality row ``a'x <= b_i``
the multiplier ``z_i >= 0`` is the usual one.

Any backend that honours this contract and returns duals can be plugged in
through ``register_backend``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp


class SolverError(RuntimeError):
    """Solver did not reach an optimal point."""

    def __init__(self, message: str, status: str = "", certificate=None):
        super().__init__(message)
        self.status = status
        self.certificate = certificate


class InfeasibleError(SolverError):
    pass


class UnboundedError(SolverError):
    pass


class IterationLimitError(SolverError):
    pass


class NumericalError(SolverError):
    pass


ZERO, NONNEG, SOC = "zero", "nonneg", "soc"


@dataclass
class ConicProgram:
    c: np.ndarray
    A: sp.csc_matrix
    b: np.ndarray
    n_zero: int
    n_nonneg: int
    soc_dims: list

    @property
    def n_vars(self) -> int:
        return self.A.shape[1]

    @property
    def n_rows(self) -> int:
        return self.A.shape[0]


class ProgramBuilder:
    """Incremental assembly of a ConicProgram from row blocks.

    Rows are allocated per cone kind and renumbered on ``build`` so that zero
    rows come first, then nonnegative rows, then second-order cones.  Row
    handles returned by the ``*_rows`` methods are numpy arrays of *global*
    row indices valid after ``build`` (``finalize_rows`` maps them).
    """

    def __init__(self):
        self.n_vars = 0
        self._c = []
        self._counts = {ZERO: 0, NONNEG: 0, SOC: 0}
        self._trip = {ZERO: ([], [], []), NONNEG: ([], [], []), SOC: ([], [], [])}
        self._rhs = {ZERO: ([], []), NONNEG: ([], []), SOC: ([], [])}
        self._soc_dims = []
        self.var_blocks = {}

    def variables(self, name: str, shape) -> np.ndarray:
        size = int(np.prod(shape)) if np.ndim(shape) else int(shape)
        idx = np.arange(self.n_vars, self.n_vars + size).reshape(shape)
        self.n_vars += size
        self._c.append(np.zeros(size))
        self.var_blocks[name] = idx
        return idx

    def cost(self, cols, coefs):
        cols, coefs = np.broadcast_arrays(np.asarray(cols), np.asarray(coefs, dtype=float))
        c = np.concatenate(self._c) if len(self._c) > 1 else self._c[0]
        np.add.at(c, cols.ravel(), coefs.ravel())
        self._c = [c]

    def _rows(self, kind, shape):
        size = int(np.prod(shape))
        start = self._counts[kind]
        self._counts[kind] += size
        return (kind, np.arange(start, start + size).reshape(shape))

    def eq_rows(self, shape):
        return self._rows(ZERO, shape)

    def le_rows(self, shape):
        return self._rows(NONNEG, shape)

    def soc_rows(self, count: int, dim: int):
        handle = self._rows(SOC, (count, dim))
        self._soc_dims.extend([dim] * count)
        return handle

    def coef(self, handle, cols, vals, select=...):
        """Add ``vals * x[cols]`` to the left-hand side ``A x`` of rows."""
        kind, rows = handle
        rows = rows[select]
        rows, cols, vals = np.broadcast_arrays(rows, np.asarray(cols), np.asarray(vals, dtype=float))
        r, c, v = self._trip[kind]
        r.append(rows.ravel())
        c.append(cols.ravel())
        v.append(vals.ravel())

    def rhs(self, handle, vals, select=...):
        kind, rows = handle
        rows = rows[select]
        rows, vals = np.broadcast_arrays(rows, np.asarray(vals, dtype=float))
        self._rhs[kind][0].append(rows.ravel())
        self._rhs[kind][1].append(vals.ravel())

    def cone_expr(self, handle, cols, vals, select=...):
        """Add ``vals * x[cols]`` to the cone member ``s = b - A x``."""
        self.coef(handle, cols, -np.asarray(vals, dtype=float), select)

    def offsets(self):
        return {ZERO: 0, NONNEG: self._counts[ZERO], SOC: self._counts[ZERO] + self._counts[NONNEG]}

    def global_rows(self, handle) -> np.ndarray:
        kind, rows = handle
        return rows + self.offsets()[kind]

    def build(self) -> ConicProgram:
        off = self.offsets()
        m = sum(self._counts.values())
        rows, cols, vals = [], [], []
        b = np.zeros(m)
        for kind in (ZERO, NONNEG, SOC):
            r, c, v = self._trip[kind]
            if r:
                rows.append(np.concatenate(r) + off[kind])
                cols.append(np.concatenate(c))
                vals.append(np.concatenate(v))
            rr, vv = self._rhs[kind]
            if rr:
                np.add.at(b, np.concatenate(rr) + off[kind], np.concatenate(vv))
        if rows:
            A = sp.csc_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(m, self.n_vars))
        else:
            A = sp.csc_matrix((m, self.n_vars))
        A.sum_duplicates()
        A.eliminate_zeros()
        c = np.concatenate(self._c) if self._c else np.zeros(0)
        return ConicProgram(c, A, b, self._counts[ZERO], self._counts[NONNEG], list(self._soc_dims))


@dataclass
class SolverConfig:
    backend: str = "clarabel"
    tol_gap_abs: float = 1e-9
    tol_gap_rel: float = 1e-9
    tol_feas: float = 1e-9
    max_iter: int = 200
    verbose: bool = False
    time_limit: float = float("inf")


@dataclass
class ConicResult:
    x: np.ndarray
    z: np.ndarray
    s: np.ndarray
    objective: float
    status: str
    iterations: int
    solve_time: float
    solver: str
    residuals: dict = field(default_factory=dict)


def kkt_residuals(prog: ConicProgram, x, s, z) -> dict:
    """Primal, dual, gap and cone-membership residuals (infinity norms)."""
    r_prim = prog.A @ x + s - prog.b
    r_dual = prog.c + prog.A.T @ z
    gap = float(prog.c @ x + prog.b @ z)
    lo = prog.n_zero
    hi = lo + prog.n_nonneg
    cone_viol = 0.0
    if prog.n_nonneg:
        cone_viol = max(cone_viol, float(-min(s[lo:hi].min(), z[lo:hi].min(), 0.0)))
    compl = float(np.abs(s[lo:hi] * z[lo:hi]).sum())
    k = hi
    for d in prog.soc_dims:
        for v in (s[k:k + d], z[k:k + d]):
            cone_viol = max(cone_viol, float(np.linalg.norm(v[1:]) - v[0]))
        compl += abs(float(s[k:k + d] @ z[k:k + d]))
        k += d
    return {
        "primal": float(np.abs(r_prim).max(initial=0.0)),
        "dual": float(np.abs(r_dual).max(initial=0.0)),
        "gap": abs(gap),
        "cone": max(cone_viol, 0.0),
        "complementarity": compl,
    }


def _solve_clarabel(prog: ConicProgram, cfg: SolverConfig) -> ConicResult:
    import clarabel

    n = prog.n_vars
    P = sp.csc_matrix((n, n))
    cones = []
    if prog.n_zero:
        cones.append(clarabel.ZeroConeT(prog.n_zero))
    if prog.n_nonneg:
        cones.append(clarabel.NonnegativeConeT(prog.n_nonneg))
    cones.extend(clarabel.SecondOrderConeT(d) for d in prog.soc_dims)
    settings = clarabel.DefaultSettings()
    settings.verbose = cfg.verbose
    settings.tol_gap_abs = cfg.tol_gap_abs
    settings.tol_gap_rel = cfg.tol_gap_rel
    settings.tol_feas = cfg.tol_feas
    settings.max_iter = cfg.max_iter
    settings.time_limit = cfg.time_limit
    t0 = time.perf_counter()
    solver = clarabel.DefaultSolver(P, prog.c, prog.A, prog.b, cones, settings)
    sol = solver.solve()
    elapsed = time.perf_counter() - t0
    status = str(sol.status).split(".")[-1]
    x, z, s = np.asarray(sol.x), np.asarray(sol.z), np.asarray(sol.s)
    if status in ("PrimalInfeasible", "AlmostPrimalInfeasible"):
        raise InfeasibleError(f"conic program is infeasible ({status})", status, certificate=z)
    if status in ("DualInfeasible", "AlmostDualInfeasible"):
        raise UnboundedError(f"conic program is unbounded ({status})", status, certificate=x)
    if status in ("MaxIterations", "MaxTime"):
        raise IterationLimitError(f"solver stopped at {status} after {sol.iterations} iterations", status)
    if status not in ("Solved", "AlmostSolved"):
        raise NumericalError(f"solver failed with status {status}", status)
    return ConicResult(x, z, s, float(prog.c @ x), status, int(sol.iterations), elapsed, f"clarabel {clarabel.__version__}",
                       kkt_residuals(prog, x, s, z))


def _solve_scs(prog: ConicProgram, cfg: SolverConfig) -> ConicResult:
    import scs

    data = {"A": prog.A, "b": prog.b, "c": prog.c}
    cone = {"z": prog.n_zero, "l": prog.n_nonneg, "q": list(prog.soc_dims)}
    t0 = time.perf_counter()
    solver = scs.SCS(data, cone, eps_abs=cfg.tol_feas, eps_rel=cfg.tol_gap_rel, max_iters=max(cfg.max_iter, 100_000),
                     verbose=cfg.verbose)
    sol = solver.solve()
    elapsed = time.perf_counter() - t0
    status = sol["info"]["status"]
    x, y, s = sol["x"], sol["y"], sol["s"]
    if status.startswith("infeasible"):
        raise InfeasibleError("conic program is infeasible", status, certificate=y)
    if status.startswith("unbounded"):
        raise UnboundedError("conic program is unbounded", status, certificate=x)
    if status != "solved":
        raise IterationLimitError(f"SCS stopped with status {status}", status)
    res = kkt_residuals(prog, x, s, y)
    # SCS stops on residuals of its rescaled problem; recheck in the original units
    limit = 10.0 * (cfg.tol_feas + cfg.tol_gap_rel * max(1.0, float(np.abs(prog.b).max(initial=0.0))))
    if res["primal"] > limit:
        raise IterationLimitError(f"SCS point has primal residual {res['primal']:.3g} > {limit:.3g}", status)
    return ConicResult(x, y, s, float(prog.c @ x), status, int(sol["info"]["iter"]), elapsed, f"scs {scs.__version__}", res)


_BACKENDS = {"clarabel": _solve_clarabel, "scs": _solve_scs}


def register_backend(name: str, fn) -> None:
    _BACKENDS[name] = fn


def solve_conic(prog: ConicProgram, cfg: SolverConfig | None = None) -> ConicResult:
    cfg = cfg or SolverConfig()
    try:
        fn = _BACKENDS[cfg.backend]
    except KeyError:
        raise ValueError(f"unknown solver backend {cfg.backend!r}; available: {sorted(_BACKENDS)}") from None
    return fn(prog, cfg)


def write_cbf(prog: ConicProgram, path) -> None:
    """Write the program in Conic Benchmark Format (CBF v3).

    CBF constraints read ``A' x + b' in K``; with ``s = b - A x`` that is
    ``A' = -A`` and ``b' = b``.
    """
    lines = ["VER", "3", "", "OBJSENSE", "MIN", "", "VAR", f"{prog.n_vars} 1", f"F {prog.n_vars}", ""]
    blocks = []
    if prog.n_zero:
        blocks.append(f"L= {prog.n_zero}")
    if prog.n_nonneg:
        blocks.append(f"L+ {prog.n_nonneg}")
    blocks.extend(f"Q {d}" for d in prog.soc_dims)
    lines += ["CON", f"{prog.n_rows} {len(blocks)}", *blocks, ""]
    nz = np.flatnonzero(prog.c)
    lines += ["OBJACOORD", str(len(nz)), *(f"{i} {prog.c[i]:.17g}" for i in nz), ""]
    coo = prog.A.tocoo()
    lines += ["ACOORD", str(coo.nnz), *(f"{r} {c} {-v:.17g}" for r, c, v in zip(coo.row, coo.col, coo.data)), ""]
    nzb = np.flatnonzero(prog.b)
    lines += ["BCOORD", str(len(nzb)), *(f"{i} {prog.b[i]:.17g}" for i in nzb), ""]
    Path(path).write_text("\n".join(lines))
