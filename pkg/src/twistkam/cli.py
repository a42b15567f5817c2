"""Configuration-driven experiment runner.

    twistkam run CONFIG.yaml [--out DIR] [--figures]
    twistkam check CONFIG.yaml

Each run writes its data tables (CSV or JSON), optional PNG figures and a
``report.json`` manifest with a SHA-256 per file.  Exit status: 0 success,
2 invalid configuration, 3 solver non-convergence, 4 a requested
assertion failed.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import sys
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import action, dynamics, invariant_graphs, weakkam
from .config import ExperimentConfig, load_config, validate
from .errors import (AmbiguousPartner, AuditFailed, GraphRejected, GridMismatch, InvalidParameters,
                     NoConvergence, NotInAubry, NotLagrangian, NotTransverse, SaddleWarning, UnknownFamily)
from .genfun import audit, make_family
from .grids import TorusGrid

EXIT_OK, EXIT_INVALID, EXIT_SOLVER, EXIT_ASSERT = 0, 2, 3, 4


@dataclass
class Check:
    name: str
    passed: bool
    measured: object
    bound: object = None
    asserted: bool = False


@dataclass
class RunReport:
    command: dict
    seed: int | None
    checks: list = field(default_factory=list)
    files: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    wall_time: float = 0.0
    exit_code: int = EXIT_OK
    error: str | None = None

    def as_dict(self) -> dict:
        out = asdict(self)
        return _jsonable(out)


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(t) for k, t in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(t) for t in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, (np.bool_, bool)):
        return bool(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else None
    if isinstance(v, Path):
        return str(v)
    return v


class Run:
    """Output sink for one command: tables, figures and checks."""

    def __init__(self, cfg: ExperimentConfig, report: RunReport):
        self.cfg = cfg
        self.report = report
        self.dir = cfg.output_dir
        self.dir.mkdir(parents=True, exist_ok=True)

    def _register(self, path: Path):
        digest = hashlib.sha256(path.read_bytes()).hexdigest()
        self.report.files.append({"path": path.name, "sha256": digest})

    def table(self, name: str, header: list, rows) -> Path:
        rows = [list(r) for r in rows]
        if self.cfg.output_format == "csv":
            path = self.dir / f"{name}.csv"
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([_cell(v) for v in r])
            path.write_text(buf.getvalue())
        else:
            path = self.dir / f"{name}.json"
            path.write_text(json.dumps({"header": header, "rows": _jsonable(rows)}, indent=1) + "\n")
        self._register(path)
        return path

    def figure(self, name: str, draw, *args, **kwargs):
        if not self.cfg.figures:
            return None
        path = draw(self.dir / f"{name}.png", *args, **kwargs)
        self._register(path)
        return path

    def check(self, name, measured, bound=None, ok=None, asserted=False):
        if ok is None:
            ok = True
        self.report.checks.append(Check(name, bool(ok), measured, bound, asserted))

    def assert_below(self, name, measured, bound):
        if bound is not None:
            self.check(name, measured, bound, bool(measured <= bound), asserted=True)

    def assert_above(self, name, measured, bound):
        if bound is not None:
            self.check(name, measured, bound, bool(measured >= bound), asserted=True)


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return int(v)
    return v


def _cols(prefix, d):
    return [f"{prefix}_{i + 1}" for i in range(d)]


def _grid(S, res) -> TorusGrid:
    return TorusGrid.make(S.dim, res)


def _r(S, r):
    return np.zeros(S.dim) if r is None else np.asarray(r, dtype=float)


def _min_opts(P, seed):
    return {"n_starts": P["n_starts"], "scale": P["scale"], "max_iter": P["max_iter"], "seed": seed}


def _figures():
    from . import figures
    return figures


# ---------------------------------------------------------------------------
# commands


def cmd_audit(S, P, run: Run, seed):
    rep = audit(S, P["n_samples"], seed)
    run.report.summary.update(rep.as_dict())
    run.check("twist_positive", rep.twist_lower, 0.0, rep.twist_lower > 0)
    run.check("coercive", rep.gamma, 0.0, rep.gamma > 0)
    run.assert_above("twist_constant", rep.twist_lower, P["assert_twist_above"])
    # F(L(x, y)) against L(phi(x, y)) on random pairs
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 1, (P["n_samples"], S.dim))
    y = x + rng.uniform(-1.5, 1.5, x.shape)
    lhs = dynamics.twist_map(S, dynamics.lagrangian_map(S, x, y), 1).as_array()
    rhs = dynamics.lagrangian_map(S, *dynamics.phi(S, x, y)).as_array()
    conj = float(np.max(np.abs(lhs - rhs)))
    run.report.summary["conjugacy_residual"] = conj
    run.assert_below("conjugacy", conj, P["assert_conjugacy_below"])
    run.table("audit", ["quantity", "value"], sorted({**rep.as_dict(), "conjugacy_residual": conj}.items()))


def cmd_orbit(S, P, run: Run, seed):
    pt = dynamics.PhasePoint(P["x"], P["p"])
    traj = dynamics.orbit(S, pt, P["n"])
    d = S.dim
    sym = dynamics.symplectic_residual(dynamics.tangent(S, pt))
    run.report.summary.update({"final": traj[-1].tolist(), "symplectic_residual": sym})
    run.check("symplectic_residual", sym, 1e-8, sym <= 1e-8)
    run.assert_below("symplectic_residual_bound", sym, P["assert_symplectic_below"])
    run.table("orbit", ["k"] + _cols("x", d) + _cols("p", d), [(k, *row) for k, row in enumerate(traj)])
    run.figure("orbit", _figures().scatter, np.mod(traj[:, 0], 1.0), traj[:, d], "x_1 mod 1", "p_1",
               c=np.arange(len(traj)))


def cmd_conjugate_scan(S, P, run: Run, seed):
    region = dynamics.PhaseRegion(P["x_res"], P["p_lo"], P["p_hi"], P["p_res"])
    rep = dynamics.conjugate_scan(S, region, P["n_max"], P["threshold"], tuple(P["directions"]))
    loc = rep.location
    run.report.summary.update({
        "degenerate": rep.degenerate, "first_degenerate_n": rep.first_degenerate_n,
        "location": None if loc is None else {"x": loc.x.tolist(), "p": loc.p.tolist()},
        "certificate": rep.certificate,
    })
    if P["assert_degenerate"] is not None:
        run.check("degenerate", rep.degenerate, P["assert_degenerate"], rep.degenerate == P["assert_degenerate"],
                  asserted=True)
    d = S.dim
    run.table("conjugate_scan", ["n", "min_singular_value", "min_angle"],
              zip(rep.ns.tolist(), rep.min_singular_value, rep.min_angle))
    run.table("conjugate_cells", _cols("x", d) + _cols("p", d) + ["n", "min_singular_value", "degenerate"],
              rep.rows)
    pos = rep.ns > 0
    if pos.any():
        run.figure("conjugate_scan", _figures().line, rep.ns[pos], {"forward": rep.min_angle[pos]}, "n",
                   "min singular value (normalized)", logy=True, marker=".")


def cmd_green(S, P, run: Run, seed):
    pt = dynamics.PhasePoint(P["x"], P["p"])
    rows, gaps = [], []
    for n in P["n_iter"]:
        g = dynamics.green_slope(S, pt, n)
        rows.append((n, *g.slope.ravel(), g.gap, g.asymmetry))
        gaps.append(g.gap)
    d = S.dim
    head = ["n_iter"] + [f"G_{i + 1}{j + 1}" for i in range(d) for j in range(d)] + ["gap", "asymmetry"]
    run.table("green", head, rows)
    last = gaps[-1]
    run.report.summary.update({"final_slope": rows[-1][1:1 + d * d], "final_gap": last})
    if P["assert_gap_below"] is not None:
        run.assert_below("green_gap", last if math.isfinite(last) else math.inf, P["assert_gap_below"])


def cmd_minimize(S, P, run: Run, seed):
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", SaddleWarning)
        res = action.minimize_endpoints(S, P["x"], P["y"], P["N"], n_starts=P["n_starts"], scale=P["scale"],
                                        seed=seed, max_iter=P["max_iter"])
    run.report.summary.update({
        "value": res.value, "grad_norm": res.grad_norm, "newton_iters": res.newton_iters,
        "multistart_count": res.multistart_count, "is_minimum": res.is_minimum,
        "min_hessian_eig": res.min_hessian_eig, "saddle_detected": any(
            issubclass(w.category, SaddleWarning) for w in caught),
    })
    run.check("gradient", res.grad_norm, 1e-9 * (1 + abs(res.value)), res.grad_norm <= 1e-9 * (1 + abs(res.value)))
    d = S.dim
    run.table("segment", ["k"] + _cols("x", d), [(k, *pt) for k, pt in enumerate(res.segment.points)])


def cmd_f_profile(S, P, run: Run, seed):
    grid = _grid(S, P["grid"])
    prof = action.f_profile(S, P["N"], _r(S, P["r"]), grid, **_min_opts(P, seed))
    run.report.summary.update(prof.summary())
    run.assert_above("gap_above", prof.gap, P["assert_gap_above"])
    run.assert_below("gap_below", prof.gap, P["assert_gap_below"])
    d = S.dim
    run.table("f_profile", _cols("x", d) + ["f"], [(*x, v) for x, v in zip(grid.points, prof.values)])
    if d == 1:
        run.figure("f_profile", _figures().line, grid.points[:, 0], {"f": prof.values}, "x", "A_N(x, x + r)")
    elif d == 2:
        run.figure("f_profile", _figures().heatmap, prof.values.reshape(grid.res), "A_N(x, x + r)")


def cmd_periodic(S, P, run: Run, seed):
    opts = _min_opts(P, seed)
    p, resid = invariant_graphs.periodic_fiber(S, P["x"], P["N"], P["r"], **opts)
    trans = invariant_graphs.translation_residual(S, P["x"], P["N"], P["r"], **opts)
    run.report.summary.update({"p": p.tolist(), "residual": resid, "translation_residual": trans})
    run.assert_below("residual", resid, P["assert_residual_below"])
    d = S.dim
    run.table("periodic", _cols("x", d) + _cols("p", d) + ["residual", "translation_residual"],
              [(*np.atleast_1d(P["x"]), *p, resid, trans)])


def _graph_outputs(run: Run, S, g, name):
    d = S.dim
    run.table(name, _cols("x", d) + _cols("p", d) + ["residual", "status"], g.rows())
    if d == 1:
        run.figure(name, _figures().line, g.grid.points[:, 0], {"p": g.p[:, 0]}, "x", "p")
    elif d == 2:
        run.figure(name, _figures().heatmap, np.linalg.norm(g.p, axis=1).reshape(g.grid.res), "|p|")


def cmd_graph(S, P, run: Run, seed):
    g = invariant_graphs.build_graph(S, P["N"], P["r"], _grid(S, P["grid"]), **_min_opts(P, seed))
    run.report.summary.update({"meta": g.meta, "audits": g.audits})
    run.assert_below("max_residual", g.audits["max_residual"], P["assert_residual_below"])
    run.assert_below("asymmetry", g.audits["asymmetry"], P["assert_asymmetry_below"])
    _graph_outputs(run, S, g, "graph")


def cmd_alpha(S, P, run: Run, seed):
    probe = None if P["probe_grid"] is None else _grid(S, P["probe_grid"])
    prof = weakkam.alpha_profile(S, P["c_grid"], P["N_max"], P["R_max"], probe, seed=seed or 0)
    run.report.summary.update({"convexity_violation": prof.convexity_violation,
                               "superlinearity": prof.superlinearity, "truncation": prof.truncation,
                               "allowance": 1.0 / P["N_max"]})
    run.assert_below("convexity", prof.convexity_violation, P["assert_convexity_below"])
    d = S.dim
    run.table("alpha", _cols("c", d) + ["alpha", "N_at", "r_at"], prof.rows())
    if d == 1:
        order = np.argsort(prof.classes[:, 0])
        run.figure("alpha", _figures().line, prof.classes[order, 0], {"alpha": prof.alpha[order]}, "c", "alpha(c)",
                   marker="o")


def cmd_mane(S, P, run: Run, seed):
    opts = _min_opts(P, seed)
    grid = _grid(S, P["grid"])
    s = weakkam.stilde(S, P["c"], P["N_max"], P["R_max"], **opts)
    pts = grid.points
    pi = weakkam.mane_matrix(S, P["c"], pts, P["N_max"], P["R_max"], s.value, **opts)
    summary = {"stilde": s.value, "allowance": s.allowance, "truncation": s.truncation}
    if P["n_triples"]:
        rng = np.random.default_rng(seed)
        idx = rng.integers(0, len(pts), size=(P["n_triples"], 3))
        aud = weakkam.potential_audits(S, P["c"], pts[idx], P["N_max"], P["R_max"], s.value, **opts)
        summary["potential_audits"] = aud.as_dict()
        run.assert_above("triangle", aud.triangle_violation, P["assert_triangle_above"])
    run.report.summary.update(summary)
    d = S.dim
    k = len(pts)
    run.table("mane", _cols("x", d) + _cols("y", d) + ["pi"],
              [(*pts[i], *pts[j], pi[i, j]) for i in range(k) for j in range(k)])


def cmd_aubry(S, P, run: Run, seed):
    opts = _min_opts(P, seed)
    g = weakkam.dual_aubry_graph(S, P["c"], _grid(S, P["grid"]), P["N_max"], P["R_max"],
                                 indicator_tol=P["indicator_tol"], **opts)
    run.report.summary.update({"meta": g.meta, "audits": g.audits})
    run.assert_above("present_fraction", g.audits["present_fraction"], P["assert_present_above"])
    _graph_outputs(run, S, g, "dual_aubry")


def cmd_foliation(S, P, run: Run, seed):
    f = invariant_graphs.foliation_section(S, P["x"], P["c_grid"], P["N_max"], P["R_max"], **_min_opts(P, seed))
    run.report.summary.update({"x": f.x.tolist(), "audits": f.audits, "status": f.status})
    if P["assert_monotone"] and S.dim == 1:
        v = f.audits.get("monotonicity_violation", 0.0)
        run.check("monotone", v, 1e-9, v <= 1e-9, asserted=True)
    d = S.dim
    run.table("foliation", _cols("c", d) + _cols("p", d) + ["indicator"], f.rows())
    if d == 1:
        run.figure("foliation", _figures().line, f.classes[:, 0], {"p": f.p[:, 0]}, "c", "F_x(c)", marker="o")


def cmd_crosscheck(S, P, run: Run, seed):
    opts = _min_opts(P, seed)
    grid = _grid(S, P["grid"])
    g = invariant_graphs.build_graph(S, P["N"], P["r"], grid, **opts)
    c = invariant_graphs.graph_cohomology(g)
    a = weakkam.dual_aubry_graph(S, c, grid, P["N_max"], P["R_max"], **opts)
    sup, inf = invariant_graphs.compare_graphs(g, a)
    shared = int(np.sum(g.present & a.present))
    run.check("shared_cells", shared, 1, shared >= 1, asserted=True)
    run.report.summary.update({"c_bar": c.c.tolist(), "match_sup": sup, "match_inf": inf,
                               "allowance": 1.0 / P["N_max"], "graph_audits": g.audits,
                               "aubry_audits": a.audits})
    run.assert_below("match", sup, P["assert_match_below"])
    _graph_outputs(run, S, g, "graph")
    _graph_outputs(run, S, a, "dual_aubry")


COMMANDS = {
    "audit": cmd_audit, "orbit": cmd_orbit, "conjugate-scan": cmd_conjugate_scan, "green": cmd_green,
    "minimize": cmd_minimize, "f-profile": cmd_f_profile, "periodic": cmd_periodic, "graph": cmd_graph,
    "alpha": cmd_alpha, "mane": cmd_mane, "aubry": cmd_aubry, "foliation": cmd_foliation,
    "crosscheck": cmd_crosscheck,
}


def run(cfg: ExperimentConfig) -> RunReport:
    """Execute one configured command; the report records checks, files and the exit code."""
    report = RunReport(command={"name": cfg.command, "genfun": cfg.genfun, "params": cfg.params}, seed=cfg.seed)
    t0 = time.perf_counter()
    try:
        S = make_family(cfg.genfun, check=cfg.command != "audit")
        sink = Run(cfg, report)
        COMMANDS[cfg.command](S, cfg.params, sink, cfg.seed)
        if any(c.asserted and not c.passed for c in report.checks):
            report.exit_code = EXIT_ASSERT
    except (InvalidParameters, UnknownFamily, AuditFailed, GridMismatch, ValueError) as exc:
        report.exit_code, report.error = EXIT_INVALID, f"{type(exc).__name__}: {exc}"
    except NoConvergence as exc:
        report.exit_code, report.error = EXIT_SOLVER, f"{type(exc).__name__}: {exc}"
    except (NotLagrangian, GraphRejected, NotInAubry, AmbiguousPartner, NotTransverse) as exc:
        report.exit_code, report.error = EXIT_ASSERT, f"{type(exc).__name__}: {exc}"
    report.wall_time = time.perf_counter() - t0
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    (cfg.output_dir / "report.json").write_text(json.dumps(report.as_dict(), indent=1, sort_keys=True) + "\n")
    return report


def _print_report(report: RunReport, out_dir: Path, stream=None):
    stream = stream or sys.stdout
    for c in report.checks:
        flag = "PASS" if c.passed else "FAIL"
        tag = " (asserted)" if c.asserted else ""
        stream.write(f"{flag}\t{c.name}\tmeasured={c.measured}\tbound={c.bound}{tag}\n")
    for f in report.files:
        stream.write(f"file\t{out_dir / f['path']}\t{f['sha256']}\n")
    if report.error:
        stream.write(f"error\t{report.error}\n")
    stream.write(f"exit\t{report.exit_code}\n")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="twistkam", description="Run twist-map experiments from YAML configs.")
    sub = parser.add_subparsers(dest="action", required=True)
    p_run = sub.add_parser("run", help="execute a config")
    p_run.add_argument("config", type=Path)
    p_run.add_argument("--out", type=Path, help="override output.dir")
    p_run.add_argument("--figures", action="store_true", help="also render PNG figures")
    p_check = sub.add_parser("check", help="validate a config without running it")
    p_check.add_argument("config", type=Path)
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config)
    except (InvalidParameters, OSError) as exc:
        sys.stderr.write(f"invalid config: {exc}\n")
        return EXIT_INVALID
    if args.action == "check":
        sys.stdout.write(f"ok\t{cfg.command}\n")
        return EXIT_OK
    if args.out is not None:
        cfg.output_dir = args.out
    if args.figures:
        cfg.figures = True
    report = run(cfg)
    _print_report(report, cfg.output_dir)
    return report.exit_code


def run_mapping(raw: dict, output_dir=None) -> RunReport:
    """Validate and run an in-memory config mapping."""
    cfg = validate(raw)
    if output_dir is not None:
        cfg.output_dir = Path(output_dir)
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
