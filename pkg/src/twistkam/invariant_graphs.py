"""Invariant Lagrangian graphs of (N, r)-periodic orbits and the foliation section."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .action import extend_extremal, min_action
from .dynamics import PhasePoint, as_points, twist_map
from .errors import GraphRejected, GridMismatch, NoConvergence, NotInAubry, NotLagrangian
from .genfun import GeneratingFunction, require_twist
from .grids import LagrangianGraph, TorusGrid
from .weakkam import CohomologyClass, aubry_partner, stilde

REJECT_FRACTION = 0.01
ASYMMETRY_TOL = 1e-4


def _shift_vector(S, r) -> np.ndarray:
    r = np.atleast_1d(np.asarray(r, dtype=float))
    if r.shape != (S.dim,) or not np.all(r == np.round(r)):
        raise ValueError(f"r must be an integer vector of length {S.dim}")
    return r


def _fibers(S, xs, N, r, opts):
    """Momenta and return residuals at base points xs (P, d)."""
    res = min_action(S, xs, xs + r, N, **opts)
    pts = res.points
    p = -S.d1(pts[:, 0], pts[:, 1])
    img = twist_map(S, PhasePoint(xs, p), N)
    resid = np.linalg.norm(np.concatenate([img.x - (xs + r), img.p - p], axis=-1), axis=-1)
    return p, resid, res.converged, pts


def periodic_fiber(S: GeneratingFunction, x, N: int, r, **opts) -> tuple[np.ndarray, float]:
    """Momentum p over x with F^N(x, p) = (x + r, p), taken from the minimizing segment.

    Without conjugate points the residual sits at solver precision; with
    them it can be large, which is reported rather than raised.
    """
    require_twist(S)
    if N < 1:
        raise ValueError("N must be >= 1")
    x = as_points(S, x)
    r = _shift_vector(S, r)
    p, resid, conv, _ = _fibers(S, x[None], N, r, opts)
    if not conv[0]:
        raise NoConvergence(f"A_{N} from {x.tolist()} did not converge")
    return p[0], float(resid[0])


def translation_residual(S: GeneratingFunction, x, N: int, r, **opts) -> float:
    """|x_{2N} - x_N - r| after extending the minimizing segment by N steps."""
    x = as_points(S, x)
    r = _shift_vector(S, r)
    pts = min_action(S, x[None], x[None] + r, N, **opts).points[0]
    ext = extend_extremal(S, pts[0], pts[1], 0, 2 * N - 1)
    return float(np.linalg.norm(ext[2 * N] - ext[N] - r))


def build_graph(S: GeneratingFunction, N: int, r, grid: TorusGrid, residual_tol: float = 1e-8,
                **opts) -> LagrangianGraph:
    """Sample Gamma*_{N,r} on a torus grid.

    Cells whose minimization fails are marked ``failed``; more than 1% of
    such cells rejects the graph.  A large return residual is recorded in
    the audits but does not fail a cell.
    """
    require_twist(S)
    if grid.size == 0:
        raise ValueError("grid is empty")
    r = _shift_vector(S, r)
    xs = grid.points
    p, resid, conv, _ = _fibers(S, xs, N, r, opts)
    status = np.where(conv & np.isfinite(resid), "ok", "failed").astype(object)
    if np.mean(status != "ok") > REJECT_FRACTION:
        raise GraphRejected(f"{np.sum(status != 'ok')} of {grid.size} cells failed")
    p = np.where((status == "ok")[:, None], p, np.nan)
    g = LagrangianGraph(grid, p, status, resid, {"N": int(N), "r": r.tolist()}, {})
    g.audits.update(graph_audits(g, residual_tol))
    if min(grid.res) >= 4 and all(n % 2 == 0 for n in grid.res):
        # the same graph read at twice the node spacing
        g.audits["asymmetry_coarse"] = g.asymmetry(step=2)
    return g


def graph_audits(g: LagrangianGraph, residual_tol: float = 1e-8) -> dict:
    ok = g.present
    resid = g.residual[ok]
    return {
        "max_residual": float(resid.max()) if resid.size else float("nan"),
        "residual_ok": bool(resid.size and resid.max() <= residual_tol),
        "asymmetry": g.asymmetry(),
        "lipschitz": g.lipschitz(),
        "average_momentum": g.average().tolist(),
        "failed_cells": int(np.sum(~ok)),
    }


def asymmetry_threshold(g: LagrangianGraph, tol: float = ASYMMETRY_TOL) -> float:
    return tol * max(1.0, g.lipschitz())


def graph_cohomology(g: LagrangianGraph, tol: float = ASYMMETRY_TOL) -> CohomologyClass:
    """Class of the closed 1-form whose graph is g: the grid average of p."""
    asym = g.asymmetry()
    limit = asymmetry_threshold(g, tol)
    if not np.isfinite(asym) or asym > limit:
        raise NotLagrangian(f"Jacobian asymmetry {asym:.3g} exceeds {limit:.3g}")
    if not g.present.all():
        raise NotLagrangian("graph has missing cells; its average is not a class")
    return CohomologyClass(g.average())


def compare_graphs(g1: LagrangianGraph, g2: LagrangianGraph) -> tuple[float, float]:
    """(sup, inf) over commonly present cells of |p1(x) - p2(x)|; nan when no cell is present in both."""
    if g1.grid != g2.grid:
        raise GridMismatch(f"grids differ: {g1.grid.res} vs {g2.grid.res}")
    both = g1.present & g2.present
    if not both.any():
        return float("nan"), float("nan")
    dist = np.linalg.norm(g1.p[both] - g2.p[both], axis=-1)
    return float(dist.max()), float(dist.min())


@dataclass
class FoliationSection:
    x: np.ndarray
    classes: np.ndarray  # (k, d)
    p: np.ndarray  # (k, d); nan where the indicator failed
    indicator: np.ndarray
    status: list
    audits: dict = field(default_factory=dict)

    def rows(self):
        for c, p, ind in zip(self.classes, self.p, self.indicator):
            yield (*c, *p, float(ind))


def foliation_section(S: GeneratingFunction, x, c_grid, N_max: int, R_max: int, **opts) -> FoliationSection:
    """p = F_x(c), the dual-Aubry momentum over x, for each class in c_grid."""
    require_twist(S)
    x = as_points(S, x)
    C = np.array([np.atleast_1d(np.asarray(c, dtype=float)) for c in c_grid]).reshape(-1, S.dim)
    P = np.full_like(C, np.nan)
    ind = np.full(len(C), np.nan)
    status = []
    for k, c in enumerate(C):
        s = stilde(S, c, N_max, R_max, **opts)
        try:
            smp = aubry_partner(S, c, x, N_max, R_max, stilde_est=s, **opts)
        except NotInAubry as exc:
            status.append(f"absent: {exc}")
            continue
        P[k] = smp.p
        ind[k] = smp.indicator
        status.append("ok")
    return FoliationSection(x, C, P, ind, status, foliation_audits(C, P))


def foliation_audits(C: np.ndarray, P: np.ndarray) -> dict:
    ok = np.all(np.isfinite(P), axis=1)
    Cs, Ps = C[ok], P[ok]
    out: dict = {"present": int(ok.sum()), "absent": int((~ok).sum())}
    if len(Cs) >= 2:
        dp = np.linalg.norm(Ps[:, None] - Ps[None], axis=-1)
        dc = np.linalg.norm(Cs[:, None] - Cs[None], axis=-1)
        off = ~np.eye(len(Cs), dtype=bool) & (dc > 0)
        out["injectivity_gap"] = float(dp[off].min())
        # largest |dp| / |dc| over pairs of nearest classes
        near = np.where(off, dc, np.inf)
        j = np.argmin(near, axis=1)
        out["continuity_modulus"] = float(np.max(dp[np.arange(len(Cs)), j] / dc[np.arange(len(Cs)), j]))
        if C.shape[1] == 1:
            order = np.argsort(Cs[:, 0])
            steps = np.diff(Ps[order, 0])
            out["monotonicity_violation"] = float(max(0.0, -steps.min()))
        norm_c = np.linalg.norm(Cs, axis=1)
        order = np.argsort(norm_c)
        out["coercivity_trend"] = [(float(norm_c[i]), float(np.linalg.norm(Ps[i]))) for i in order]
    return out
