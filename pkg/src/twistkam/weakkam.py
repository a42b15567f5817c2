"""Discrete weak KAM quantities for a twist generating function.

Every infimum over unbounded segment lengths is truncated explicitly at
N_max steps and lattice shifts |r|_inf <= R_max.  Truncated values are
upper bounds; estimates carry their truncation and the segment attaining
them.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .action import Segment, action_sum, min_action, min_cycle
from .dynamics import PhasePoint, as_points, shift, twist_map
from .errors import AmbiguousPartner, NoConvergence, NotInAubry
from .genfun import GeneratingFunction, require_twist
from .grids import LagrangianGraph, TorusGrid

INDICATOR_TOL = 1e-2
PARTNER_SEPARATION = 1e-3


@dataclass(frozen=True)
class CohomologyClass:
    c: np.ndarray

    def __post_init__(self):
        c = np.atleast_1d(np.asarray(self.c, dtype=float))
        if not np.all(np.isfinite(c)):
            raise ValueError("cohomology class must be finite")
        object.__setattr__(self, "c", c)


@dataclass(frozen=True)
class Witness:
    N: int
    r: np.ndarray
    segment: Segment


@dataclass(frozen=True)
class WeakKamEstimate:
    value: float
    kind: str  # stilde | alpha | mane | aubry_indicator
    truncation: dict
    witness: Witness | None = None

    @property
    def allowance(self) -> float:
        """Order of the truncation error; not a rigorous bound."""
        return 1.0 / self.truncation["N_max"]


@dataclass(frozen=True)
class AubrySample:
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray
    action_identity_res: float
    antisymmetry_res: float
    indicator: float


def _class(S, c) -> np.ndarray:
    c = c.c if isinstance(c, CohomologyClass) else c
    c = np.atleast_1d(np.asarray(c, dtype=float))
    if c.shape != (S.dim,):
        raise ValueError(f"cohomology class must have {S.dim} entries")
    return c


def twist_by_cocycle(S: GeneratingFunction, c) -> GeneratingFunction:
    """S_c(x, y) = S(x, y) + c.(x - y); same mixed derivatives, same extremal sequences."""
    return S.with_cocycle(_class(S, c))


def lattice_box(d: int, R_max: int) -> np.ndarray:
    rng = range(-int(R_max), int(R_max) + 1)
    return np.array(list(itertools.product(rng, repeat=d)), dtype=float).reshape(-1, d)


@dataclass
class _Table:
    """A_n^{(c)}(x_i, y_i + r) for n = 1..N_max and all r in the lattice box."""

    values: np.ndarray  # (P, N_max, nr)
    shifts: np.ndarray  # (nr, d)
    points: list  # per n: (P, nr, n + 1, d)
    converged: np.ndarray

    def segment(self, i, n, j, Sc) -> Segment:
        pts = self.points[n - 1][i, j]
        return Segment(pts, float(action_sum(Sc, pts)))


def _table(Sc, x, y, N_max, R_max, opts) -> _Table:
    P, d = x.shape
    shifts = lattice_box(d, R_max)
    nr = len(shifts)
    xs = np.repeat(x, nr, axis=0)
    ys = (y[:, None, :] + shifts[None]).reshape(-1, d)
    values = np.empty((P, N_max, nr))
    conv = np.ones((P, N_max, nr), bool)
    points = []
    for n in range(1, N_max + 1):
        res = min_action(Sc, xs, ys, n, **opts)
        values[:, n - 1] = res.values.reshape(P, nr)
        conv[:, n - 1] = res.converged.reshape(P, nr)
        points.append(res.points.reshape(P, nr, n + 1, d))
    return _Table(values, shifts, points, conv)


def _truncation(N_max, R_max, grid=None):
    out = {"N_max": int(N_max), "R_max": int(R_max)}
    if grid is not None:
        out["grid"] = list(grid.res)
    return out


def default_probe(S: GeneratingFunction) -> TorusGrid:
    return TorusGrid.make(S.dim, 8 if S.dim == 1 else 4)


def stilde(S: GeneratingFunction, c, N_max: int, R_max: int, probe_grid: TorusGrid | None = None,
           **opts) -> WeakKamEstimate:
    """Truncated minimizing holonomic value of S_c.

    Minimum over N <= N_max and |r| <= R_max of A^{(c)}(x_0, ..., x_N) / N
    over closed cycles x_N = x_0 + r.  The base point is optimized together
    with the interior points, starting from every node of ``probe_grid``,
    so the value is at most the probe-grid minimum of A_N^{(c)}(x, x + r) / N.
    Enlarging the truncation only adds candidates, so the value is
    nonincreasing in N_max and R_max.
    """
    require_twist(S)
    if N_max < 1 or R_max < 0:
        raise ValueError("need N_max >= 1 and R_max >= 0")
    Sc = twist_by_cocycle(S, c)
    grid = probe_grid or default_probe(S)
    xs = grid.points
    shifts = lattice_box(S.dim, R_max)
    P, nr = len(xs), len(shifts)
    base = np.repeat(xs, nr, axis=0)
    rs = np.tile(shifts, (P, 1))
    best_val, best_wit = np.inf, None
    for n in range(1, N_max + 1):
        frac = (np.arange(n) / n)[None, :, None]
        starts = base[:, None, :] + frac * rs[:, None, :]
        res = min_cycle(Sc, starts, rs, max_iter=opts.get("max_iter", 200))
        means = np.where(res.converged, res.values / n, np.inf)
        k = int(np.argmin(means))
        if means[k] < best_val:
            pts = res.points[k]
            best_val = float(action_sum(Sc, pts)) / n
            best_wit = Witness(n, rs[k].copy(), Segment(pts, float(action_sum(Sc, pts))))
    if best_wit is None:
        raise NoConvergence("no closed cycle converged within the truncation")
    return WeakKamEstimate(best_val, "stilde", _truncation(N_max, R_max, grid), best_wit)


def alpha(S: GeneratingFunction, c, N_max: int, R_max: int, probe_grid=None, **kw) -> WeakKamEstimate:
    est = stilde(S, c, N_max, R_max, probe_grid, **kw)
    return WeakKamEstimate(-est.value, "alpha", est.truncation, est.witness)


@dataclass
class AlphaProfile:
    classes: np.ndarray  # (k, d)
    alpha: np.ndarray  # (k,)
    witnesses: list
    convexity_violation: float
    superlinearity: list  # (t, alpha(t c) / t)
    truncation: dict

    def rows(self):
        for c, a, w in zip(self.classes, self.alpha, self.witnesses):
            yield (*c, float(a), w.N, "|".join(str(int(v)) for v in w.r))


def alpha_profile(S: GeneratingFunction, c_grid, N_max: int, R_max: int, probe_grid=None,
                  max_pairs: int = 50, seed: int = 0, superlinear_ts=(1, 2, 4), **kw) -> AlphaProfile:
    """alpha(c) = -stilde_c on a set of classes, with midpoint-convexity and growth audits."""
    C = np.array([_class(S, c) for c in c_grid])
    cache: dict = {}

    def a_of(c):
        key = tuple(np.round(c, 12))
        if key not in cache:
            cache[key] = alpha(S, c, N_max, R_max, probe_grid, **kw)
        return cache[key]

    ests = [a_of(c) for c in C]
    pairs = list(itertools.combinations(range(len(C)), 2))
    if len(pairs) > max_pairs:
        rng = np.random.default_rng(seed)
        pairs = [pairs[i] for i in rng.choice(len(pairs), max_pairs, replace=False)]
    worst = -np.inf
    for i, j in pairs:
        mid = a_of(0.5 * (C[i] + C[j])).value
        worst = max(worst, mid - 0.5 * (ests[i].value + ests[j].value))
    sup = []
    if len(C):
        direction = C[int(np.argmax(np.linalg.norm(C, axis=1)))]
        if np.any(direction):
            for t in superlinear_ts:
                v = np.abs(t * direction) @ np.abs(S.Minv)
                R_t = max(R_max, int(np.ceil(np.max(v) * N_max)) + 1)
                sup.append((float(t), alpha(S, t * direction, N_max, R_t, probe_grid, **kw).value / t))
    return AlphaProfile(C, np.array([e.value for e in ests]), [e.witness for e in ests],
                        float(worst) if pairs else 0.0, sup, _truncation(N_max, R_max))


def mane_batch(S: GeneratingFunction, c, x, y, N_max: int, R_max: int, stilde_est: float, **opts):
    """Truncated Mane potential for pairs x[i], y[i]; returns (values, table, argmin (n, j))."""
    Sc = twist_by_cocycle(S, c)
    x = np.atleast_2d(as_points(S, x))
    y = np.atleast_2d(as_points(S, y))
    x, y = np.broadcast_arrays(x, y)
    tab = _table(Sc, x, y, N_max, R_max, opts)
    norm = tab.values - np.arange(1, N_max + 1)[None, :, None] * stilde_est
    norm = np.where(tab.converged, norm, np.inf)
    flat = norm.reshape(len(x), -1)
    k = np.argmin(flat, axis=1)
    vals = flat[np.arange(len(x)), k]
    n_idx, j_idx = np.unravel_index(k, norm.shape[1:])
    return vals, norm, tab, Sc, (n_idx + 1, j_idx)


def mane(S: GeneratingFunction, c, x, y, N_max: int, R_max: int, stilde_est, **opts) -> WeakKamEstimate:
    """pi_c(x, y): min over n <= N_max and |r| <= R_max of A_n^{(c)}(x, y + r) - n stilde."""
    s = stilde_est.value if isinstance(stilde_est, WeakKamEstimate) else float(stilde_est)
    vals, _, tab, Sc, (n, j) = mane_batch(S, c, x, y, N_max, R_max, s, **opts)
    seg = tab.segment(0, int(n[0]), int(j[0]), Sc)
    wit = Witness(int(n[0]), tab.shifts[j[0]], seg)
    return WeakKamEstimate(float(vals[0]), "mane", _truncation(N_max, R_max), wit)


def mane_matrix(S: GeneratingFunction, c, points, N_max: int, R_max: int, stilde_est: float, **opts) -> np.ndarray:
    """pi_c(points[i], points[j]) for all ordered pairs."""
    pts = np.atleast_2d(as_points(S, points))
    k = len(pts)
    xi = np.repeat(pts, k, axis=0)
    yj = np.tile(pts, (k, 1))
    vals, *_ = mane_batch(S, c, xi, yj, N_max, R_max, stilde_est, **opts)
    return vals.reshape(k, k)


# ---------------------------------------------------------------------------
# Aubry set


def _resolve_stilde(S, c, N_max, R_max, stilde_est, opts):
    if stilde_est is None:
        return stilde(S, c, N_max, R_max, **opts).value
    return stilde_est.value if isinstance(stilde_est, WeakKamEstimate) else float(stilde_est)


def _partner_residuals(S, c, x, y, N_max, R_max, s, opts):
    """(|S_c(x,y) - stilde - pi(x,y)|, |pi(x,y) + pi(y,x)|) for batches of pairs."""
    Sc = twist_by_cocycle(S, c)
    both_x = np.concatenate([x, y])
    both_y = np.concatenate([y, x])
    vals, *_ = mane_batch(S, c, both_x, both_y, N_max, R_max, s, **opts)
    pxy, pyx = vals[: len(x)], vals[len(x):]
    ident = np.abs(Sc(x, y) - s - pxy)
    anti = np.abs(pxy + pyx)
    return ident, anti


def _partners(S, c, xs, N_max, R_max, s, indicator_tol, opts):
    """Indicator, primary partner and alternative candidates for a batch of base points."""
    vals, norm, tab, _, (n, j) = mane_batch(S, c, xs, xs, N_max, R_max, s, **opts)
    P = len(xs)
    primary = np.array([tab.points[n[i] - 1][i, j[i]][1] for i in range(P)])
    alternatives = []
    for i in range(P):
        alt = []
        close = np.argwhere(norm[i] <= vals[i] + 1e-9 * (1 + abs(vals[i])))
        for nn, jj in close:
            cand = tab.points[nn][i, jj][1]
            if np.linalg.norm(cand - primary[i]) > PARTNER_SEPARATION and not any(
                    np.linalg.norm(cand - a) <= PARTNER_SEPARATION for a in alt):
                alt.append(cand)
        alternatives.append(alt)
    return vals, primary, alternatives


def aubry_partner(S: GeneratingFunction, c, x, N_max: int, R_max: int, stilde_est=None,
                  indicator_tol: float = INDICATOR_TOL, search_radius: float | None = None,
                  polish_above: float = 1e-8, **opts) -> AubrySample:
    """Partner y with (x, y) in the Aubry set of class c, and the dual point p = -D1 S(x, y)."""
    require_twist(S)
    c = _class(S, c)
    x = as_points(S, x)
    s = _resolve_stilde(S, c, N_max, R_max, stilde_est, opts)
    ind, primary, alts = _partners(S, c, x[None], N_max, R_max, s, indicator_tol, opts)
    if ind[0] > indicator_tol:
        raise NotInAubry(f"pi_c(x, x) = {ind[0]:.3g} exceeds indicator tolerance {indicator_tol:g}")
    cands = np.array([primary[0]] + alts[0])
    ident, anti = _partner_residuals(S, c, np.repeat(x[None], len(cands), 0), cands, N_max, R_max, s, opts)
    rho = ident + anti
    k = int(np.argmin(rho))
    y = cands[k]
    others = [i for i in range(len(cands)) if i != k and rho[i] <= rho[k] + 1e-6
              and np.linalg.norm(cands[i] - y) > PARTNER_SEPARATION]
    if others:
        raise AmbiguousPartner(
            f"partners {y.tolist()} and {cands[others[0]].tolist()} both satisfy the Aubry identities")
    if rho[k] > polish_above:
        y = _polish_partner(S, c, x, y, N_max, R_max, s, search_radius, opts)
        i1, a1 = _partner_residuals(S, c, x[None], y[None], N_max, R_max, s, opts)
        ident, anti, k = i1, a1, 0
    return AubrySample(x, y, -S.d1(x, y), float(ident[k]), float(anti[k]), float(ind[0]))


def _polish_partner(S, c, x, y0, N_max, R_max, s, radius, opts):
    def rho(y):
        if radius is not None and np.linalg.norm(y - x) > radius:
            return np.inf
        i, a = _partner_residuals(S, c, x[None], y[None], N_max, R_max, s, opts)
        return float(i[0] + a[0])

    out = optimize.minimize(rho, y0, method="Nelder-Mead",
                            options={"xatol": 1e-10, "fatol": 1e-14, "maxiter": 200})
    return out.x if out.fun < rho(y0) else y0


def dual_aubry_graph(S: GeneratingFunction, c, grid: TorusGrid, N_max: int, R_max: int, stilde_est=None,
                     indicator_tol: float = INDICATOR_TOL, residual_tol: float = 1e-6, **opts) -> LagrangianGraph:
    """Samples (x, p) of the dual Aubry set of class c, one per grid node.

    Nodes failing the Aubry indicator are marked ``absent``; nodes where
    two separated candidates satisfy the identities are ``ambiguous``.
    """
    require_twist(S)
    c = _class(S, c)
    s = _resolve_stilde(S, c, N_max, R_max, stilde_est, opts)
    xs = grid.points
    ind, primary, alts = _partners(S, c, xs, N_max, R_max, s, indicator_tol, opts)
    ident, anti = _partner_residuals(S, c, xs, primary, N_max, R_max, s, opts)
    status = np.array(["ok"] * grid.size, dtype=object)
    p = -S.d1(xs, primary)
    for i in range(grid.size):
        if ind[i] > indicator_tol:
            status[i] = "absent"
        elif alts[i]:
            cand = np.array(alts[i])
            ii, aa = _partner_residuals(S, c, np.repeat(xs[i:i + 1], len(cand), 0), cand, N_max, R_max, s, opts)
            if np.any(ii + aa <= ident[i] + anti[i] + 1e-6):
                status[i] = "ambiguous"
        if status[i] == "ok" and ident[i] + anti[i] > residual_tol:
            status[i] = "residual"
    p[status != "ok"] = np.nan
    residual = ident + anti
    g = LagrangianGraph(grid, p, status, residual, {"c": c.tolist(), "stilde": s,
                                                   **_truncation(N_max, R_max)}, {})
    g.audits.update(graph_invariance(S, g))
    g.audits["present_fraction"] = float(np.mean(status == "ok"))
    return g


def graph_invariance(S: GeneratingFunction, g: LagrangianGraph) -> dict:
    """Distance between the image of each present sample and the interpolated graph."""
    ok = g.present
    if not ok.any():
        return {"invariance_residual": float("nan")}
    xs = g.grid.points[ok]
    img = twist_map(S, PhasePoint(xs, g.p[ok]), 1)
    err = np.linalg.norm(img.p - g.evaluate(img.x), axis=-1)
    # images landing next to absent cells have no graph value to compare with
    err = err[np.isfinite(err)]
    return {"invariance_residual": float(err.max()) if err.size else float("nan")}


# ---------------------------------------------------------------------------
# audits


@dataclass
class PotentialAudit:
    triangle_violation: float  # min of pi(x,y) + pi(y,z) - pi(x,z); should be >= -tol
    additivity_residual: float
    antisymmetry_residual: float
    stilde_lower_violation: float | None = None  # min of stilde - [S(x,y)+S(y,z)-S(x,z)]
    displacement_bound: float | None = None
    lipschitz: float | None = None
    details: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        out = {k: getattr(self, k) for k in (
            "triangle_violation", "additivity_residual", "antisymmetry_residual",
            "stilde_lower_violation", "displacement_bound", "lipschitz")}
        out.update(self.details)
        return out


def _torus_dist(a, b):
    diff = np.mod(a - b + 0.5, 1.0) - 0.5
    return np.linalg.norm(diff, axis=-1)


def potential_audits(S: GeneratingFunction, c, triples, N_max: int, R_max: int, stilde_est=None,
                     aubry_samples=None, **opts) -> PotentialAudit:
    """Triangle inequality, additivity and antisymmetry of the truncated Mane potential on triples.

    The legs x -> y and y -> z use the truncation (N_max, R_max).  Their
    concatenation is a path of up to 2 N_max steps, so the triangle check
    reads pi(x, z) at (2 N_max, 2 R_max): under that pairing the inequality
    holds exactly for truncated potentials, and any violation is a solver
    defect rather than a truncation effect.
    """
    c = _class(S, c)
    s = _resolve_stilde(S, c, N_max, R_max, stilde_est, opts)
    T = as_points(S, np.asarray(triples, dtype=float))
    pts, inv = np.unique(T.reshape(-1, S.dim), axis=0, return_inverse=True)
    inv = inv.reshape(T.shape[:2])
    pi = mane_matrix(S, c, pts, N_max, R_max, s, **opts)
    ix, iy, iz = inv[:, 0], inv[:, 1], inv[:, 2]
    xz = np.unique(np.stack([ix, iz], axis=1), axis=0)
    long_vals, *_ = mane_batch(S, c, pts[xz[:, 0]], pts[xz[:, 1]], 2 * N_max, 2 * R_max, s, **opts)
    pi_long = np.full_like(pi, np.nan)
    pi_long[xz[:, 0], xz[:, 1]] = long_vals
    tri = pi[ix, iy] + pi[iy, iz] - pi_long[ix, iz]
    add = np.abs(pi[ix, iz] - pi[ix, iy] - pi[iy, iz])
    anti = np.abs(pi + pi.T)
    rep = PotentialAudit(float(tri.min()), float(add.max()), float(anti.max()))
    rep.details["worst_additivity_triple"] = T[int(np.argmax(add))].tolist()
    rep.details["triangle_same_truncation"] = float((pi[ix, iy] + pi[iy, iz] - pi[ix, iz]).min())
    # Lipschitz constant of y -> pi(x, y) over the sampled points
    lip = 0.0
    for a in range(len(pts)):
        for b in range(a + 1, len(pts)):
            dist = _torus_dist(pts[a], pts[b])
            if dist > 0:
                lip = max(lip, float(np.max(np.abs(pi[:, a] - pi[:, b])) / dist))
    rep.lipschitz = lip
    if aubry_samples:
        worst, disp = np.inf, 0.0
        for smp in aubry_samples:
            z = shift(S, smp.x, smp.y)
            worst = min(worst, s - float(S(smp.x, smp.y) + S(smp.y, z) - S(smp.x, z)))
            disp = max(disp, float(np.linalg.norm(smp.y - smp.x)))
        rep.stilde_lower_violation = worst
        rep.displacement_bound = disp
    return rep


def subaction_violation(S: GeneratingFunction, c, x0, points, N_max: int, R_max: int, stilde_est,
                        **opts) -> float:
    """max over sampled pairs of u(y) - u(x) - pi(x, y) with u = pi(x0, .); should be <= tol."""
    pts = np.atleast_2d(as_points(S, points))
    s = _resolve_stilde(S, c, N_max, R_max, stilde_est, opts)
    allp = np.vstack([as_points(S, x0)[None], pts])
    pi = mane_matrix(S, c, allp, N_max, R_max, s, **opts)
    u = pi[0, 1:]
    sub = pi[1:, 1:]
    return float(np.max(u[None, :] - u[:, None] - sub))
