"""The twist map defined by a generating function, its tangent map,
conjugate-point scanning and Green-bundle slopes.

Conventions: a phase point is (x, p) with x on the universal cover R^d.
One step of the lifted map is

    p = -D1 S(x, x'),   p' = D2 S(x, x'),

and the shift on configuration pairs is phi(x0, x1) = (x1, x2) with
D2 S(x0, x1) + D1 S(x1, x2) = 0.  All functions broadcast over leading
batch axes; the last axis always has length d.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .errors import NoConvergence, NotTransverse
from .genfun import GeneratingFunction, require_twist

SOLVE_TOL = 1e-11


@dataclass(frozen=True)
class PhasePoint:
    x: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x", np.atleast_1d(np.asarray(self.x, dtype=float)))
        object.__setattr__(self, "p", np.atleast_1d(np.asarray(self.p, dtype=float)))

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.x, self.p], axis=-1)


def as_points(S: GeneratingFunction, x) -> np.ndarray:
    """Coerce ``x`` to a float array whose last axis has length d."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0 or arr.shape[-1] != S.dim:
        if S.dim == 1:
            return arr[..., None]
        raise ValueError(f"expected points with last axis {S.dim}, got shape {arr.shape}")
    return arr


# ---------------------------------------------------------------------------
# implicit solves


def _fallback(fun, z0, tol):
    """Bracketing solve (d = 1) or MINPACK's trust-region dogleg (d >= 2)."""
    if z0.size == 1:
        g = lambda s: float(fun(np.array([s]))[0])
        lo = hi = float(z0[0])
        step = 1.0
        g0 = g(lo)
        # residual is strictly decreasing in the unknown for both slots
        if g0 > 0:
            while g(hi) > 0:
                hi += step
                step *= 2
                if step > 1e12:
                    raise NoConvergence("fiber solve: no bracket found")
        else:
            while g(lo) < 0:
                lo -= step
                step *= 2
                if step > 1e12:
                    raise NoConvergence("fiber solve: no bracket found")
        root = optimize.brentq(g, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
        return np.array([root])
    sol = optimize.root(fun, z0, method="hybr", options={"xtol": 1e-14})
    if not sol.success and np.linalg.norm(fun(sol.x)) > tol:
        raise NoConvergence(f"fiber solve: trust-region fallback failed ({sol.message})")
    return sol.x


def _tol(p):
    return SOLVE_TOL * np.maximum(1.0, np.max(np.abs(p), axis=-1, initial=0.0))


def fiber_solve(S: GeneratingFunction, x, p) -> np.ndarray:
    """Solve p = -D1 S(x, y) for y (unique by the twist condition)."""
    require_twist(S)
    x = as_points(S, x)
    p = as_points(S, p)
    x, p = np.broadcast_arrays(x, p)
    shape = x.shape
    xf = x.reshape(-1, S.dim)
    pf = p.reshape(-1, S.dim)

    def resid_jac(y, rows=None):
        xs = xf if rows is None else xf[rows]
        ps = pf if rows is None else pf[rows]
        b = S.derivatives(xs, y)
        return b.d1 + ps, b.d12

    seed = xf + (pf + S.cocycle) @ S.Minv
    tol = float(np.max(_tol(pf))) if pf.size else SOLVE_TOL
    y = _solve_indexed(resid_jac, seed, tol)
    return y.reshape(shape)


def back_fiber_solve(S: GeneratingFunction, y, q) -> np.ndarray:
    """Solve q = D2 S(x, y) for x (inverse direction of the map)."""
    require_twist(S)
    y = as_points(S, y)
    q = as_points(S, q)
    y, q = np.broadcast_arrays(y, q)
    shape = y.shape
    yf = y.reshape(-1, S.dim)
    qf = q.reshape(-1, S.dim)

    def resid_jac(x, rows=None):
        ys = yf if rows is None else yf[rows]
        qs = qf if rows is None else qf[rows]
        b = S.derivatives(x, ys)
        return b.d2 - qs, np.swapaxes(b.d12, -1, -2)

    seed = yf - (qf + S.cocycle) @ S.Minv
    tol = float(np.max(_tol(qf))) if qf.size else SOLVE_TOL
    x = _solve_indexed(resid_jac, seed, tol)
    return x.reshape(shape)


def _solve_indexed(resid_jac, seed, tol):
    """Newton over the whole batch with per-row bookkeeping, then per-row fallbacks."""
    z = seed.copy()
    rows_all = np.arange(z.shape[0])
    G, J = resid_jac(z)
    norm = np.linalg.norm(G, axis=-1)
    for _ in range(60):
        idx = rows_all[norm > tol * 0.01]
        if idx.size == 0:
            break
        step = -np.linalg.solve(J[idx], G[idx][..., None])[..., 0]
        t = np.ones(idx.size)
        best_z, best_G, best_J, best_n = z[idx], G[idx], J[idx], norm[idx]
        improved = np.zeros(idx.size, bool)
        pending = np.arange(idx.size)
        for _ in range(40):
            trial = z[idx[pending]] + t[pending, None] * step[pending]
            Gt, Jt = resid_jac(trial, rows=idx[pending])
            nt = np.linalg.norm(Gt, axis=-1)
            ok = nt < norm[idx[pending]] * (1 - 1e-4 * t[pending])
            acc = pending[ok]
            best_z[acc], best_G[acc], best_J[acc], best_n[acc] = trial[ok], Gt[ok], Jt[ok], nt[ok]
            improved[acc] = True
            pending = pending[~ok]
            if pending.size == 0:
                break
            t[pending] *= 0.5
        if not improved.any():
            break
        sel = idx[improved]
        z[sel], G[sel], J[sel], norm[sel] = (
            best_z[improved], best_G[improved], best_J[improved], best_n[improved])
    for i in rows_all[norm > tol]:
        fun = lambda s, i=i: resid_jac(s[None, :], rows=[i])[0][0]
        z[i] = _fallback(fun, z[i], tol)
        res = float(np.linalg.norm(fun(z[i])))
        if res > tol:
            raise NoConvergence(f"implicit solve residual {res:.3g} exceeds {tol:.1g}")
    return z


# ---------------------------------------------------------------------------
# maps


def lagrangian_map(S: GeneratingFunction, x, y) -> PhasePoint:
    """L(x, y) = (x, -D1 S(x, y))."""
    x = as_points(S, x)
    return PhasePoint(x, -S.d1(x, as_points(S, y)))


def shift(S: GeneratingFunction, x0, x1) -> np.ndarray:
    """Next point x2 of the extremal sequence through (x0, x1)."""
    x1 = as_points(S, x1)
    return fiber_solve(S, x1, S.d2(as_points(S, x0), x1))


def unshift(S: GeneratingFunction, x1, x2) -> np.ndarray:
    """Previous point x0 of the extremal sequence through (x1, x2)."""
    x1 = as_points(S, x1)
    return back_fiber_solve(S, x1, -S.d1(x1, as_points(S, x2)))


def phi(S: GeneratingFunction, x, y):
    return as_points(S, y), shift(S, x, y)


def _forward(S, x, p):
    x1 = fiber_solve(S, x, p)
    return x1, S.d2(x, x1)


def _backward(S, x1, p1):
    x = back_fiber_solve(S, x1, p1)
    return x, -S.d1(x, x1)


def twist_map(S: GeneratingFunction, pt: PhasePoint, n: int = 1) -> PhasePoint:
    """Iterate the lifted twist map n times (n < 0 iterates the inverse)."""
    x = as_points(S, pt.x)
    p = as_points(S, pt.p)
    step = _forward if n >= 0 else _backward
    for _ in range(abs(int(n))):
        x, p = step(S, x, p)
    return PhasePoint(x, p)


def orbit(S: GeneratingFunction, pt: PhasePoint, n: int) -> np.ndarray:
    """Array of shape (|n| + 1, 2d) holding pt and its |n| iterates."""
    x = as_points(S, pt.x)
    p = as_points(S, pt.p)
    out = [np.concatenate([x, p], -1)]
    step = _forward if n >= 0 else _backward
    for _ in range(abs(int(n))):
        x, p = step(S, x, p)
        out.append(np.concatenate([x, p], -1))
    return np.array(out)


def _tangent_from(S, x, x1):
    b = S.derivatives(x, x1)
    Binv = np.linalg.inv(b.d12)
    d = S.dim
    shape = b.d12.shape[:-2] + (2 * d, 2 * d)
    J = np.empty(shape)
    J[..., :d, :d] = -Binv @ b.d11
    J[..., :d, d:] = -Binv
    J[..., d:, :d] = np.swapaxes(b.d12, -1, -2) - b.d22 @ Binv @ b.d11
    J[..., d:, d:] = -b.d22 @ Binv
    return J


def tangent(S: GeneratingFunction, pt: PhasePoint) -> np.ndarray:
    """Jacobian of one forward step at pt, in (dx, dp) block coordinates."""
    x = as_points(S, pt.x)
    x1 = fiber_solve(S, x, as_points(S, pt.p))
    return _tangent_from(S, x, x1)


def omega(d: int) -> np.ndarray:
    I = np.eye(d)
    Z = np.zeros((d, d))
    return np.block([[Z, I], [-I, Z]])


def symplectic_inverse(J: np.ndarray) -> np.ndarray:
    d = J.shape[-1] // 2
    W = omega(d)
    return -W @ np.swapaxes(J, -1, -2) @ W


def symplectic_residual(J: np.ndarray) -> float:
    W = omega(J.shape[-1] // 2)
    return float(np.max(np.abs(np.swapaxes(J, -1, -2) @ W @ J - W)))


# ---------------------------------------------------------------------------
# conjugate points


@dataclass(frozen=True)
class PhaseRegion:
    """Regular grid over [0, 1)^d (x) times a momentum box (p)."""

    x_res: int
    p_lo: float
    p_hi: float
    p_res: int

    def points(self, d: int) -> tuple[np.ndarray, np.ndarray, tuple[int, ...]]:
        xs = np.arange(self.x_res) / self.x_res
        ps = np.linspace(self.p_lo, self.p_hi, self.p_res)
        axes = [xs] * d + [ps] * d
        mesh = np.meshgrid(*axes, indexing="ij")
        flat = np.stack([m.ravel() for m in mesh], axis=-1)
        return flat[:, :d], flat[:, d:], tuple(len(a) for a in axes)


@dataclass
class ConjugateReport:
    ns: np.ndarray  # signed iterate counts scanned
    min_singular_value: np.ndarray  # per n, minimum over the grid of sigma_min(M_n)
    min_angle: np.ndarray  # per n, minimum over the grid of sigma_min of the normalized block
    first_degenerate_n: int | None
    location: PhasePoint | None
    n_max: int
    threshold: float
    rows: list = field(default_factory=list, repr=False)

    @property
    def degenerate(self) -> bool:
        return self.first_degenerate_n is not None

    @property
    def certificate(self) -> str:
        if self.first_degenerate_n is None:
            return f"no degeneracy found up to n={self.n_max} at threshold {self.threshold:g}"
        loc = self.location
        return (f"vertical returns to vertical at n={self.first_degenerate_n} near "
                f"x={np.round(loc.x, 6).tolist()}, p={np.round(loc.p, 6).tolist()}")


def _push_vertical(S, x, p, n, direction):
    """Yield (k, x_k, p_k, Q_k, R_k) for k = 1..n with DF^k V = Q_k R_k, Q_k orthonormal."""
    d = S.dim
    B = x.shape[0]
    W = np.zeros((B, 2 * d, d))
    W[:, d:, :] = np.eye(d)
    R = np.broadcast_to(np.eye(d), (B, d, d)).copy()
    for k in range(1, n + 1):
        if direction > 0:
            x1 = fiber_solve(S, x, p)
            J = _tangent_from(S, x, x1)
            p = S.d2(x, x1)
            x = x1
        else:
            x0, p0 = _backward(S, x, p)
            J = symplectic_inverse(_tangent_from(S, x0, x))
            x, p = x0, p0
        W, Rk = _orthonormalize(J @ W)
        R = Rk @ R
        yield k, x, p, W, R


def _orthonormalize(W):
    """QR with positive diagonal in R, so det R > 0 and orientation is kept."""
    Q, R = np.linalg.qr(W)
    sgn = np.sign(np.diagonal(R, axis1=-2, axis2=-1))
    sgn[sgn == 0] = 1.0
    return Q * sgn[..., None, :], R * sgn[..., :, None]


def _vertical_block(S, x, p, n, direction):
    """Configuration block of the orthonormalized pushed vertical after n steps."""
    Q = None
    for _, _, _, Q, _ in _push_vertical(S, x[None, :], p[None, :], n, direction):
        pass
    return Q[0, : S.dim, :]


def conjugate_scan(S: GeneratingFunction, region: PhaseRegion, n_max: int, threshold: float = 1e-8,
                   directions=(1, -1)) -> ConjugateReport:
    """Scan a phase grid for returns of the vertical to the vertical.

    A cell is degenerate at step n when the configuration block of the
    orthonormalized pushed vertical basis has a singular value below
    ``threshold`` (relative to the size of DF^n V),
    or when det M_n changes sign between neighbouring grid points (then it
    vanishes in between; that zero is located by root bracketing).
    """
    require_twist(S)
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    d = S.dim
    x0, p0, shape = region.points(d)
    ns, mins, angles, rows = [], [], [], []
    first = None
    location = None
    for direction in directions:
        for k, _, _, Q, R in _push_vertical(S, x0.copy(), p0.copy(), n_max, direction):
            Mn = Q[:, :d, :]
            # smallest singular value of the normalized block = sine of the
            # angle between DF^n V and the vertical
            rel = np.linalg.svd(Mn, compute_uv=False)[:, -1]
            raw = np.linalg.svd(Mn @ R, compute_uv=False)[:, -1]
            det = np.linalg.det(Mn)
            small = rel <= threshold
            flip = _sign_change_cells(np.sign(det).reshape(shape), d).ravel()
            n_signed = direction * k
            ns.append(n_signed)
            mins.append(float(raw.min()))
            angles.append(float(rel.min()))
            degenerate = small | flip
            for i in range(x0.shape[0]):
                rows.append((*x0[i], *p0[i], n_signed, float(raw[i]), int(degenerate[i])))
            if degenerate.any() and (first is None or k < abs(first)):
                first = n_signed
                if small.any():
                    j = int(np.argmin(rel))
                    location = PhasePoint(x0[j], p0[j])
                else:
                    location = _locate_zero(S, x0, p0, np.sign(det).reshape(shape), shape, k, direction)
    order = np.argsort(ns, kind="stable")
    return ConjugateReport(
        ns=np.array(ns)[order], min_singular_value=np.array(mins)[order],
        min_angle=np.array(angles)[order], first_degenerate_n=first, location=location, n_max=n_max, threshold=threshold, rows=rows,
    )


def _sign_change_cells(sign, d):
    """Mark grid points having a neighbour with opposite sign (x axes wrap)."""
    out = np.zeros(sign.shape, bool)
    for ax in range(sign.ndim):
        if sign.shape[ax] < 2:
            continue
        if ax < d:
            nb = np.roll(sign, -1, axis=ax)
            diff = sign * nb < 0
            out |= diff | np.roll(diff, 1, axis=ax)
        else:
            a = np.take(sign, range(sign.shape[ax] - 1), axis=ax)
            b = np.take(sign, range(1, sign.shape[ax]), axis=ax)
            diff = a * b < 0
            pad = [(0, 0)] * sign.ndim
            lo, hi = list(pad), list(pad)
            lo[ax] = (0, 1)
            hi[ax] = (1, 0)
            out |= np.pad(diff, lo) | np.pad(diff, hi)
    return out


def _locate_zero(S, x0, p0, sign, shape, n, direction):
    d = S.dim
    flat = np.arange(x0.shape[0]).reshape(shape)
    for ax in range(sign.ndim):
        for idx in itertools.product(*(range(s) for s in shape)):
            nb = list(idx)
            nb[ax] += 1
            if nb[ax] >= shape[ax]:
                if ax >= d:
                    continue
                nb[ax] = 0
            if sign[idx] * sign[tuple(nb)] < 0:
                i, j = flat[idx], flat[tuple(nb)]
                za = np.concatenate([x0[i], p0[i]])
                zb = np.concatenate([x0[j], p0[j]])
                if nb[ax] == 0 and ax < d:
                    zb[ax] += 1.0

                def g(t):
                    z = (1 - t) * za + t * zb
                    return float(np.linalg.det(_vertical_block(S, z[:d], z[d:], n, direction)))

                t = optimize.brentq(g, 0.0, 1.0, xtol=1e-13)
                z = (1 - t) * za + t * zb
                return PhasePoint(z[:d], z[d:])
    return None


def vertical_block_history(S: GeneratingFunction, pt: PhasePoint, n: int, direction: int = 1):
    """Configuration blocks M_k (k = 1..n) of DF^k V at pt, without normalization."""
    d = S.dim
    x = as_points(S, pt.x)
    p = as_points(S, pt.p)
    W = np.zeros((2 * d, d))
    W[d:] = np.eye(d)
    out = []
    for _ in range(n):
        if direction > 0:
            x1 = fiber_solve(S, x, p)
            J = _tangent_from(S, x, x1)
            p, x = S.d2(x, x1), x1
        else:
            xp, pp = _backward(S, x, p)
            J = symplectic_inverse(_tangent_from(S, xp, x))
            x, p = xp, pp
        W = J @ W
        out.append(W[:d].copy())
    return np.array(out)


# ---------------------------------------------------------------------------
# Green bundle


@dataclass(frozen=True)
class GreenSlope:
    n_iter: int
    slope: np.ndarray
    gap: float
    asymmetry: float


def _pushed_slope(S, start_x, start_p, n):
    d = S.dim
    W = np.zeros((2 * d, d))
    W[d:] = np.eye(d)
    x, p = start_x, start_p
    for k in range(1, n + 1):
        x1 = fiber_solve(S, x, p)
        W = _tangent_from(S, x, x1) @ W
        p, x = S.d2(x, x1), x1
        if k % 8 == 0:
            W, _ = np.linalg.qr(W)
    X, P = W[:d], W[d:]
    sv = np.linalg.svd(X, compute_uv=False)
    if sv[-1] <= 1e-12 * max(sv[0], np.linalg.norm(P, 2)):
        raise NotTransverse(f"pushed vertical is not a graph over dx after {n} steps", n=n)
    return np.linalg.solve(X.T, P.T).T


def green_slope(S: GeneratingFunction, pt: PhasePoint, n_iter: int) -> GreenSlope:
    """Slope G_n of DF^n V(F^{-n} pt), written as the graph dp = G_n dx."""
    require_twist(S)
    if n_iter < 1:
        raise ValueError("n_iter must be >= 1")
    back = orbit(S, pt, -n_iter)
    d = S.dim
    start = back[n_iter]
    G = _pushed_slope(S, start[:d], start[d:], n_iter)
    half = max(n_iter // 2, 1)
    if half == n_iter:
        gap = float("nan")
    else:
        mid = back[half]
        G_half = _pushed_slope(S, mid[:d], mid[d:], half)
        gap = float(np.max(np.abs(G - G_half)))
    asym = float(np.max(np.abs(G - G.T)))
    return GreenSlope(n_iter, G, gap, asym)


def backward_growth(S: GeneratingFunction, pt: PhasePoint, v, n: int) -> np.ndarray:
    """Norms of D(pi o F^{-k}) v for k = 1..n; diagnostic for tangent vectors off the Green bundle."""
    d = S.dim
    x = as_points(S, pt.x)
    p = as_points(S, pt.p)
    w = np.asarray(v, dtype=float)
    out = []
    for _ in range(n):
        xp, pp = _backward(S, x, p)
        w = symplectic_inverse(_tangent_from(S, xp, x)) @ w
        x, p = xp, pp
        out.append(np.linalg.norm(w[:d]))
    return np.array(out)
