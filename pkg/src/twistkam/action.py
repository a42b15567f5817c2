"""Action sums and fixed-endpoint action minimization.

A_N(x, y) is the minimum of S(x, x_1, ..., x_{N-1}, y) over the interior
points.  The Hessian of that function is block tridiagonal, so each Newton
step is a block Thomas solve of cost O(N d^3).  Problems are processed in
batches: many endpoint pairs and all multistarts go through one vectorized
Newton loop.
"""
from __future__ import annotations

import itertools

import warnings
from dataclasses import dataclass

import numpy as np

from .dynamics import as_points, shift, unshift
from .errors import NoConvergence, SaddleWarning
from .genfun import GeneratingFunction, require_twist
from .grids import TorusGrid

GRAD_TOL = 1e-9
MAX_ITER = 200


@dataclass(frozen=True)
class Segment:
    points: np.ndarray  # (n + 1, d)
    action: float

    @property
    def n(self) -> int:
        return len(self.points) - 1


@dataclass(frozen=True)
class MinimizeResult:
    segment: Segment
    value: float
    grad_norm: float
    newton_iters: int
    multistart_count: int
    is_minimum: bool = True
    min_hessian_eig: float = float("nan")


@dataclass
class BatchMinimum:
    """Per-problem results of :func:`min_action`."""

    values: np.ndarray  # (P,)
    points: np.ndarray  # (P, N + 1, d)
    grad_norm: np.ndarray
    iters: np.ndarray
    converged: np.ndarray
    n_starts: int


def action_sum(S: GeneratingFunction, points) -> np.ndarray:
    """Sum of S over consecutive pairs; broadcasts over leading axes of (..., n + 1, d)."""
    pts = as_points(S, points)
    if pts.ndim < 2 or pts.shape[-2] < 2:
        raise ValueError("an action sum needs at least two points")
    return S(pts[..., :-1, :], pts[..., 1:, :]).sum(-1)


def extremal_residual(S: GeneratingFunction, points) -> float:
    """Max over interior k of |D2 S(x_{k-1}, x_k) + D1 S(x_k, x_{k+1})|."""
    pts = as_points(S, points)
    if pts.shape[-2] < 3:
        raise ValueError("need at least three points")
    g = S.d2(pts[:-2], pts[1:-1]) + S.d1(pts[1:-1], pts[2:])
    return float(np.max(np.linalg.norm(g, axis=-1)))


# ---------------------------------------------------------------------------
# block tridiagonal algebra


def hessian_blocks(S: GeneratingFunction, points):
    """Gradient and Hessian blocks of the fixed-endpoint action at ``points``.

    Returns (value, grad, diag, upper) with shapes (...), (..., m, d),
    (..., m, d, d), (..., m - 1, d, d) where m = n - 1 interior points and
    upper[k] is the block coupling interior points k and k + 1.
    """
    pts = np.asarray(points, dtype=float)
    b = S.derivatives(pts[..., :-1, :], pts[..., 1:, :])
    value = b.value.sum(-1)
    grad = b.d2[..., :-1, :] + b.d1[..., 1:, :]
    diag = b.d22[..., :-1, :, :] + b.d11[..., 1:, :, :]
    upper = b.d12[..., 1:-1, :, :]
    return value, grad, diag, upper


def block_tridiag_solve(diag, upper, rhs):
    """Solve H z = rhs for symmetric block tridiagonal H (lower blocks = upper^T)."""
    m = diag.shape[-3]
    Dt = [diag[..., 0, :, :]]
    bt = [rhs[..., 0, :]]
    for k in range(1, m):
        L = np.swapaxes(upper[..., k - 1, :, :], -1, -2)
        C = np.swapaxes(np.linalg.solve(np.swapaxes(Dt[-1], -1, -2), np.swapaxes(L, -1, -2)), -1, -2)
        Dt.append(diag[..., k, :, :] - C @ upper[..., k - 1, :, :])
        bt.append(rhs[..., k, :] - (C @ bt[-1][..., None])[..., 0])
    z = [None] * m
    z[m - 1] = np.linalg.solve(Dt[m - 1], bt[m - 1][..., None])[..., 0]
    for k in range(m - 2, -1, -1):
        r = bt[k] - (upper[..., k, :, :] @ z[k + 1][..., None])[..., 0]
        z[k] = np.linalg.solve(Dt[k], r[..., None])[..., 0]
    return np.stack(z, axis=-2)


def block_tridiag_is_pd(diag, upper) -> np.ndarray:
    """Positive definiteness via the Schur complements of block elimination."""
    m = diag.shape[-3]
    D = diag[..., 0, :, :]
    ok = np.linalg.eigvalsh(D)[..., 0] > 0
    for k in range(1, m):
        U = upper[..., k - 1, :, :]
        safe = np.where(ok[..., None, None], D, np.eye(D.shape[-1]))
        D = diag[..., k, :, :] - np.swapaxes(U, -1, -2) @ np.linalg.solve(safe, U)
        ok &= np.linalg.eigvalsh(D)[..., 0] > 0
    return ok


def dense_hessian(diag, upper) -> np.ndarray:
    """Assemble a single (unbatched) block tridiagonal Hessian as a dense matrix."""
    m, d = diag.shape[0], diag.shape[-1]
    H = np.zeros((m * d, m * d))
    for k in range(m):
        H[k * d:(k + 1) * d, k * d:(k + 1) * d] = diag[k]
        if k + 1 < m:
            H[k * d:(k + 1) * d, (k + 1) * d:(k + 2) * d] = upper[k]
            H[(k + 1) * d:(k + 2) * d, k * d:(k + 1) * d] = upper[k].T
    return H


# ---------------------------------------------------------------------------
# minimization


def _box_radius(S, x, y, N, seed_value):
    """Search radius around the linear seed from the fitted coercivity bound."""
    aud = S.default_audit
    alpha = aud.alpha - max(aud.coercivity_violation, 0.0)
    beta, gamma = aud.beta, max(aud.gamma, 1e-12)
    t_star = max(0.0, -beta / (2 * gamma))
    m0 = alpha + beta * t_star + gamma * t_star**2
    Q = seed_value - (N - 1) * m0
    disc = np.maximum(beta**2 - 4 * gamma * (alpha - Q), 0.0)
    t_max = (-beta + np.sqrt(disc)) / (2 * gamma)
    return N * np.maximum(t_max, 0.0) + np.linalg.norm(y - x, axis=-1) + 1.0


def _newton_batch(S, x, y, X, seed, radius, max_iter):
    """Minimize over interior points X (P, m, d) with fixed endpoints x, y (P, d)."""
    P, m, d = X.shape
    X = X.copy()

    def full(Xi, idx):
        return np.concatenate([x[idx, None, :], Xi, y[idx, None, :]], axis=1)

    every = np.arange(P)
    value, grad, diag, upper = hessian_blocks(S, full(X, every))
    gnorm = np.linalg.norm(grad.reshape(P, -1), axis=1)
    iters = np.zeros(P, dtype=int)
    target = 1e-12 * (1 + np.abs(value))
    stalled = np.zeros(P, bool)
    for _ in range(max_iter):
        act = every[(gnorm > target) & ~stalled]
        if act.size == 0:
            break
        iters[act] += 1
        pd = block_tridiag_is_pd(diag[act], upper[act])
        direction = -grad[act]
        if pd.any():
            direction[pd] = -block_tridiag_solve(diag[act][pd], upper[act][pd], grad[act][pd])
        slope = np.einsum("pkd,pkd->p", grad[act], direction)
        # guard against a Newton direction that is not a descent direction
        bad = slope >= 0
        direction[bad] = -grad[act][bad]
        slope[bad] = -gnorm[act][bad] ** 2
        newton = pd & ~bad
        t = np.ones(act.size)
        pending = np.arange(act.size)
        accepted = np.zeros(act.size, bool)
        for _ in range(60):
            rows = act[pending]
            trial = X[rows] + t[pending, None, None] * direction[pending]
            inside = np.max(np.linalg.norm(trial - seed[rows], axis=-1), axis=-1) <= radius[rows]
            v, g, dg, up = hessian_blocks(S, full(trial, rows))
            gn = np.linalg.norm(g.reshape(len(rows), -1), axis=1)
            armijo = v <= value[rows] + 1e-4 * t[pending] * slope[pending]
            flat = (newton[pending] & (gn <= 0.5 * gnorm[rows])
                    & (v <= value[rows] + 1e-12 * (1 + np.abs(value[rows]))))
            ok = inside & (armijo | flat)
            sel = rows[ok]
            X[sel], value[sel], grad[sel], diag[sel], upper[sel], gnorm[sel] = (
                trial[ok], v[ok], g[ok], dg[ok], up[ok], gn[ok])
            accepted[pending[ok]] = True
            pending = pending[~ok]
            if pending.size == 0:
                break
            t[pending] *= 0.5
        stalled[act[~accepted]] = True
        target = 1e-12 * (1 + np.abs(value))
    return X, value, gnorm, iters


def _offsets(d: int) -> np.ndarray:
    """Candidate displacements from the linear seed: a lattice covering [-1/2, 1/2]^d."""
    ticks = np.linspace(-0.5, 0.5, 9)
    return np.array(list(itertools.product(ticks, repeat=d)))


def _chain_seed(S, x, y, lin):
    """Exact min-plus minimizer of the action over interior points restricted to lin + offsets.

    The action is a sum over consecutive pairs, so dynamic programming along
    the chain finds the best discrete path; it picks which potential wells the
    segment visits, which random perturbations of the linear seed often miss.
    """
    P, m, d = lin.shape
    off = _offsets(d)
    J = len(off)
    cand = lin[:, :, None, :] + off[None, None]  # (P, m, J, d)
    V = S(np.repeat(x[:, None], J, axis=1), cand[:, 0])  # (P, J)
    back = []
    for k in range(1, m):
        step = S(cand[:, k - 1, :, None, :], cand[:, k, None, :, :])  # (P, J, J)
        tot = V[:, :, None] + step
        arg = np.argmin(tot, axis=1)
        back.append(arg)
        V = np.take_along_axis(tot, arg[:, None, :], axis=1)[:, 0]
    V = V + S(cand[:, -1], np.repeat(y[:, None], J, axis=1))
    j = np.argmin(V, axis=1)
    idx = [j]
    for arg in reversed(back):
        j = arg[np.arange(P), j]
        idx.append(j)
    idx = np.stack(idx[::-1], axis=1)  # (P, m)
    return np.take_along_axis(cand, idx[:, :, None, None], axis=2)[:, :, 0]


def min_action(S: GeneratingFunction, x, y, N: int, n_starts: int = 4, scale: float = 0.25,
               seed: int = 0, max_iter: int = MAX_ITER) -> BatchMinimum:
    """A_N for a batch of endpoint pairs x, y of shape (P, d) (or (d,)).

    Each problem gets the linear-interpolation seed, the best path through a
    lattice of displacements from it (found by dynamic programming), and
    ``n_starts`` random perturbations of the linear seed (normal, std
    ``scale``) drawn from a generator keyed by (seed, problem index); the
    lowest converged critical value is kept.
    """
    require_twist(S)
    x = np.atleast_2d(as_points(S, x))
    y = np.atleast_2d(as_points(S, y))
    x, y = np.broadcast_arrays(x, y)
    P, d = x.shape
    if N < 1:
        raise ValueError("N must be >= 1")
    if N == 1:
        pts = np.stack([x, y], axis=1)
        vals = S(x, y)
        return BatchMinimum(vals, pts, np.zeros(P), np.zeros(P, int), np.ones(P, bool), 1)

    m = N - 1
    frac = (np.arange(1, N) / N)[None, :, None]
    lin = x[:, None, :] + frac * (y - x)[:, None, :]
    n_random = max(int(n_starts), 0)
    S_count = 2 + n_random
    starts = np.repeat(lin[:, None], S_count, axis=1)
    starts[:, 1] = _chain_seed(S, x, y, lin)
    for i in range(P):
        rng = np.random.default_rng([seed, i])
        starts[i, 2:] += scale * rng.standard_normal((n_random, m, d))
    xs = np.repeat(x, S_count, axis=0)
    ys = np.repeat(y, S_count, axis=0)
    seeds = np.repeat(lin, S_count, axis=0)
    X0 = starts.reshape(P * S_count, m, d)
    seed_val = action_sum(S, np.concatenate([xs[:, None], seeds, ys[:, None]], axis=1))
    radius = _box_radius(S, xs, ys, N, seed_val)
    radius = np.maximum(radius, 2 * np.max(np.linalg.norm(X0 - seeds, axis=-1), axis=-1))

    X, val, gn, it = _newton_batch(S, xs, ys, X0, seeds, radius, max_iter)
    conv = gn <= GRAD_TOL * (1 + np.abs(val))
    for _ in range(3):
        near_wall = ~conv & (np.max(np.linalg.norm(X - seeds, axis=-1), axis=-1) > 0.9 * radius)
        if not near_wall.any():
            break
        radius = np.where(near_wall, 2 * radius, radius)
        idx = np.nonzero(near_wall)[0]
        X2, v2, g2, i2 = _newton_batch(S, xs[idx], ys[idx], X[idx], seeds[idx], radius[idx], max_iter)
        X[idx], val[idx], gn[idx], it[idx] = X2, v2, g2, it[idx] + i2
        conv = gn <= GRAD_TOL * (1 + np.abs(val))

    val = val.reshape(P, S_count)
    conv = conv.reshape(P, S_count)
    masked = np.where(conv, val, np.inf)
    best = np.argmin(masked, axis=1)
    ok = conv.any(axis=1)
    best = np.where(ok, best, np.argmin(gn.reshape(P, S_count), axis=1))
    pick = np.arange(P) * S_count + best
    pts = np.concatenate([x[:, None], X[pick], y[:, None]], axis=1)
    return BatchMinimum(
        values=val[np.arange(P), best], points=pts, grad_norm=gn[pick], iters=it.reshape(P, S_count).sum(1),
        converged=ok, n_starts=S_count,
    )


def _cycle_derivatives(S, X, r):
    """Value, gradient and dense Hessian of the closed action with x_N = x_0 + r."""
    B, N, d = X.shape
    nxt = np.concatenate([X[:, 1:], X[:, :1] + r[:, None]], axis=1)
    b = S.derivatives(X, nxt)
    value = b.value.sum(-1)
    grad = b.d1 + np.roll(b.d2, 1, axis=1)
    H = np.zeros((B, N, d, N, d))
    for k in range(N):
        j = (k + 1) % N
        H[:, k, :, k, :] += b.d11[:, k]
        H[:, j, :, j, :] += b.d22[:, k]
        H[:, k, :, j, :] += b.d12[:, k]
        H[:, j, :, k, :] += np.swapaxes(b.d12[:, k], -1, -2)
    return value, grad, H.reshape(B, N * d, N * d)


def min_cycle(S: GeneratingFunction, starts, r, max_iter: int = MAX_ITER) -> BatchMinimum:
    """Minimize S(x_0, ..., x_N) over closed cycles x_N = x_0 + r.

    All N free points, the base point included, are optimized from each
    start (B, N, d); ``r`` is (B, d) or (d,).  Newton steps use the
    absolute-eigenvalue Hessian, so saddles repel; returned points have
    shape (B, N + 1, d).
    """
    require_twist(S)
    X = np.array(starts, dtype=float)
    B, N, d = X.shape
    r = np.broadcast_to(np.asarray(r, dtype=float), (B, d)).copy()
    value, grad, H = _cycle_derivatives(S, X, r)
    gnorm = np.linalg.norm(grad.reshape(B, -1), axis=1)
    iters = np.zeros(B, dtype=int)
    stalled = np.zeros(B, bool)
    for _ in range(max_iter):
        act = np.nonzero((gnorm > 1e-12 * (1 + np.abs(value))) & ~stalled)[0]
        if act.size == 0:
            break
        iters[act] += 1
        lam, V = np.linalg.eigh(H[act])
        floor = 1e-10 * (1 + np.abs(lam).max(axis=-1, keepdims=True))
        g = grad[act].reshape(act.size, -1)
        coef = np.einsum("bij,bi->bj", V, g) / np.maximum(np.abs(lam), floor)
        direction = -np.einsum("bij,bj->bi", V, coef).reshape(act.size, N, d)
        slope = np.einsum("bi,bi->b", g, direction.reshape(act.size, -1))
        t = np.ones(act.size)
        pending = np.arange(act.size)
        accepted = np.zeros(act.size, bool)
        for _ in range(60):
            rows = act[pending]
            trial = X[rows] + t[pending, None, None] * direction[pending]
            v, gr, h = _cycle_derivatives(S, trial, r[rows])
            gn = np.linalg.norm(gr.reshape(len(rows), -1), axis=1)
            ok = (v <= value[rows] + 1e-4 * t[pending] * slope[pending]) | (
                (gn <= 0.5 * gnorm[rows]) & (v <= value[rows] + 1e-12 * (1 + np.abs(value[rows]))))
            sel = rows[ok]
            X[sel], value[sel], grad[sel], H[sel], gnorm[sel] = trial[ok], v[ok], gr[ok], h[ok], gn[ok]
            accepted[pending[ok]] = True
            pending = pending[~ok]
            if pending.size == 0:
                break
            t[pending] *= 0.5
        stalled[act[~accepted]] = True
    pts = np.concatenate([X, X[:, :1] + r[:, None]], axis=1)
    conv = gnorm <= GRAD_TOL * (1 + np.abs(value))
    return BatchMinimum(value, pts, gnorm, iters, conv, 1)


def minimize_endpoints(S: GeneratingFunction, x, y, N: int, n_starts: int = 4, scale: float = 0.25,
                       seed: int = 0, max_iter: int = MAX_ITER) -> MinimizeResult:
    """Minimal N-step action from x to y, with its minimizing segment."""
    res = min_action(S, x, y, N, n_starts=n_starts, scale=scale, seed=seed, max_iter=max_iter)
    pts = res.points[0]
    if not res.converged[0]:
        raise NoConvergence(
            f"A_{N}: no start converged (best gradient norm {res.grad_norm[0]:.3g})")
    eig = float("nan")
    is_min = True
    if N >= 2:
        _, _, diag, upper = hessian_blocks(S, pts)
        eig = float(np.linalg.eigvalsh(dense_hessian(diag, upper))[0])
        is_min = eig >= -1e-8
        if not is_min:
            warnings.warn(f"A_{N}: best critical point is a saddle (min Hessian eigenvalue {eig:.3g})",
                          SaddleWarning, stacklevel=2)
    value = float(res.values[0])
    return MinimizeResult(
        segment=Segment(pts, value), value=value, grad_norm=float(res.grad_norm[0]),
        newton_iters=int(res.iters[0]), multistart_count=res.n_starts,
        is_minimum=is_min, min_hessian_eig=eig,
    )


def extend_extremal(S: GeneratingFunction, x0, x1, n_minus: int = 0, n_plus: int = 0) -> np.ndarray:
    """Points x_{-n_minus}, ..., x_0, x_1, ..., x_{1 + n_plus} of the extremal sequence through (x0, x1)."""
    require_twist(S)
    a, b = as_points(S, x0), as_points(S, x1)
    fwd = [a, b]
    for _ in range(n_plus):
        fwd.append(shift(S, fwd[-2], fwd[-1]))
    back = []
    u, v = a, b
    for _ in range(n_minus):
        u, v = unshift(S, u, v), u
        back.append(u)
    return np.array(back[::-1] + fwd)


def triangle_gap(S: GeneratingFunction, x, y, z, N: int, N2: int, **opts) -> float:
    """A_N(x, y) + A_N2(y, z) - A_{N + N2}(x, z); nonnegative up to solver tolerance."""
    a = minimize_endpoints(S, x, y, N, **opts).value
    b = minimize_endpoints(S, y, z, N2, **opts).value
    c = minimize_endpoints(S, x, z, N + N2, **opts).value
    return a + b - c


@dataclass
class FProfile:
    grid: TorusGrid
    N: int
    r: np.ndarray
    values: np.ndarray
    converged: np.ndarray

    @property
    def gap(self) -> float:
        return float(self.values.max() - self.values.min())

    @property
    def argmax(self) -> np.ndarray:
        return self.grid.points[int(np.argmax(self.values))]

    @property
    def argmin(self) -> np.ndarray:
        return self.grid.points[int(np.argmin(self.values))]

    def summary(self) -> dict:
        return {
            "N": self.N, "r": self.r.tolist(), "gap": self.gap,
            "argmax": self.argmax.tolist(), "argmin": self.argmin.tolist(),
            "max": float(self.values.max()), "min": float(self.values.min()),
        }


def f_profile(S: GeneratingFunction, N: int, r, grid: TorusGrid, **opts) -> FProfile:
    """Samples of f(x) = A_N(x, x + r) on a torus grid; constant iff the Busemann argument applies."""
    r = np.atleast_1d(np.asarray(r, dtype=float))
    if grid.size == 0:
        raise ValueError("empty grid")
    pts = grid.points
    res = min_action(S, pts, pts + r, N, **opts)
    if not res.converged.all():
        raise NoConvergence(f"f-profile: {int((~res.converged).sum())} cells did not converge")
    return FProfile(grid, N, r, res.values, res.converged)
