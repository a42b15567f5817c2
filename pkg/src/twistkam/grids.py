from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class TorusGrid:
    """Regular grid of nodes j / res over [0, 1)^d.

    Nodes rather than cell centres, so that 0 and 1/2 are sampled whenever
    ``res`` is even.
    """

    dim: int
    res: tuple[int, ...]

    @classmethod
    def make(cls, dim: int, res) -> "TorusGrid":
        res = (int(res),) * dim if np.isscalar(res) else tuple(int(r) for r in res)
        if len(res) != dim or min(res) < 1:
            raise ValueError(f"grid resolution {res} does not fit dimension {dim}")
        return cls(dim, res)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.res

    @property
    def size(self) -> int:
        return int(np.prod(self.res))

    @property
    def spacing(self) -> np.ndarray:
        return 1.0 / np.asarray(self.res, dtype=float)

    @property
    def points(self) -> np.ndarray:
        axes = [np.arange(r) / r for r in self.res]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def interpolate(self, values: np.ndarray, x) -> np.ndarray:
        """Periodic multilinear interpolation of per-node ``values`` (size, k) at points x (..., d)."""
        x = np.asarray(x, dtype=float)
        vals = np.asarray(values, dtype=float).reshape(self.res + (-1,))
        res = np.asarray(self.res)
        u = np.mod(x, 1.0) * res
        i0 = np.floor(u).astype(int)
        w = u - i0
        out = 0.0
        for corner in range(2**self.dim):
            bits = [(corner >> k) & 1 for k in range(self.dim)]
            idx = tuple(np.mod(i0[..., k] + bits[k], res[k]) for k in range(self.dim))
            weight = np.prod([w[..., k] if bits[k] else 1 - w[..., k] for k in range(self.dim)], axis=0)
            out = out + weight[..., None] * vals[idx]
        return out


@dataclass
class LagrangianGraph:
    """Sampled section x -> p(x) over a torus grid, with per-node status and audits."""

    grid: TorusGrid
    p: np.ndarray  # (size, d)
    status: np.ndarray  # (size,) "ok" or a failure tag
    residual: np.ndarray  # (size,)
    meta: dict
    audits: dict

    @property
    def present(self) -> np.ndarray:
        return self.status == "ok"

    def evaluate(self, x) -> np.ndarray:
        return self.grid.interpolate(self.p, x)

    def average(self) -> np.ndarray:
        return self.p[self.present].mean(axis=0)

    def jacobian(self, step: int = 1) -> np.ndarray:
        """Central-difference dp/dx at every node, shape (size, d, d); step counted in nodes."""
        d = self.grid.dim
        P = self.p.reshape(self.grid.res + (d,))
        J = np.empty(self.grid.res + (d, d))
        for j in range(d):
            h = step / self.grid.res[j]
            J[..., :, j] = (np.roll(P, -step, axis=j) - np.roll(P, step, axis=j)) / (2 * h)
        return J.reshape(self.grid.size, d, d)

    def asymmetry(self, step: int = 1) -> float:
        J = self.jacobian(step)
        ok = self.present
        if not ok.any():
            return float("nan")
        asym = np.abs(J - np.swapaxes(J, -1, -2))[ok]
        return float(np.nanmax(asym)) if np.isfinite(asym).any() else float("nan")

    def lipschitz(self) -> float:
        J = self.jacobian()
        J = np.where(np.isfinite(J), J, 0.0)
        return float(np.max(np.linalg.norm(J, ord=2, axis=(-2, -1))))

    def rows(self):
        pts = self.grid.points
        for i in range(self.grid.size):
            yield (*pts[i], *self.p[i], float(self.residual[i]), str(self.status[i]))
