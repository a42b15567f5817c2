"""Generating functions of uniform twist type on R^d x R^d.

Every built-in family is an instance of one closed algebra

    S(x, y) = 1/2 v.M.v - c.v + sum_j [a_j cos(theta_j) + b_j sin(theta_j)],
    v = y - x,  theta_j = 2 pi (k_j.x + l_j.v),

with integer index vectors k_j, l_j.  Terms depend on x only through
integer frequencies, so S(x + r, y + r) = S(x, y) for r in Z^d, and all
derivatives are available in closed form.  The linear term -c.v is the
twist by the cohomology class c (S_c = S + c.(x - y)).
"""
from __future__ import annotations

import functools
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

from .errors import AuditFailed, InvalidParameters, UnknownFamily

TWO_PI = 2.0 * np.pi

FAMILIES = (
    "integrable_quadratic",
    "integrable_convex",
    "standard",
    "coupled_standard",
    "custom_fourier",
)


@dataclass(frozen=True)
class DerivativeBundle:
    """Value and first/second partial derivative blocks of S at (x, y).

    ``d12[..., i, j]`` is the mixed partial with respect to x_i and y_j.
    Leading axes broadcast over batches of points.
    """

    value: np.ndarray
    d1: np.ndarray
    d2: np.ndarray
    d11: np.ndarray
    d12: np.ndarray
    d22: np.ndarray


@dataclass(frozen=True)
class GenfunAudit:
    periodicity_residual: float
    periodicity_relative: float
    twist_lower: float
    alpha: float
    beta: float
    gamma: float
    coercivity_violation: float
    n_samples: int

    @property
    def passed(self) -> bool:
        return self.twist_lower > 0 and self.gamma > 0

    def as_dict(self) -> dict:
        return {
            "periodicity_residual": self.periodicity_residual,
            "periodicity_relative": self.periodicity_relative,
            "A_est": self.twist_lower,
            "alpha": self.alpha,
            "beta": self.beta,
            "gamma": self.gamma,
            "coercivity_violation": self.coercivity_violation,
            "n_samples": self.n_samples,
        }


@dataclass(frozen=True, eq=False)
class GeneratingFunction:
    dim: int
    family: str
    M: np.ndarray
    kx: np.ndarray  # (m, d) integer frequencies in x
    lv: np.ndarray  # (m, d) integer frequencies in v = y - x
    a: np.ndarray  # (m,) cosine coefficients
    b: np.ndarray  # (m,) sine coefficients
    cocycle: np.ndarray = field(default=None)  # type: ignore[assignment]
    params: Mapping[str, Any] = field(default_factory=dict)
    twist_constant_hint: float | None = None

    def __post_init__(self):
        if self.cocycle is None:
            object.__setattr__(self, "cocycle", np.zeros(self.dim))
        for name in ("M", "kx", "lv", "a", "b", "cocycle"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    # -- evaluation -------------------------------------------------------

    def _pts(self, x) -> np.ndarray:
        # for d = 1 a trailing coordinate axis may be omitted
        arr = np.asarray(x, dtype=float)
        if self.dim == 1 and (arr.ndim == 0 or arr.shape[-1] != 1):
            arr = arr[..., None]
        return arr

    def __call__(self, x, y) -> np.ndarray:
        x = self._pts(x)
        y = self._pts(y)
        v = y - x
        val = 0.5 * np.einsum("...i,ij,...j->...", v, self.M, v) - v @ self.cocycle
        if len(self.a):
            theta = TWO_PI * (x @ self.kx.T + v @ self.lv.T)
            val = val + (np.cos(theta) @ self.a + np.sin(theta) @ self.b)
        return val

    def derivatives(self, x, y) -> DerivativeBundle:
        x = self._pts(x)
        y = self._pts(y)
        x, y = np.broadcast_arrays(x, y)
        v = y - x
        Mv = v @ self.M
        value = 0.5 * np.einsum("...i,...i->...", v, Mv) - v @ self.cocycle
        d1 = -Mv + self.cocycle
        d2 = Mv - self.cocycle
        shape = v.shape + (self.dim,)
        d11 = np.broadcast_to(self.M, shape).copy()
        d12 = np.broadcast_to(-self.M, shape).copy()
        d22 = np.broadcast_to(self.M, shape).copy()
        if len(self.a):
            theta = TWO_PI * (x @ self.kx.T + v @ self.lv.T)
            c, s = np.cos(theta), np.sin(theta)
            t0 = c * self.a + s * self.b
            t1 = -s * self.a + c * self.b
            gx = TWO_PI * (self.kx - self.lv)
            gy = TWO_PI * self.lv
            value = value + t0.sum(-1)
            d1 = d1 + t1 @ gx
            d2 = d2 + t1 @ gy
            d11 -= np.einsum("...m,mi,mj->...ij", t0, gx, gx)
            d12 -= np.einsum("...m,mi,mj->...ij", t0, gx, gy)
            d22 -= np.einsum("...m,mi,mj->...ij", t0, gy, gy)
        return DerivativeBundle(value, d1, d2, d11, d12, d22)

    def d1(self, x, y) -> np.ndarray:
        """Partial gradient in the first slot only (cheaper than the full bundle)."""
        x = self._pts(x)
        v = self._pts(y) - x
        out = -(v @ self.M) + self.cocycle
        if len(self.a):
            theta = TWO_PI * (x @ self.kx.T + v @ self.lv.T)
            t1 = -np.sin(theta) * self.a + np.cos(theta) * self.b
            out = out + t1 @ (TWO_PI * (self.kx - self.lv))
        return out

    def d2(self, x, y) -> np.ndarray:
        x = self._pts(x)
        v = self._pts(y) - x
        out = v @ self.M - self.cocycle
        if len(self.a):
            theta = TWO_PI * (x @ self.kx.T + v @ self.lv.T)
            t1 = -np.sin(theta) * self.a + np.cos(theta) * self.b
            out = out + t1 @ (TWO_PI * self.lv)
        return out

    # -- metadata ---------------------------------------------------------

    @property
    def is_integrable(self) -> bool:
        """True when S depends on y - x only (no x-frequencies)."""
        return not np.any(self.kx)

    @functools.cached_property
    def twist_bound(self) -> float:
        """Certified lower bound for the twist constant A (may be <= 0 when uninformative)."""
        lam = float(np.linalg.eigvalsh(self.M)[0])
        if len(self.a):
            gx = np.linalg.norm(self.kx - self.lv, axis=1)
            gy = np.linalg.norm(self.lv, axis=1)
            amp = np.hypot(self.a, self.b)
            lam -= float(np.sum(TWO_PI**2 * amp * gx * gy))
        return lam

    @functools.cached_property
    def default_audit(self) -> GenfunAudit:
        return audit(self, n_samples=256, seed=0)

    @functools.cached_property
    def Minv(self) -> np.ndarray:
        return np.linalg.inv(self.M)

    def with_cocycle(self, c) -> "GeneratingFunction":
        c = np.atleast_1d(np.asarray(c, dtype=float))
        if c.shape != (self.dim,):
            raise InvalidParameters(f"cohomology class must have {self.dim} entries, got {c.shape}")
        return GeneratingFunction(
            dim=self.dim,
            family=self.family,
            M=self.M,
            kx=self.kx,
            lv=self.lv,
            a=self.a,
            b=self.b,
            cocycle=self.cocycle + c,
            params=self.params,
            twist_constant_hint=self.twist_constant_hint,
        )

    def descriptor(self) -> dict:
        """Serializable family descriptor (inverse of :func:`make_family`)."""
        out = {"family": self.family, "d": self.dim}
        out.update(self.params)
        return out


def _as_matrix(M, d) -> np.ndarray:
    if M is None:
        return np.eye(d)
    arr = np.asarray(M, dtype=float)
    if arr.ndim == 1:
        if arr.size == 1 and d == 1:
            arr = arr.reshape(1, 1)
        elif arr.size == d * d:
            arr = arr.reshape(d, d)
        elif arr.size == d:
            arr = np.diag(arr)
    if arr.shape != (d, d):
        raise InvalidParameters(f"M must be {d}x{d} (row-major), got shape {np.shape(M)}")
    if not np.allclose(arr, arr.T, atol=1e-14):
        raise InvalidParameters("M must be symmetric")
    if np.linalg.eigvalsh(arr)[0] <= 0:
        raise InvalidParameters("M must be positive definite (twist condition)")
    return arr


def _fourier_terms(triples, d, index_len):
    kx, lv, a, b = [], [], [], []
    for item in triples or ():
        if len(item) != 3:
            raise InvalidParameters("fourier entries are (index-vector, cos-coeff, sin-coeff) triples")
        idx, ca, sb = item
        idx = np.atleast_1d(np.asarray(idx))
        if idx.size != index_len or not np.all(np.equal(np.mod(idx, 1), 0)):
            raise InvalidParameters(f"fourier index vector must have {index_len} integer entries, got {idx}")
        idx = idx.astype(int)
        if index_len == d:
            kx.append(np.zeros(d, dtype=int))
            lv.append(idx)
        else:
            kx.append(idx[:d])
            lv.append(idx[d:])
        a.append(float(ca))
        b.append(float(sb))
    if not kx:
        return np.zeros((0, d)), np.zeros((0, d)), np.zeros(0), np.zeros(0)
    return np.array(kx, float), np.array(lv, float), np.array(a), np.array(b)


def make_family(spec: Mapping[str, Any], check: bool = True) -> GeneratingFunction:
    """Build a generating function from a family descriptor.

    ``spec`` holds ``family``, ``d`` and the flat parameters ``M`` (row-major),
    ``K``, ``eps`` and ``fourier``.  With ``check`` the default audit is run
    and :class:`AuditFailed` raised when the sampled twist constant is not
    positive.
    """
    spec = dict(spec)
    family = spec.pop("family", None)
    if family not in FAMILIES:
        raise UnknownFamily(f"unknown family {family!r}; expected one of {FAMILIES}")
    hint = spec.pop("twist_constant_hint", None)
    d = int(spec.pop("d", 1 if family == "standard" else 2 if family == "coupled_standard" else 0) or 0)
    allowed = {
        "integrable_quadratic": {"M"},
        "integrable_convex": {"M", "fourier"},
        "standard": {"K"},
        "coupled_standard": {"K", "eps"},
        "custom_fourier": {"M", "fourier"},
    }[family]
    extra = set(spec) - allowed
    if extra:
        raise InvalidParameters(f"unexpected parameters for {family}: {sorted(extra)}")
    if d < 1:
        M = spec.get("M")
        d = int(round(np.sqrt(np.size(M)))) if M is not None else 1
    params: dict[str, Any] = {}

    if family == "integrable_quadratic":
        M = _as_matrix(spec.get("M"), d)
        kx, lv, a, b = _fourier_terms((), d, d)
        params["M"] = M.ravel().tolist()
    elif family in ("integrable_convex", "custom_fourier"):
        M = _as_matrix(spec.get("M"), d)
        index_len = d if family == "integrable_convex" else 2 * d
        kx, lv, a, b = _fourier_terms(spec.get("fourier"), d, index_len)
        params["M"] = M.ravel().tolist()
        params["fourier"] = [list(t) for t in spec.get("fourier") or ()]
    elif family == "standard":
        if d != 1:
            raise InvalidParameters("standard family is defined for d = 1")
        K = float(spec.get("K", 1.0))
        M = np.eye(1)
        kx, lv = np.array([[1.0]]), np.array([[0.0]])
        a, b = np.array([K / TWO_PI**2]), np.array([0.0])
        params["K"] = K
    else:  # coupled_standard
        if d != 2:
            raise InvalidParameters("coupled_standard family is defined for d = 2")
        K = float(spec.get("K", 1.0))
        eps = float(spec.get("eps", 0.0))
        M = np.eye(2)
        kx = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, -1.0]])
        lv = np.zeros((3, 2))
        a = np.array([K / TWO_PI**2, K / TWO_PI**2, eps])
        b = np.zeros(3)
        params["K"], params["eps"] = K, eps

    S = GeneratingFunction(
        dim=d, family=family, M=M, kx=kx, lv=lv, a=a, b=b,
        params=params, twist_constant_hint=hint,
    )
    if check:
        rep = S.default_audit
        if rep.twist_lower <= 0:
            raise AuditFailed(f"{family}: sampled twist constant {rep.twist_lower:.3g} is not positive")
        if hint is not None and rep.twist_lower < float(hint) - 1e-9:
            raise AuditFailed(f"{family}: claimed twist constant {hint} exceeds sampled {rep.twist_lower:.6g}")
    return S


def derivatives(S: GeneratingFunction, x, y) -> DerivativeBundle:
    return S.derivatives(x, y)


def audit(S: GeneratingFunction, n_samples: int = 256, seed: int = 0) -> GenfunAudit:
    """Sampled check of periodicity, the twist condition and coercivity."""
    if n_samples < 1:
        raise InvalidParameters("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    d = S.dim
    x = rng.uniform(0.0, 1.0, (n_samples, d))
    u = rng.normal(size=(n_samples, d))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    t = rng.uniform(0.0, 10.0, n_samples)
    t[0] = 0.0
    y = x + t[:, None] * u
    r = rng.integers(-3, 4, (n_samples, d)).astype(float)

    base = S(x, y)
    shifted = S(x + r, y + r)
    diff = np.abs(shifted - base)
    per_res = float(diff.max())
    per_rel = float(np.max(diff / (1.0 + np.abs(base))))

    bundle = S.derivatives(x, y)
    sym = -0.5 * (bundle.d12 + np.swapaxes(bundle.d12, -1, -2))
    twist = float(np.linalg.eigvalsh(sym)[:, 0].min())

    design = np.column_stack([np.ones_like(t), t, t * t])
    coef, *_ = np.linalg.lstsq(design, base, rcond=None)
    alpha, beta, gamma = (float(v) for v in coef)
    violation = float(np.max(design @ coef - base))
    return GenfunAudit(per_res, per_rel, twist, alpha, beta, gamma, violation, n_samples)


def require_twist(S: GeneratingFunction) -> None:
    if S.default_audit.twist_lower <= 0:
        raise AuditFailed(f"{S.family}: not a twist generating function")
