"""Periodic power-law densities f(x, xi) and the perturbed density fbar(x, s, xi).

A density is ``a(x) * |xi|**p`` (isotropic) or ``a(x) * sum_j w_j |xi_j|**p``
(column weighted, xi_j the j-th column) where ``a`` is a positive coefficient
field, 1-periodic in x1 and x2.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from .geometry import ManifoldDescriptor, TangentFrame


# ---------------------------------------------------------------- coefficients

@dataclass(frozen=True)
class Constant:
    a0: float = 1.0
    kind: str = field(default="constant", init=False)

    def __post_init__(self):
        if not self.a0 > 0:
            raise ValueError("coefficient must be positive")

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return np.full(x.shape[:-1], float(self.a0))

    def extrema(self):
        return self.a0, self.a0

    def aligned(self, n: int) -> bool:
        return True

    def vertical_pieces(self) -> int:
        return 1

    def to_dict(self):
        return {"kind": "constant", "a0": float(self.a0)}


@dataclass(frozen=True)
class Laminate1D:
    """``a1`` on [0, theta) and ``a2`` on [theta, 1) of each period along ``axis``."""

    a1: float = 1.0
    a2: float = 4.0
    theta: float = 0.5
    axis: int = 1
    kind: str = field(default="laminate", init=False)

    def __post_init__(self):
        if not (self.a1 > 0 and self.a2 > 0):
            raise ValueError("coefficient values must be positive")
        if not 0 < self.theta < 1:
            raise ValueError("split fraction theta must lie in (0, 1)")
        if self.axis not in (1, 2):
            raise ValueError("laminate axis must be 1 or 2")

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        y = np.mod(x[..., self.axis - 1], 1.0)
        return np.where(y < self.theta, float(self.a1), float(self.a2))

    def extrema(self):
        return min(self.a1, self.a2), max(self.a1, self.a2)

    def aligned(self, n: int) -> bool:
        return abs(n * self.theta - round(n * self.theta)) < 1e-9

    def vertical_pieces(self) -> int:
        return 1

    def to_dict(self):
        return {"kind": "laminate", "a1": float(self.a1), "a2": float(self.a2),
                "theta": float(self.theta), "axis": int(self.axis)}


@dataclass(frozen=True)
class Checkerboard2D:
    a1: float = 1.0
    a2: float = 4.0
    kind: str = field(default="checkerboard", init=False)

    def __post_init__(self):
        if not (self.a1 > 0 and self.a2 > 0):
            raise ValueError("coefficient values must be positive")

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        i = np.floor(2.0 * np.mod(x[..., 0], 1.0))
        j = np.floor(2.0 * np.mod(x[..., 1], 1.0))
        return np.where((i + j) % 2 == 0, float(self.a1), float(self.a2))

    def extrema(self):
        return min(self.a1, self.a2), max(self.a1, self.a2)

    def aligned(self, n: int) -> bool:
        return n % 2 == 0

    def vertical_pieces(self) -> int:
        return 1

    def to_dict(self):
        return {"kind": "checkerboard", "a1": float(self.a1), "a2": float(self.a2)}


@dataclass(frozen=True, eq=False)
class GridSampled:
    """Piecewise-constant field on an n1 x n2 x n3 partition of [0,1)^2 x (-1/2, 1/2)."""

    values: np.ndarray
    kind: str = field(default="grid", init=False)

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim != 3:
            raise ValueError("grid-sampled coefficient needs a 3D array")
        if not (v > 0).all():
            raise ValueError("coefficient values must be positive")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        n1, n2, n3 = self.values.shape
        i = np.minimum((np.mod(x[..., 0], 1.0) * n1).astype(int), n1 - 1)
        j = np.minimum((np.mod(x[..., 1], 1.0) * n2).astype(int), n2 - 1)
        k = np.clip(np.floor((x[..., 2] + 0.5) * n3).astype(int), 0, n3 - 1)
        return self.values[i, j, k]

    def extrema(self):
        return float(self.values.min()), float(self.values.max())

    def aligned(self, n: int) -> bool:
        n1, n2, _ = self.values.shape
        return n % n1 == 0 and n % n2 == 0

    def vertical_pieces(self) -> int:
        return self.values.shape[2]

    @classmethod
    def from_csv(cls, path) -> "GridSampled":
        """Read a header line ``n1,n2,n3`` followed by the values in row-major order."""
        lines = Path(path).read_text().split("\n")
        shape = tuple(int(v) for v in lines[0].split(","))
        body = " ".join(lines[1:]).replace(",", " ").split()
        vals = np.array([float(v) for v in body])
        if vals.size != int(np.prod(shape)):
            raise ValueError(f"expected {np.prod(shape)} values, found {vals.size}")
        return cls(vals.reshape(shape))

    def to_dict(self):
        return {"kind": "grid", "shape": list(self.values.shape),
                "values": self.values.ravel().tolist()}


CoefficientField = Union[Constant, Laminate1D, Checkerboard2D, GridSampled]


def coefficient_from_dict(d: dict) -> CoefficientField:
    kind = d["kind"]
    if kind == "constant":
        return Constant(float(d.get("a0", 1.0)))
    if kind == "laminate":
        return Laminate1D(float(d["a1"]), float(d["a2"]), float(d.get("theta", 0.5)), int(d.get("axis", 1)))
    if kind == "checkerboard":
        return Checkerboard2D(float(d["a1"]), float(d["a2"]))
    if kind == "grid":
        if "path" in d:
            return GridSampled.from_csv(d["path"])
        return GridSampled(np.asarray(d["values"], dtype=float).reshape(d["shape"]))
    raise ValueError(f"unknown coefficient kind {kind!r}")


# ---------------------------------------------------------------- power laws

def regularized_power(g2, p, eps):
    """Value and radial factor of ``(eps^2 + g2)^(p/2) - eps^p``.

    ``g2`` is the squared norm |g|^2.  Returns ``(value, factor)`` with the
    derivative with respect to g equal to ``factor * g``.  For p == 2 the
    regularization cancels and the plain square is returned.
    """
    if p == 2:
        return g2, np.full_like(g2, 2.0)
    if eps == 0:
        r = np.sqrt(g2)
        with np.errstate(divide="ignore", invalid="ignore"):
            factor = np.where(g2 > 0, p * r ** (p - 2), 0.0)
        return r ** p, factor
    e2 = eps * eps
    base = e2 + g2
    return base ** (p / 2) - e2 ** (p / 2), p * base ** (p / 2 - 1)  # same rounding path, exact 0 at g = 0


class NonSmoothPoint(ValueError):
    """Gradient requested at a kink of an unregularized p < 2 power."""


@dataclass(frozen=True)
class IntegrandSpec:
    coeff: CoefficientField = field(default_factory=Constant)
    p: float = 2.0
    form: str = "isotropic"
    weights: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if not self.p > 1:
            raise ValueError("growth exponent must satisfy p > 1")
        if self.form not in ("isotropic", "column_weighted"):
            raise ValueError(f"unknown form {self.form!r}")
        w = tuple(float(v) for v in self.weights)
        if len(w) != 3 or min(w) <= 0:
            raise ValueError("column weights must be three positive numbers")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "p", float(self.p))

    def density(self, a, xi, eps=0.0):
        """Pointwise value and xi-derivative of a * W(xi) for stacked 3x3 matrices.

        ``a`` has shape S and ``xi`` shape S + (3, 3); regularized by ``eps``.
        """
        if self.form == "isotropic":
            g2 = np.sum(xi * xi, axis=(-2, -1))
            val, fac = regularized_power(g2, self.p, eps)
            return a * val, (a * fac)[..., None, None] * xi
        w = np.asarray(self.weights)
        g2 = np.sum(xi * xi, axis=-2)  # column norms squared, S + (3,)
        val, fac = regularized_power(g2, self.p, eps)
        return a * (val @ w), (a[..., None] * fac * w)[..., None, :] * xi

    def to_dict(self):
        d = {"form": self.form, "p": self.p, "coeff": self.coeff.to_dict()}
        if self.form == "column_weighted":
            d["weights"] = list(self.weights)
        return d


def integrand_from_dict(d: dict) -> IntegrandSpec:
    return IntegrandSpec(coeff=coefficient_from_dict(d.get("coeff", {"kind": "constant"})),
                         p=float(d.get("p", 2.0)), form=d.get("form", "isotropic"),
                         weights=tuple(d.get("weights", (1.0, 1.0, 1.0))))


@dataclass(frozen=True)
class PerturbedIntegrand:
    base: IntegrandSpec
    manifold: ManifoldDescriptor

    def density(self, a, xi, proj, eps=0.0):
        """Value and derivative of f(P xi) + |xi - P xi|^p with a fixed projector."""
        q = np.eye(3) - proj
        pxi = proj @ xi
        qxi = q @ xi
        v1, d1 = self.base.density(a, pxi, eps)
        v2, fac = regularized_power(np.sum(qxi * qxi, axis=(-2, -1)), self.base.p, eps)
        return v1 + v2, proj @ d1 + fac[..., None, None] * qxi


def _column_constants(p):
    r = 3.0 ** (1.0 - p / 2.0)
    return min(1.0, r), max(1.0, r)


def growth_constants(spec: IntegrandSpec):
    """(alpha, beta) with alpha |xi|^p <= f(x, xi) <= beta (1 + |xi|^p)."""
    amin, amax = spec.coeff.extrema()
    if spec.form == "isotropic":
        return float(amin), float(amax)
    lo, hi = _column_constants(spec.p)
    return float(amin * min(spec.weights) * lo), float(amax * max(spec.weights) * hi)


def fbar_growth_constant(spec: IntegrandSpec) -> float:
    """C with (1/C)|xi|^p <= fbar <= C (1 + |xi|^p), uniformly in (x, s)."""
    alpha, beta = growth_constants(spec)
    p = spec.p
    upper = max(beta, 1.0) * 2.0 ** p
    lower = min(alpha, 1.0) * min(1.0, 2.0 ** (1.0 - p / 2.0))
    return max(upper, 1.0 / lower)


def eval_f(spec: IntegrandSpec, x, xi, eps: float = 0.0):
    """f(x, xi), vectorised over leading axes of ``x`` (..., 3) and ``xi`` (..., 3, 3)."""
    x = np.asarray(x, dtype=float)
    xi = np.asarray(xi, dtype=float)
    return spec.density(spec.coeff(x), xi, eps)[0]


def eval_fbar(pert: PerturbedIntegrand, x, frame: TangentFrame, xi, eps: float = 0.0):
    x = np.asarray(x, dtype=float)
    xi = np.asarray(xi, dtype=float)
    return pert.density(pert.base.coeff(x), xi, frame.proj, eps)[0]
