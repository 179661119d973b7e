"""Embedded target manifolds: nearest-point projection, normals and tangent frames.

Three closed-form kinds are supported: a sphere centred at the origin, a torus
of revolution about the x3 axis and an affine plane.  Every method is
vectorised over leading axes, points being stored in the last axis of length 3.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np

ON_MANIFOLD_TOL = 1e-10
FRAME_TOL = 1e-12


class AmbiguousProjection(ValueError):
    """The point lies on the medial axis, where the nearest point is not unique."""


class NotOnManifold(ValueError):
    """A point expected on the manifold violates its defining equation."""


def _norm(x):
    return np.sqrt(np.sum(x * x, axis=-1))


@dataclass(frozen=True)
class Sphere:
    radius: float = 1.0
    dim: int = field(default=2, init=False)
    kind: str = field(default="sphere", init=False)

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("sphere radius must be positive")

    def residual(self, x):
        return _norm(np.asarray(x, dtype=float)) - self.radius

    def project(self, x):
        x = np.asarray(x, dtype=float)
        r = _norm(x)
        if np.any(r <= 1e-12 * self.radius):
            raise AmbiguousProjection("point at the sphere centre")
        return self.radius * x / r[..., None]

    def normal(self, x):
        x = np.asarray(x, dtype=float)
        r = _norm(x)
        if np.any(r <= 1e-12 * self.radius):
            raise AmbiguousProjection("point at the sphere centre")
        return x / r[..., None]

    def projection_jacobian(self, x):
        x = np.asarray(x, dtype=float)
        r = _norm(x)
        if np.any(r <= 1e-12 * self.radius):
            raise AmbiguousProjection("point at the sphere centre")
        n = x / r[..., None]
        eye = np.broadcast_to(np.eye(3), n.shape + (3,))
        return (self.radius / r)[..., None, None] * (eye - n[..., :, None] * n[..., None, :])

    def reach(self):
        return self.radius

    def to_dict(self):
        return {"kind": "sphere", "radius": float(self.radius)}


@dataclass(frozen=True)
class Torus:
    """Torus of revolution about the x3 axis, centred at the origin."""

    major_radius: float = 2.0
    minor_radius: float = 1.0
    dim: int = field(default=2, init=False)
    kind: str = field(default="torus", init=False)

    def __post_init__(self):
        if not 0 < self.minor_radius < self.major_radius:
            raise ValueError("torus requires 0 < r < R")

    def _tube_centre(self, x):
        rho = np.sqrt(x[..., 0] ** 2 + x[..., 1] ** 2)
        if np.any(rho <= 1e-12 * self.major_radius):
            raise AmbiguousProjection("point on the torus symmetry axis")
        e_rho = np.stack([x[..., 0] / rho, x[..., 1] / rho, np.zeros_like(rho)], axis=-1)
        return rho, e_rho, self.major_radius * e_rho

    def residual(self, x):
        x = np.asarray(x, dtype=float)
        rho = np.sqrt(x[..., 0] ** 2 + x[..., 1] ** 2)
        return np.sqrt((rho - self.major_radius) ** 2 + x[..., 2] ** 2) - self.minor_radius

    def normal(self, x):
        x = np.asarray(x, dtype=float)
        _, _, c = self._tube_centre(x)
        d = x - c
        dn = _norm(d)
        if np.any(dn <= 1e-12 * self.minor_radius):
            raise AmbiguousProjection("point on the torus core circle")
        return d / dn[..., None]

    def project(self, x):
        x = np.asarray(x, dtype=float)
        _, _, c = self._tube_centre(x)
        return c + self.minor_radius * self.normal(x)

    def projection_jacobian(self, x):
        x = np.asarray(x, dtype=float)
        rho, e_rho, c = self._tube_centre(x)
        d = x - c
        dn = _norm(d)
        if np.any(dn <= 1e-12 * self.minor_radius):
            raise AmbiguousProjection("point on the torus core circle")
        dh = d / dn[..., None]
        pxy = np.diag([1.0, 1.0, 0.0])
        jc = (self.major_radius / rho)[..., None, None] * (pxy - e_rho[..., :, None] * e_rho[..., None, :])
        eye = np.broadcast_to(np.eye(3), jc.shape)
        jn = (eye - dh[..., :, None] * dh[..., None, :]) / dn[..., None, None]
        return jc + self.minor_radius * jn @ (eye - jc)

    def reach(self):
        return self.minor_radius

    def to_dict(self):
        return {"kind": "torus", "R": float(self.major_radius), "r": float(self.minor_radius)}


@dataclass(frozen=True)
class AffinePlane:
    point: tuple = (0.0, 0.0, 0.0)
    normal_vector: tuple = (0.0, 0.0, 1.0)
    dim: int = field(default=2, init=False)
    kind: str = field(default="plane", init=False)

    def __post_init__(self):
        n = np.asarray(self.normal_vector, dtype=float)
        if n.shape != (3,) or not np.isfinite(n).all() or np.linalg.norm(n) == 0:
            raise ValueError("plane normal must be a non-zero 3-vector")
        object.__setattr__(self, "point", tuple(float(v) for v in self.point))
        nn = np.linalg.norm(n)
        if abs(nn - 1.0) > 1e-15:  # leave unit input untouched so descriptors round-trip bit-exactly
            n = n / nn
        object.__setattr__(self, "normal_vector", tuple(float(v) for v in n))

    @property
    def _q(self):
        return np.asarray(self.point)

    @property
    def _n(self):
        return np.asarray(self.normal_vector)

    def residual(self, x):
        return (np.asarray(x, dtype=float) - self._q) @ self._n

    def project(self, x):
        x = np.asarray(x, dtype=float)
        return x - self.residual(x)[..., None] * self._n

    def normal(self, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(self._n, x.shape).copy()

    def projection_jacobian(self, x):
        x = np.asarray(x, dtype=float)
        p = np.eye(3) - np.outer(self._n, self._n)
        return np.broadcast_to(p, x.shape + (3,)).copy()

    def reach(self):
        return np.inf

    def to_dict(self):
        return {"kind": "plane", "point": list(self.point), "normal": list(self.normal_vector)}


ManifoldDescriptor = Union[Sphere, Torus, AffinePlane]


def manifold_from_dict(d: dict) -> ManifoldDescriptor:
    kind = d["kind"]
    if kind == "sphere":
        return Sphere(float(d.get("radius", 1.0)))
    if kind == "torus":
        return Torus(float(d["R"]), float(d["r"]))
    if kind == "plane":
        return AffinePlane(tuple(d.get("point", (0, 0, 0))), tuple(d.get("normal", (0, 0, 1))))
    raise ValueError(f"unknown manifold kind {kind!r}")


def tangent_bases(normals):
    """Orthonormal tangent bases, shape (..., 3, 2), for unit normals (..., 3).

    The first basis vector is the coordinate axis least aligned with the
    normal (first index on ties), made orthogonal to it; the second completes
    a right-handed frame.  At n = e3 this gives (e1, e2).
    """
    n = np.asarray(normals, dtype=float)
    k = np.argmin(np.abs(n), axis=-1)
    a = np.zeros_like(n)
    np.put_along_axis(a, k[..., None], 1.0, axis=-1)
    b1 = a - np.sum(a * n, axis=-1, keepdims=True) * n
    b1 /= _norm(b1)[..., None]
    b2 = np.cross(n, b1)
    return np.stack([b1, b2], axis=-1)


@dataclass(frozen=True, eq=False)
class TangentFrame:
    s: np.ndarray
    basis: np.ndarray  # (3, dim), orthonormal columns spanning T_s(M)
    proj: np.ndarray  # (3, 3)

    @property
    def normal(self):
        return np.cross(self.basis[:, 0], self.basis[:, 1])

    def coords(self, xi):
        """Tangent coordinates c with ``xi = basis @ c`` (least squares for non-tangent xi)."""
        return self.basis.T @ np.asarray(xi, dtype=float)

    def from_coords(self, c):
        return self.basis @ np.asarray(c, dtype=float)


def nearest_point(M: ManifoldDescriptor, x):
    """Closest point of ``M`` to ``x``; raises AmbiguousProjection on the medial axis."""
    return M.project(x)


def tangent_frame(M: ManifoldDescriptor, s, tol: float = ON_MANIFOLD_TOL) -> TangentFrame:
    s = np.asarray(s, dtype=float)
    res = float(np.abs(M.residual(s)))
    if res > tol:
        raise NotOnManifold(f"defining-equation residual {res:.3e} exceeds {tol:.1e}")
    n = M.normal(s)
    basis = tangent_bases(n)
    proj = basis @ basis.T
    return TangentFrame(s=s.copy(), basis=basis, proj=proj)


def matrix_tangent_projection(frame: TangentFrame, xi):
    """Project every column of the 3x3 (or 3xk) matrix ``xi`` onto T_s(M)."""
    return frame.proj @ np.asarray(xi, dtype=float)
