"""Piecewise-trilinear vector fields on slab domains and their energies.

Fields live on uniform tensor grids over ``[-Lx/2, Lx/2] x [-Ly/2, Ly/2] x
[-1/2, 1/2]``; nodal values are stored as an array of shape (N1, N2, N3, 3).
Energies are integrated element by element with a tensor Gauss rule, and the
exact gradient with respect to nodal values is obtained by applying the
transposed interpolation/difference operators to the pointwise xi-derivatives.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .geometry import ManifoldDescriptor, TangentFrame
from .integrand import IntegrandSpec, NonSmoothPoint, PerturbedIntegrand

DEFAULT_EPS = 1e-6


class IncompatibleBC(ValueError):
    pass


class ScaleMismatch(ValueError):
    pass


# ---------------------------------------------------------------- domains and rules

@dataclass(frozen=True)
class SlabDomain:
    """Cell ``(tQ')_{,1}`` or rescaled film ``omega x (-1/2, 1/2)``."""

    kind: str
    lx: float
    ly: float
    t: Optional[int] = None
    h: Optional[float] = None

    @classmethod
    def cell(cls, t: int = 1) -> "SlabDomain":
        if int(t) != t or t < 1:
            raise ValueError("cell size t must be a positive integer")
        return cls("cell", float(t), float(t), t=int(t))

    @classmethod
    def film(cls, h: float = 1.0, lx: float = 1.0, ly: float = 1.0) -> "SlabDomain":
        if not h > 0:
            raise ValueError("film thickness h must be positive")
        return cls("film", float(lx), float(ly), h=float(h))

    @property
    def extents(self):
        return (self.lx, self.ly, 1.0)

    @property
    def origin(self):
        return np.array([-self.lx / 2, -self.ly / 2, -0.5])

    @property
    def normalization(self) -> float:
        """Factor applied to the integral: 1/t^2 on cells, 1 on films."""
        return 1.0 / (self.lx * self.ly) if self.kind == "cell" else 1.0


@dataclass(frozen=True)
class QuadratureRule:
    order: int = 2

    def __post_init__(self):
        if self.order not in (1, 2):
            raise ValueError("Gauss order must be 1 or 2")

    @property
    def points(self):
        """1D abscissae on [0, 1]."""
        if self.order == 1:
            return np.array([0.5])
        d = 0.5 / np.sqrt(3.0)
        return np.array([0.5 - d, 0.5 + d])

    @property
    def weights(self):
        return np.full(self.order, 1.0 / self.order)

    def tensor(self):
        """Yield ((a, b, c), weight) over the 3D tensor rule on the unit cube."""
        pts, wts = self.points, self.weights
        for i, a in enumerate(pts):
            for j, b in enumerate(pts):
                for k, c in enumerate(pts):
                    yield (a, b, c), wts[i] * wts[j] * wts[k]


# ---------------------------------------------------------------- constraints

@dataclass(frozen=True)
class Free:
    kind: str = field(default="free", init=False)


@dataclass(frozen=True)
class TangentSubspace:
    frame: TangentFrame
    kind: str = field(default="tangent", init=False)


@dataclass(frozen=True)
class ManifoldValued:
    manifold: ManifoldDescriptor
    kind: str = field(default="manifold", init=False)


Constraint = Union[Free, TangentSubspace, ManifoldValued]

LATERAL_KINDS = ("zero", "affine", "periodic", "none")


@dataclass(frozen=True, eq=False)
class LateralBC:
    """Lateral condition on ``boundary(omega) x (-1/2, 1/2)``; top and bottom stay natural."""

    kind: str = "zero"
    xi_alpha: Optional[np.ndarray] = None  # 3x2, for kind == "affine"
    values: Optional[np.ndarray] = None  # explicit boundary values (N1, N2, N3, 3), overrides xi_alpha

    def __post_init__(self):
        if self.kind not in LATERAL_KINDS:
            raise ValueError(f"unknown lateral condition {self.kind!r}")
        if self.kind == "affine" and self.xi_alpha is None and self.values is None:
            raise ValueError("affine lateral condition needs xi_alpha or values")


ZeroLateral = LateralBC("zero")
PeriodicLateral = LateralBC("periodic")
NoLateral = LateralBC("none")


def AffineLateral(xi_alpha) -> LateralBC:
    return LateralBC("affine", xi_alpha=np.asarray(xi_alpha, dtype=float).reshape(3, 2))


# ---------------------------------------------------------------- fields

def node_coordinates(domain: SlabDomain, grid):
    n1, n2, n3 = grid
    x = np.linspace(-domain.lx / 2, domain.lx / 2, n1)
    y = np.linspace(-domain.ly / 2, domain.ly / 2, n2)
    z = np.linspace(-0.5, 0.5, n3)
    return np.stack(np.meshgrid(x, y, z, indexing="ij"), axis=-1)


def lateral_mask(grid):
    """True on nodes of the lateral boundary ``boundary(omega) x [-1/2, 1/2]``."""
    n1, n2, n3 = grid
    i = np.arange(n1)[:, None, None]
    j = np.arange(n2)[None, :, None]
    m = (i == 0) | (i == n1 - 1) | (j == 0) | (j == n2 - 1)
    return np.broadcast_to(m, (n1, n2, n3)).copy()


@dataclass(eq=False)
class DiscreteField:
    values: np.ndarray
    domain: SlabDomain
    constraint: Constraint = field(default_factory=Free)
    lateral_bc: LateralBC = NoLateral

    @property
    def grid(self):
        return self.values.shape[:3]

    @property
    def spacing(self):
        return tuple(e / (n - 1) for e, n in zip(self.domain.extents, self.grid))

    def coordinates(self):
        return node_coordinates(self.domain, self.grid)

    def boundary_values(self):
        """Prescribed values on lateral nodes (only meaningful for zero/affine)."""
        if self.lateral_bc.kind == "zero":
            return np.zeros_like(self.values)
        if self.lateral_bc.kind == "affine":
            if self.lateral_bc.values is not None:
                return self.lateral_bc.values
            xa = self.coordinates()[..., :2]
            return xa @ self.lateral_bc.xi_alpha.T
        raise ValueError("no prescribed lateral values")

    def copy(self, values=None) -> "DiscreteField":
        return replace(self, values=np.array(self.values if values is None else values, dtype=float))


def seed_field(domain: SlabDomain, grid, constraint: Constraint = None, lateral_bc: LateralBC = NoLateral,
               init="zero") -> DiscreteField:
    """Initial field satisfying the constraint and lateral condition.

    ``init`` is ``"zero"``, ``("affine", xi_alpha)`` or ``("nodal", values)``.
    """
    grid = tuple(int(v) for v in grid)
    if len(grid) != 3 or grid[0] < 3 or grid[1] < 3 or grid[2] < 2:
        raise ValueError("grid must be at least (3, 3, 2)")
    constraint = Free() if constraint is None else constraint
    coords = node_coordinates(domain, grid)
    if isinstance(constraint, TangentSubspace):
        proj = constraint.frame.proj
        datum = []
        if lateral_bc.kind == "affine" and lateral_bc.xi_alpha is not None:
            datum.append(lateral_bc.xi_alpha)
        if isinstance(init, tuple) and init[0] == "affine":
            datum.append(np.asarray(init[1], dtype=float).reshape(3, 2))
        for xi in datum:
            if np.abs(xi - proj @ xi).max() > 1e-10:
                raise IncompatibleBC("affine datum has columns outside the tangent subspace")
    if isinstance(init, str) and init == "zero":
        values = np.zeros(grid + (3,))
    elif init[0] == "affine":
        xi = np.asarray(init[1], dtype=float).reshape(3, 2)
        values = coords[..., :2] @ xi.T
    elif init[0] == "nodal":
        values = np.array(init[1], dtype=float).reshape(grid + (3,))
    else:
        raise ValueError(f"unknown init {init!r}")
    fld = DiscreteField(values, domain, constraint, lateral_bc)
    if lateral_bc.kind in ("zero", "affine"):
        m = lateral_mask(grid)
        fld.values[m] = fld.boundary_values()[m]
    if isinstance(constraint, TangentSubspace):
        fld.values = fld.values @ constraint.frame.proj
    elif isinstance(constraint, ManifoldValued):
        res = np.abs(constraint.manifold.residual(fld.values)).max()
        if res > 1e-8:
            raise IncompatibleBC(f"nodal values off the manifold (residual {res:.2e})")
    return fld


# ---------------------------------------------------------------- densities

@dataclass(frozen=True)
class BaseDensity:
    """f(x_alpha / scale, x3, xi): the cell uses scale 1, a film of thickness h uses scale h."""

    spec: IntegrandSpec
    scale: float = 1.0
    eps: float = DEFAULT_EPS

    @property
    def p(self):
        return self.spec.p

    def coefficient(self, x):
        y = np.array(x, dtype=float)
        if self.scale != 1.0:
            y[..., :2] /= self.scale
        return self.spec.coeff(y)

    def __call__(self, a, xi):
        return self.spec.density(a, xi, self.eps)


@dataclass(frozen=True, eq=False)
class PenalizedDensity:
    """fbar(x, s, xi) with the tangent projector of a fixed frame."""

    pert: PerturbedIntegrand
    frame: TangentFrame
    eps: float = DEFAULT_EPS
    scale: float = 1.0

    @property
    def p(self):
        return self.pert.base.p

    def coefficient(self, x):
        y = np.array(x, dtype=float)
        if self.scale != 1.0:
            y[..., :2] /= self.scale
        return self.pert.base.coeff(y)

    def __call__(self, a, xi):
        return self.pert.density(a, xi, self.frame.proj, self.eps)


Density = Union[BaseDensity, PenalizedDensity]


# ---------------------------------------------------------------- assembly kernels

def _sl(axis, s):
    idx = [slice(None)] * 4
    idx[axis] = s
    return tuple(idx)


def _lin(v, axis, a):
    return (1.0 - a) * v[_sl(axis, slice(None, -1))] + a * v[_sl(axis, slice(1, None))]


def _lin_t(w, axis, a):
    shape = list(w.shape)
    shape[axis] += 1
    out = np.zeros(shape)
    out[_sl(axis, slice(None, -1))] += (1.0 - a) * w
    out[_sl(axis, slice(1, None))] += a * w
    return out


def _dif(v, axis, d):
    return (v[_sl(axis, slice(1, None))] - v[_sl(axis, slice(None, -1))]) / d


def _dif_t(w, axis, d):
    shape = list(w.shape)
    shape[axis] += 1
    out = np.zeros(shape)
    out[_sl(axis, slice(1, None))] += w / d
    out[_sl(axis, slice(None, -1))] -= w / d
    return out


class EnergyAssembler:
    """Energy and nodal gradient of ``norm * int density(x, offset + grad_scaled u)``.

    Coefficients at quadrature points are sampled once at construction.
    ``offset`` is a 3x2 matrix added to the first two gradient columns.
    """

    def __init__(self, domain: SlabDomain, grid, density: Density, offset=None,
                 gradient_scale=(1.0, 1.0, 1.0), quadrature: QuadratureRule = QuadratureRule(2)):
        gs = np.asarray(gradient_scale, dtype=float)
        if gs.shape != (3,) or not (gs > 0).all() or not np.isfinite(gs).all():
            raise ScaleMismatch(f"gradient scale must have three positive entries, got {gradient_scale}")
        self.domain = domain
        self.grid = tuple(int(v) for v in grid)
        self.density = density
        self.scale = gs
        self.offset = np.zeros((3, 3))
        if offset is not None:
            self.offset[:, :2] = np.asarray(offset, dtype=float).reshape(3, 2)
        self.quadrature = quadrature
        self.spacing = np.array([e / (n - 1) for e, n in zip(domain.extents, self.grid)])
        self.elem_volume = float(np.prod(self.spacing))
        ne = [n - 1 for n in self.grid]
        origin = domain.origin
        self._qps = []
        for (a, b, c), w in quadrature.tensor():
            pos = [origin[k] + (np.arange(ne[k]) + q) * self.spacing[k] for k, q in enumerate((a, b, c))]
            x = np.stack(np.meshgrid(*pos, indexing="ij"), axis=-1)
            coeff = density.coefficient(x)
            self._qps.append(((a, b, c), w * self.elem_volume * domain.normalization, coeff))

    def _gradient_at(self, u, a, b, c):
        d = self.spacing
        g1 = _lin(_lin(_dif(u, 0, d[0]), 1, b), 2, c)
        g2 = _lin(_lin(_dif(u, 1, d[1]), 0, a), 2, c)
        g3 = _lin(_lin(_dif(u, 2, d[2]), 0, a), 1, b)
        xi = np.stack([g1 * self.scale[0], g2 * self.scale[1], g3 * self.scale[2]], axis=-1)
        return xi + self.offset

    def _check_smooth(self, xi):
        if self.density.p < 2 and self.density.eps == 0:
            if self.density.__class__ is BaseDensity and self.density.spec.form == "column_weighted":
                zero = np.any(np.sum(xi * xi, axis=-2) == 0)
            else:
                zero = np.any(np.sum(xi * xi, axis=(-2, -1)) == 0)
            if zero:
                raise NonSmoothPoint("zero gradient at a quadrature point with p < 2 and eps = 0")

    def energy(self, u):
        u = np.asarray(u, dtype=float)
        total = 0.0
        for (a, b, c), w, coeff in self._qps:
            val, _ = self.density(coeff, self._gradient_at(u, a, b, c))
            total += w * val.sum()
        return float(total)

    def energy_and_gradient(self, u):
        u = np.asarray(u, dtype=float)
        total = 0.0
        grad = np.zeros_like(u)
        d = self.spacing
        for (a, b, c), w, coeff in self._qps:
            xi = self._gradient_at(u, a, b, c)
            self._check_smooth(xi)
            val, dxi = self.density(coeff, xi)
            total += w * val.sum()
            dxi = w * dxi
            grad += _dif_t(_lin_t(_lin_t(dxi[..., 0] * self.scale[0], 2, c), 1, b), 0, d[0])
            grad += _dif_t(_lin_t(_lin_t(dxi[..., 1] * self.scale[1], 2, c), 0, a), 1, d[1])
            grad += _dif_t(_lin_t(_lin_t(dxi[..., 2] * self.scale[2], 1, b), 0, a), 2, d[2])
        return float(total), grad


def _resolve_gradient_scale(field_: DiscreteField, gradient_scale):
    if gradient_scale is None:
        h = field_.domain.h if field_.domain.kind == "film" else 1.0
        return (1.0, 1.0, 1.0 / h)
    return gradient_scale


def assemble_energy(field_: DiscreteField, density: Density, offset=None, gradient_scale=None,
                    quadrature: QuadratureRule = QuadratureRule(2)) -> float:
    """Integral of the density over the field's domain (divided by t^2 on cells).

    ``gradient_scale`` defaults to (1, 1, 1/h) on films and (1, 1, 1) on cells.
    """
    gs = _resolve_gradient_scale(field_, gradient_scale)
    return EnergyAssembler(field_.domain, field_.grid, density, offset, gs, quadrature).energy(field_.values)


def assemble_gradient(field_: DiscreteField, density: Density, offset=None, gradient_scale=None,
                      quadrature: QuadratureRule = QuadratureRule(2)):
    """Nodal derivative of :func:`assemble_energy`, restricted to the free directions.

    Dirichlet (lateral zero/affine) nodes get zero entries.  For periodic
    fields contributions of image nodes are folded onto their primary node and
    the image entries are zeroed.  Tangent-subspace fields get gradients
    projected onto the subspace.
    """
    gs = _resolve_gradient_scale(field_, gradient_scale)
    _, g = EnergyAssembler(field_.domain, field_.grid, density, offset, gs, quadrature).energy_and_gradient(
        field_.values)
    kind = field_.lateral_bc.kind
    if kind in ("zero", "affine"):
        g[lateral_mask(field_.grid)] = 0.0
    elif kind == "periodic":
        g = _fold_periodic(g)
        n1, n2 = field_.grid[:2]
        full = np.zeros(field_.grid + (3,))
        full[: n1 - 1, : n2 - 1] = g
        g = full
    if isinstance(field_.constraint, TangentSubspace):
        g = g @ field_.constraint.frame.proj
    return g


# ---------------------------------------------------------------- linear parametrizations

def _fold_periodic(g):
    g = np.array(g)
    g[0] += g[-1]
    g = g[:-1]
    g[:, 0] += g[:, -1]
    return g[:, :-1]


def _unfold_periodic(v):
    v = np.concatenate([v, v[:1]], axis=0)
    return np.concatenate([v, v[:, :1]], axis=1)


class LinearParametrization:
    """Map between a flat unknown vector and full nodal arrays for linear constraints.

    Handles zero/affine lateral data, periodic identification and the tangent
    coordinates of a :class:`TangentSubspace` constraint.
    """

    def __init__(self, template: DiscreteField):
        self.template = template
        self.grid = template.grid
        self.kind = template.lateral_bc.kind
        c = template.constraint
        if isinstance(c, ManifoldValued):
            raise TypeError("manifold-valued fields are not linearly parametrized")
        self.basis = c.frame.basis if isinstance(c, TangentSubspace) else np.eye(3)
        self.ncomp = self.basis.shape[1]
        if self.kind in ("zero", "affine"):
            self.free = ~lateral_mask(self.grid)
            self.fixed = template.boundary_values()
            self.fixed = np.where(self.free[..., None], 0.0, self.fixed)
        elif self.kind == "periodic":
            n1, n2, n3 = self.grid
            self.reduced_shape = (n1 - 1, n2 - 1, n3)
        else:
            self.free = np.ones(self.grid, dtype=bool)
            self.fixed = np.zeros(self.grid + (3,))

    @property
    def size(self):
        if self.kind == "periodic":
            return int(np.prod(self.reduced_shape)) * self.ncomp
        return int(self.free.sum()) * self.ncomp

    def to_values(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "periodic":
            coords = x.reshape(self.reduced_shape + (self.ncomp,))
            return _unfold_periodic(coords @ self.basis.T)
        u = self.fixed.copy()
        u[self.free] = x.reshape(-1, self.ncomp) @ self.basis.T
        return u

    def from_values(self, u):
        u = np.asarray(u, dtype=float)
        if self.kind == "periodic":
            return (u[:-1, :-1] @ self.basis).ravel()
        return (u[self.free] @ self.basis).ravel()

    def pullback(self, g):
        if self.kind == "periodic":
            return (_fold_periodic(g) @ self.basis).ravel()
        return (g[self.free] @ self.basis).ravel()


# ---------------------------------------------------------------- refinement and I/O

def _refine_axis(v, axis):
    n = v.shape[axis]
    shape = list(v.shape)
    shape[axis] = 2 * n - 1
    out = np.empty(shape)
    even = [slice(None)] * v.ndim
    even[axis] = slice(0, None, 2)
    odd = [slice(None)] * v.ndim
    odd[axis] = slice(1, None, 2)
    out[tuple(even)] = v
    lo = [slice(None)] * v.ndim
    lo[axis] = slice(None, -1)
    hi = [slice(None)] * v.ndim
    hi[axis] = slice(1, None)
    out[tuple(odd)] = 0.5 * (v[tuple(lo)] + v[tuple(hi)])
    return out


def refine_field(field_: DiscreteField) -> DiscreteField:
    """Trilinear prolongation onto the dyadically refined grid (2N - 1 nodes per axis)."""
    v = field_.values
    for axis in range(3):
        v = _refine_axis(v, axis)
    bc = field_.lateral_bc
    if bc.values is not None:
        bv = bc.values
        for axis in range(3):
            bv = _refine_axis(bv, axis)
        bc = LateralBC(bc.kind, bc.xi_alpha, bv)
    out = DiscreteField(v, field_.domain, field_.constraint, bc)
    if isinstance(out.constraint, TangentSubspace):
        out.values = out.values @ out.constraint.frame.proj
    elif isinstance(out.constraint, ManifoldValued):
        out.values = out.constraint.manifold.project(out.values)
    return out


def write_field(field_: DiscreteField, path) -> None:
    """Text checkpoint: header ``N1,N2,N3,Lx,Ly`` then one ``x y z vx vy vz`` line per node."""
    n1, n2, n3 = field_.grid
    xyz = field_.coordinates().reshape(-1, 3)
    vals = field_.values.reshape(-1, 3)
    lines = [f"{n1},{n2},{n3},{field_.domain.lx!r},{field_.domain.ly!r}"]
    lines += [" ".join(repr(float(v)) for v in row) for row in np.hstack([xyz, vals])]
    from .io import atomic_write
    atomic_write(path, "\n".join(lines) + "\n")


def read_field(path, domain: SlabDomain = None) -> DiscreteField:
    lines = Path(path).read_text().strip().split("\n")
    head = lines[0].split(",")
    n1, n2, n3 = (int(v) for v in head[:3])
    lx, ly = float(head[3]), float(head[4])
    data = np.array([[float(v) for v in ln.split()] for ln in lines[1:]])
    if domain is None:
        domain = SlabDomain("film", lx, ly, h=1.0)
    return DiscreteField(data[:, 3:].reshape(n1, n2, n3, 3), domain)
