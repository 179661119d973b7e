"""Thin-film energies, their manifold-constrained minimization and the recovery fields.

The film occupies the rescaled slab ``omega x (-1/2, 1/2)`` with omega the unit
square centred at the origin.  Its energy is

    I_h(u) = int f(x_alpha / h, x3, [grad_alpha u | grad_3 u / h]) dx

over fields with values in M.  The limit functional integrates a tabulated
homogenized density over planar (x3-independent) fields.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import _solver
from .cell import DensityTable, frame_near
from .discretization import (
    DEFAULT_EPS,
    BaseDensity,
    DiscreteField,
    EnergyAssembler,
    LateralBC,
    ManifoldValued,
    QuadratureRule,
    SlabDomain,
    lateral_mask,
    node_coordinates,
)
from .geometry import AmbiguousProjection, ManifoldDescriptor, tangent_bases, tangent_frame
from .integrand import IntegrandSpec

log = logging.getLogger(__name__)

BC_TOL = 1e-10


class BCViolation(ValueError):
    pass


class PreconditionViolated(ValueError):
    pass


@dataclass(eq=False)
class FilmProblem:
    """Film of thickness h with lateral datum x_alpha -> Pi(s0 + xi0 x_alpha)."""

    integrand: IntegrandSpec
    manifold: ManifoldDescriptor
    h: float
    s0: np.ndarray
    xi0: np.ndarray  # 3x2, columns in T_{s0}(M)
    grid: tuple = (17, 17, 3)
    eps: float = DEFAULT_EPS
    quadrature: int = 2

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError("h must be positive")
        self.s0 = np.asarray(self.s0, dtype=float)
        self.xi0 = np.asarray(self.xi0, dtype=float).reshape(3, 2)
        self.grid = tuple(int(v) for v in self.grid)
        fr = tangent_frame(self.manifold, self.s0)
        if np.abs(self.xi0 - fr.proj @ self.xi0).max() > 1e-10:
            raise ValueError("datum gradient xi0 must have columns in the tangent space at s0")
        try:
            self.datum(node_coordinates(self.domain, self.grid)[..., :2])
        except AmbiguousProjection as exc:
            raise ValueError("boundary datum leaves the projection neighbourhood") from exc

    @property
    def domain(self) -> SlabDomain:
        return SlabDomain.film(self.h)

    @property
    def gradient_scale(self):
        return (1.0, 1.0, 1.0 / self.h)

    def datum(self, xa):
        xa = np.asarray(xa, dtype=float)
        return self.manifold.project(self.s0 + xa @ self.xi0.T)

    def boundary_values(self):
        return self.datum(node_coordinates(self.domain, self.grid)[..., :2])

    def assembler(self) -> EnergyAssembler:
        return EnergyAssembler(self.domain, self.grid, BaseDensity(self.integrand, self.h, self.eps), None,
                               self.gradient_scale, QuadratureRule(self.quadrature))

    def with_h(self, h: float, grid=None) -> "FilmProblem":
        return FilmProblem(self.integrand, self.manifold, h, self.s0, self.xi0,
                           self.grid if grid is None else grid, self.eps, self.quadrature)


def film_grid(h: float, per_period: int = 8, n3: int = 2):
    """Node counts resolving the in-plane period h with ``per_period`` elements."""
    ne = per_period / h
    if abs(ne - round(ne)) > 1e-9:
        raise ValueError("per_period / h must be an integer")
    return (int(round(ne)) + 1, int(round(ne)) + 1, n3 + 1)


def datum_extension(problem: FilmProblem) -> DiscreteField:
    """The x3-independent extension of the lateral datum to the whole film."""
    bv = problem.boundary_values()
    return DiscreteField(bv.copy(), problem.domain, ManifoldValued(problem.manifold),
                         LateralBC("affine", problem.xi0, bv))


def _values(u):
    return u.values if isinstance(u, DiscreteField) else np.asarray(u, dtype=float)


def eval_film_energy(u, problem: FilmProblem) -> float:
    """I_h(u) for a manifold-valued field matching the lateral datum."""
    vals = _values(u)
    if vals.shape[:3] != problem.grid:
        raise ValueError(f"field grid {vals.shape[:3]} differs from problem grid {problem.grid}")
    m = lateral_mask(problem.grid)
    err = np.abs(vals[m] - problem.boundary_values()[m]).max()
    if err > BC_TOL:
        raise BCViolation(f"lateral datum violated by {err:.3e}")
    return problem.assembler().energy(vals)


# ---------------------------------------------------------------- manifold descent

@dataclass
class ManifoldDescentResult:
    values: np.ndarray
    energy: float
    residual: float
    iterations: int
    converged: bool
    history: list = field(default_factory=list)


def _tangent_residual(manifold, values, grad, free):
    n = manifold.normal(values[free])
    g = grad[free]
    gt = g - np.sum(g * n, axis=-1, keepdims=True) * n
    return float(np.sqrt(np.sum(gt * gt, axis=-1)).max(initial=0.0))


def minimize_on_manifold(energy_grad, u0, free, manifold: ManifoldDescriptor, tol=1e-8, max_iter=20000,
                         rounds=8, method="lbfgs"):
    """Minimize over nodal values in M, the nodes where ``free`` is False held fixed.

    Each round parametrizes the free nodes as ``Pi(u_ref + B v)`` with B an
    orthonormal tangent basis at the reference values and descends in v from
    v = 0.  Rounds recentre the chart until the tangent-projected gradient
    falls below ``tol`` or no progress is made.
    """
    u = np.array(u0, dtype=float)
    e, g = energy_grad(u)
    history = [(0, float(e), _tangent_residual(manifold, u, g, free))]
    total_it = 0
    for _ in range(rounds):
        ref = u[free]
        basis = tangent_bases(manifold.normal(ref))

        def chart(v):
            x = ref + np.einsum("fij,fj->fi", basis, v.reshape(-1, 2))
            return x, manifold.project(x)

        def fun_grad(v):
            x, p = chart(v)
            w = u.copy()
            w[free] = p
            e, g = energy_grad(w)
            jac = manifold.projection_jacobian(x)
            gv = np.einsum("fki,fk->fi", jac, g[free])
            return e, np.einsum("fij,fi->fj", basis, gv).ravel()

        budget = max_iter - total_it
        if budget <= 0:
            break
        if method == "lbfgs":
            res = _solver.lbfgs(fun_grad, np.zeros(2 * ref.shape[0]), tol, budget)
        else:
            res = _solver.armijo_descent(fun_grad, np.zeros(2 * ref.shape[0]), tol, budget)
        for it, en, _ in res.history[1:]:
            history.append((total_it + it, en, np.nan))
        total_it += max(res.iterations, 1)
        u[free] = chart(res.x)[1]
        e, g = energy_grad(u)
        r = _tangent_residual(manifold, u, g, free)
        history.append((total_it, float(e), r))
        if r <= tol or res.iterations == 0:
            break
    e, g = energy_grad(u)
    r = _tangent_residual(manifold, u, g, free)
    return ManifoldDescentResult(u, float(e), r, total_it, r <= tol, history)


@dataclass(eq=False)
class FilmResult:
    field: DiscreteField
    energy: float
    residual: float
    iterations: int
    converged: bool
    history: list = field(default_factory=list, repr=False)

    @property
    def flags(self):
        return [] if self.converged else ["MaxIterations"]


def minimize_film(problem: FilmProblem, initial: Optional[DiscreteField] = None, tol: float = 1e-8,
                  max_iter: int = 20000, method: str = "lbfgs") -> FilmResult:
    """Descend I_h over manifold-valued fields with the lateral datum, retracting by Pi.

    Starts from the datum extension unless ``initial`` is given; the returned
    energy never exceeds that of the starting field.
    """
    start = datum_extension(problem) if initial is None else initial
    u0 = _values(start).copy()
    eval_film_energy(u0, problem)
    free = ~lateral_mask(problem.grid)
    asm = problem.assembler()
    res = minimize_on_manifold(asm.energy_and_gradient, u0, free, problem.manifold, tol, max_iter, method=method)
    fld = DiscreteField(res.values, problem.domain, ManifoldValued(problem.manifold),
                        LateralBC("affine", problem.xi0, problem.boundary_values()))
    if not res.converged:
        log.info("film minimization stopped at residual %.3e (h=%g)", res.residual, problem.h)
    return FilmResult(fld, res.energy, res.residual, res.iterations, res.converged, res.history)


# ---------------------------------------------------------------- planar fields and the limit energy

@dataclass(eq=False)
class PlanarField:
    """Manifold-valued nodal field on omega, independent of x3 by construction."""

    values: np.ndarray  # (N1, N2, 3)
    manifold: ManifoldDescriptor
    lx: float = 1.0
    ly: float = 1.0

    @property
    def grid(self):
        return self.values.shape[:2]

    def coordinates(self):
        n1, n2 = self.grid
        x = np.linspace(-self.lx / 2, self.lx / 2, n1)
        y = np.linspace(-self.ly / 2, self.ly / 2, n2)
        return np.stack(np.meshgrid(x, y, indexing="ij"), axis=-1)

    def at(self, xa):
        """Bilinear interpolation at in-plane points (..., 2) inside omega."""
        xa = np.asarray(xa, dtype=float)
        n1, n2 = self.grid
        u = (xa[..., 0] + self.lx / 2) / self.lx * (n1 - 1)
        v = (xa[..., 1] + self.ly / 2) / self.ly * (n2 - 1)
        i = np.clip(np.floor(u).astype(int), 0, n1 - 2)
        j = np.clip(np.floor(v).astype(int), 0, n2 - 2)
        a = (u - i)[..., None]
        b = (v - j)[..., None]
        U = self.values
        return ((1 - a) * (1 - b) * U[i, j] + a * (1 - b) * U[i + 1, j]
                + (1 - a) * b * U[i, j + 1] + a * b * U[i + 1, j + 1])

    def to_film(self, domain: SlabDomain, grid) -> DiscreteField:
        """Constant-in-x3 film field; nodes off the planar grid are interpolated and projected."""
        xa = node_coordinates(domain, grid)[..., :2]
        if tuple(grid[:2]) == tuple(self.grid):
            vals = np.broadcast_to(self.values[:, :, None, :], tuple(grid) + (3,)).copy()
        else:
            vals = self.manifold.project(self.at(xa))
        return DiscreteField(vals, domain, ManifoldValued(self.manifold))


def planar_datum(problem: FilmProblem, grid) -> PlanarField:
    n1, n2 = grid
    x = np.linspace(-0.5, 0.5, n1)
    y = np.linspace(-0.5, 0.5, n2)
    xa = np.stack(np.meshgrid(x, y, indexing="ij"), axis=-1)
    return PlanarField(problem.datum(xa), problem.manifold)


def _lin2(v, axis, a):
    lo = [slice(None)] * v.ndim
    hi = [slice(None)] * v.ndim
    lo[axis], hi[axis] = slice(None, -1), slice(1, None)
    return (1 - a) * v[tuple(lo)] + a * v[tuple(hi)]


def _lin2_t(w, axis, a):
    shape = list(w.shape)
    shape[axis] += 1
    out = np.zeros(shape)
    lo = [slice(None)] * w.ndim
    hi = [slice(None)] * w.ndim
    lo[axis], hi[axis] = slice(None, -1), slice(1, None)
    out[tuple(lo)] += (1 - a) * w
    out[tuple(hi)] += a * w
    return out


def _dif2(v, axis, d):
    lo = [slice(None)] * v.ndim
    hi = [slice(None)] * v.ndim
    lo[axis], hi[axis] = slice(None, -1), slice(1, None)
    return (v[tuple(hi)] - v[tuple(lo)]) / d


def _dif2_t(w, axis, d):
    shape = list(w.shape)
    shape[axis] += 1
    out = np.zeros(shape)
    lo = [slice(None)] * w.ndim
    hi = [slice(None)] * w.ndim
    lo[axis], hi[axis] = slice(None, -1), slice(1, None)
    out[tuple(hi)] += w / d
    out[tuple(lo)] -= w / d
    return out


@dataclass
class LimitEnergyDetails:
    energy: float
    out_of_range: int  # quadrature points outside the table
    max_drift: float  # largest normal component of grad u removed before lookup
    quadrature_points: int


class LimitEnergy:
    """Table-based limit energy of planar fields with its exact nodal gradient.

    At each quadrature point the gradient is expressed in a tangent frame at
    the interpolated value, obtained by rotating the nearest base point's
    frame; the normal part of the discrete gradient is discarded.
    """

    def __init__(self, table: DensityTable, grid, lx=1.0, ly=1.0, quadrature: int = 2, fd_step: float = 1e-7):
        self.table = table
        self.manifold = table.manifold
        self.grid = tuple(grid)
        self.spacing = (lx / (grid[0] - 1), ly / (grid[1] - 1))
        self.rule = QuadratureRule(quadrature)
        self.area = self.spacing[0] * self.spacing[1]
        self.fd_step = fd_step

    def _coords(self, uq, G, k):
        n = self.manifold.normal(uq)
        bq = np.empty(uq.shape + (2,))
        for kk in np.unique(k):
            sel = k == kk
            bq[sel] = frame_near(self.table, int(kk), n[sel])
        c = np.einsum("...ai,...aj->...ij", bq, G)
        return c.reshape(c.shape[:-2] + (-1,)), bq, n

    def _density(self, c, k):
        val = np.empty(c.shape[:-1])
        gc = np.empty(c.shape)
        out = np.zeros(c.shape[:-1], dtype=bool)
        for kk in np.unique(k):
            sel = k == kk
            v, g, o = self.table.interpolate(int(kk), c[sel])
            val[sel], gc[sel], out[sel] = v, g, o
        return val, gc, out

    def evaluate(self, U, need_grad=True):
        U = np.asarray(U, dtype=float)
        d = self.spacing
        total = 0.0
        grad = np.zeros_like(U)
        n_out = 0
        drift = 0.0
        nq = 0
        pts, wts = self.rule.points, self.rule.weights
        for ia, a in enumerate(pts):
            for ib, b in enumerate(pts):
                w = wts[ia] * wts[ib] * self.area
                uq = _lin2(_lin2(U, 0, a), 1, b)
                G = np.stack([_lin2(_dif2(U, 0, d[0]), 1, b), _lin2(_dif2(U, 1, d[1]), 0, a)], axis=-1)
                k = self.table.nearest_index(uq)
                c, bq, n = self._coords(uq, G, k)
                val, gc, out = self._density(c, k)
                total += w * val.sum()
                n_out += int(out.sum())
                nq += out.size
                drift = max(drift, float(np.abs(np.einsum("...a,...aj->...j", n, G)).max(initial=0.0)))
                if not need_grad:
                    continue
                gcm = gc.reshape(gc.shape[:-1] + (2, 2))
                dG = w * np.einsum("...ai,...ij->...aj", bq, gcm)
                du = np.zeros_like(uq)
                for l in range(3):
                    e = np.zeros(3)
                    e[l] = self.fd_step
                    cp, _, _ = self._coords(uq + e, G, k)
                    cm, _, _ = self._coords(uq - e, G, k)
                    du[..., l] = w * np.sum(gc * (cp - cm), axis=-1) / (2 * self.fd_step)
                grad += _lin2_t(_lin2_t(du, 1, b), 0, a)
                grad += _dif2_t(_lin2_t(dG[..., 0], 1, b), 0, d[0])
                grad += _dif2_t(_lin2_t(dG[..., 1], 0, a), 1, d[1])
        return float(total), grad, LimitEnergyDetails(float(total), n_out, drift, nq)


def eval_limit_energy(u: PlanarField, table: DensityTable, quadrature: int = 2, details: bool = False):
    """Integral over omega of the tabulated homogenized density at (u, grad_alpha u)."""
    if table.manifold != u.manifold:
        raise ValueError("table and field use different manifolds")
    le = LimitEnergy(table, u.grid, u.lx, u.ly, quadrature)
    e, _, info = le.evaluate(u.values, need_grad=False)
    if info.out_of_range:
        log.warning("%d quadrature points outside the table range", info.out_of_range)
    return info if details else e


@dataclass(eq=False)
class LimitResult:
    field: PlanarField
    energy: float
    residual: float
    iterations: int
    converged: bool
    out_of_range: int


def minimize_limit(problem: FilmProblem, table: DensityTable, grid=(17, 17), tol: float = 1e-9,
                   max_iter: int = 20000, interpolation: str = "cubic") -> LimitResult:
    """Minimize the table-based limit energy over planar fields with the film's lateral datum.

    The descent runs on the table read through ``interpolation``; the
    default C^1 cubic rule avoids the gradient jumps of the multilinear
    interpolant at grid nodes, where a smooth descent stalls.  The reported
    energy uses the table's own rule.
    """
    u0 = planar_datum(problem, grid)
    le = LimitEnergy(replace(table, interpolation=interpolation), grid)
    n1, n2 = grid
    free = np.zeros(grid, dtype=bool)
    free[1:-1, 1:-1] = True

    def energy_grad(U):
        e, g, _ = le.evaluate(U)
        return e, g

    res = minimize_on_manifold(energy_grad, u0.values, free, problem.manifold, tol, max_iter)
    fld = PlanarField(res.values, problem.manifold)
    info = LimitEnergy(table, grid).evaluate(res.values, need_grad=False)[2]
    return LimitResult(fld, info.energy, res.residual, res.iterations, res.converged, info.out_of_range)


# ---------------------------------------------------------------- recovery fields

def smoothstep_cutoff(r, delta: float):
    """C^1 radial cut-off: 1 on [0, delta/4], 0 on [delta/2, inf), |d/dr| <= 6/delta."""
    x = np.clip((np.asarray(r, dtype=float) - delta / 4) / (delta / 4), 0.0, 1.0)
    return 1.0 - x * x * (3.0 - 2.0 * x)


CUTOFF_GRADIENT_BOUND = 6.0  # |grad zeta| <= CUTOFF_GRADIENT_BOUND / delta


@dataclass(eq=False)
class RecoveryParams:
    s0: np.ndarray
    phi: DiscreteField  # periodic cell minimizer on (jQ')_{,1}
    delta: float = 0.45
    lateral_layer: bool = False  # blend to the datum over a layer of width h at the lateral boundary

    def __post_init__(self):
        self.s0 = np.asarray(self.s0, dtype=float)
        if not 0 < self.delta < 1:
            raise ValueError("cut-off radius delta must lie in (0, 1)")


def periodic_cell_values(phi: DiscreteField, y):
    """Trilinear evaluation of a cell field at points y (..., 3), extended periodically in y_alpha."""
    y = np.asarray(y, dtype=float)
    t = phi.domain.lx
    n1, n2, n3 = phi.grid
    dx = t / (n1 - 1)
    dz = 1.0 / (n3 - 1)
    ya = np.mod(y[..., :2] + t / 2, t)
    u = ya[..., 0] / dx
    v = ya[..., 1] / dx
    w = np.clip((y[..., 2] + 0.5) / dz, 0.0, n3 - 1)
    i = np.clip(np.floor(u + 1e-12).astype(int), 0, n1 - 2)
    j = np.clip(np.floor(v + 1e-12).astype(int), 0, n2 - 2)
    k = np.clip(np.floor(w + 1e-12).astype(int), 0, n3 - 2)
    a = np.clip(u - i, 0, 1)[..., None]
    b = np.clip(v - j, 0, 1)[..., None]
    c = np.clip(w - k, 0, 1)[..., None]
    P = phi.values
    out = 0.0
    for di, wa in ((0, 1 - a), (1, a)):
        for dj, wb in ((0, 1 - b), (1, b)):
            for dk, wc in ((0, 1 - c), (1, c)):
                out = out + wa * wb * wc * P[i + di, j + dj, k + dk]
    return out


def recovery_smallness(params: RecoveryParams, h: float) -> float:
    """The quantity h ||phi||_inf max(||grad zeta||_inf, 2/delta), required to be < 1."""
    phimax = float(np.sqrt(np.sum(params.phi.values ** 2, axis=-1)).max())
    return h * phimax * max(CUTOFF_GRADIENT_BOUND / params.delta, 2.0 / params.delta)


def build_recovery_sequence(u: PlanarField, params: RecoveryParams, h: float, grid) -> DiscreteField:
    """u_h = Pi(u(x_alpha) + h zeta(u(x_alpha) - s0) phi(x_alpha / h, x3)) on the film of thickness h."""
    M = u.manifold
    reach = M.reach()
    if not 2 * params.delta < reach:
        raise PreconditionViolated("ball B(s0, 2 delta) leaves the projection neighbourhood")
    q = recovery_smallness(params, h)
    if not q < 1:
        raise PreconditionViolated(f"smallness condition fails: {q:.3f} >= 1")
    domain = SlabDomain.film(h)
    base = u.to_film(domain, grid)
    X = node_coordinates(domain, grid)
    uv = base.values
    zeta = smoothstep_cutoff(np.linalg.norm(uv - params.s0, axis=-1), params.delta)
    y = X.copy()
    y[..., :2] /= h
    ph = periodic_cell_values(params.phi, y)
    amp = h * zeta
    if params.lateral_layer:
        dist = np.minimum(0.5 - np.abs(X[..., 0]), 0.5 - np.abs(X[..., 1]))
        amp = amp * (1.0 - smoothstep_cutoff(dist, 4 * h))
    off = amp[..., None] * ph
    moved = np.any(off != 0, axis=-1)
    vals = uv.copy()
    vals[moved] = M.project(uv[moved] + off[moved])  # untouched nodes keep u exactly
    return DiscreteField(vals, domain, ManifoldValued(M))


@dataclass
class RecoveryDiagnostics:
    h: list
    sup_dist: list
    energy: list
    limit_energy: float

    @property
    def ratios(self):
        """sup |u_k - u| / h_k for each k; a stable ratio is the uniform O(h) estimate."""
        return [d / h for d, h in zip(self.sup_dist, self.h)]

    def to_csv(self) -> str:
        from .io import csv_text
        rows = [(k, h, d, e, self.limit_energy) for k, (h, d, e) in enumerate(zip(self.h, self.sup_dist, self.energy))]
        return csv_text(["k", "h_k", "sup_dist", "energy", "limit_energy"], rows)


def recovery_diagnostics(problem: FilmProblem, u: PlanarField, params: RecoveryParams, table: DensityTable,
                         h_list, per_period: int = 8, n3: int = 2) -> RecoveryDiagnostics:
    """Sup distance to u and film energy of the recovery fields along ``h_list``.

    Each film grid resolves the period h with ``per_period`` elements; u is
    evaluated by interpolation where the grids differ.
    """
    limit = eval_limit_energy(u, table)
    hs, dist, energy = [], [], []
    for h in h_list:
        grid = film_grid(h, per_period, n3)
        uk = build_recovery_sequence(u, params, h, grid)
        base = u.to_film(uk.domain, grid).values
        hs.append(float(h))
        dist.append(float(np.sqrt(np.sum((uk.values - base) ** 2, axis=-1)).max()))
        energy.append(problem.with_h(h, grid).assembler().energy(uk.values))
    return RecoveryDiagnostics(hs, dist, energy, float(limit))
