"""Cell problems for the tangential homogenized density and interpolable tables.

Two finite-cell formulations are solved on ``(tQ')_{,1}``:

* ``constrained``: test fields valued in the fixed tangent plane T_s(M),
  density f;
* ``penalized``: free R^3-valued test fields with the perturbed density
  fbar(x, s, xi) = f(x, P_s xi) + |xi - P_s xi|^p.

The lateral condition is either ``"zero"`` (vanishing trace on the lateral
boundary of the cell) or ``"periodic"``.  For densities convex in xi, as is the
whole catalogue, the periodic single-cell infimum coincides with the limit of
the zero-trace infima as t grows and does not depend on the integer t, so
``"periodic"`` is the default way of evaluating the homogenized density.  The
zero-trace infima converge to it from above at rate O(1/t).
"""
from __future__ import annotations

import csv
import io
import itertools
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.sparse.linalg import LinearOperator, cg

from . import _solver
from .discretization import (
    DEFAULT_EPS,
    BaseDensity,
    DiscreteField,
    EnergyAssembler,
    Free,
    LateralBC,
    LinearParametrization,
    PenalizedDensity,
    QuadratureRule,
    SlabDomain,
    TangentSubspace,
)
from .geometry import AffinePlane, ManifoldDescriptor, TangentFrame, manifold_from_dict, tangent_bases, tangent_frame
from .integrand import IntegrandSpec, PerturbedIntegrand, growth_constants, integrand_from_dict

log = logging.getLogger(__name__)

ENVELOPE_SLACK = 1e-8


class IncompatibleProblem(ValueError):
    """The macroscopic gradient has columns outside T_s(M)."""


@dataclass(eq=False)
class CellProblem:
    integrand: IntegrandSpec
    manifold: ManifoldDescriptor
    s: np.ndarray
    xi_alpha: np.ndarray  # 3x2, columns in T_s(M)
    t: int = 1
    formulation: str = "penalized"
    n: int = 32
    n3: Optional[int] = None  # vertical elements; default max(2, coefficient pieces in x3)
    lateral: str = "periodic"
    eps: float = DEFAULT_EPS
    quadrature: int = 2
    tol: float = 1e-8
    max_iter: int = 20000
    method: str = "lbfgs"

    def __post_init__(self):
        self.s = np.asarray(self.s, dtype=float)
        self.xi_alpha = np.asarray(self.xi_alpha, dtype=float).reshape(3, 2)
        if int(self.t) != self.t or self.t < 1:
            raise ValueError("t must be a positive integer")
        if self.n < 4:
            raise ValueError("grid resolution n must be at least 4")
        if self.formulation not in ("constrained", "penalized"):
            raise ValueError(f"unknown formulation {self.formulation!r}")
        if self.lateral not in ("zero", "periodic"):
            raise ValueError("cell lateral condition must be 'zero' or 'periodic'")
        if self.n3 is None:
            self.n3 = max(2, self.integrand.coeff.vertical_pieces())

    @property
    def frame(self) -> TangentFrame:
        return tangent_frame(self.manifold, self.s)

    @property
    def grid(self):
        return (self.t * self.n + 1, self.t * self.n + 1, self.n3 + 1)


@dataclass(eq=False)
class CellSolution:
    value: float
    argmin: DiscreteField
    gradient_residual: float
    iterations: int
    converged: bool
    formulation: str
    t: int
    n: int
    grid: tuple
    lateral: str
    history: list = field(default_factory=list, repr=False)

    def log_records(self) -> str:
        """Solver log as ``iter,energy,residual`` lines."""
        out = ["iter,energy,residual"]
        out += [f"{i},{e!r},{r!r}" for i, e, r in self.history]
        return "\n".join(out) + "\n"


def _cell_setup(problem: CellProblem):
    frame = problem.frame
    if np.abs(problem.xi_alpha - frame.proj @ problem.xi_alpha).max() > 1e-10:
        raise IncompatibleProblem("xi_alpha has columns outside the tangent space")
    if not problem.integrand.coeff.aligned(problem.n):
        log.warning("grid resolution %d does not align with coefficient interfaces", problem.n)
    domain = SlabDomain.cell(problem.t)
    bc = LateralBC(problem.lateral)
    if problem.formulation == "constrained":
        constraint = TangentSubspace(frame)
        density = BaseDensity(problem.integrand, 1.0, problem.eps)
    else:
        constraint = Free()
        density = PenalizedDensity(PerturbedIntegrand(problem.integrand, problem.manifold), frame, problem.eps)
    template = DiscreteField(np.zeros(problem.grid + (3,)), domain, constraint, bc)
    assembler = EnergyAssembler(domain, problem.grid, density, problem.xi_alpha, (1.0, 1.0, 1.0),
                                QuadratureRule(problem.quadrature))
    return template, assembler


def solve_cell(problem: CellProblem, initial: Optional[DiscreteField] = None) -> CellSolution:
    """Minimize the normalized cell energy over admissible test fields, starting from zero.

    Non-convergence within ``max_iter`` is reported through ``converged`` and
    the best iterate is returned.
    """
    template, assembler = _cell_setup(problem)
    param = LinearParametrization(template)

    def fun_grad(x):
        e, g = assembler.energy_and_gradient(param.to_values(x))
        return e, param.pullback(g)

    x0 = np.zeros(param.size) if initial is None else param.from_values(initial.values)
    if problem.method == "lbfgs":
        res = _solver.lbfgs(fun_grad, x0, problem.tol, problem.max_iter)
    elif problem.method == "gradient":
        res = _solver.armijo_descent(fun_grad, x0, problem.tol, problem.max_iter)
    else:
        raise ValueError(f"unknown method {problem.method!r}")
    if not res.converged:
        log.warning("cell solve stopped at residual %.3e after %d iterations", res.residual, res.iterations)
    argmin = template.copy(param.to_values(res.x))
    return CellSolution(max(res.fun, 0.0), argmin, res.residual, res.iterations, res.converged,
                        problem.formulation, problem.t, problem.n, problem.grid, problem.lateral, res.history)


def zero_field_energy(problem: CellProblem) -> float:
    """Normalized energy of the admissible test field phi = 0."""
    template, assembler = _cell_setup(problem)
    return assembler.energy(template.values)


@dataclass
class EqualityReport:
    constrained: float
    penalized: float
    gap: float
    converged: bool


def check_constrained_penalized_equality(problem: CellProblem) -> EqualityReport:
    """Solve both formulations on identical grids and report their relative gap."""
    base = {k: getattr(problem, k) for k in problem.__dataclass_fields__}
    sc = solve_cell(CellProblem(**{**base, "formulation": "constrained"}))
    sp = solve_cell(CellProblem(**{**base, "formulation": "penalized"}))
    gap = abs(sc.value - sp.value) / max(sc.value, 1e-12)
    return EqualityReport(sc.value, sp.value, gap, sc.converged and sp.converged)


def solve_classical_cell(integrand: IntegrandSpec, F, t: int = 1, n: int = 32, n3: Optional[int] = None,
                         lateral: str = "periodic", eps: float = DEFAULT_EPS, tol: float = 1e-10,
                         quadrature: int = 2) -> float:
    """Unconstrained 3D-2D cell value for R^2-valued test fields and in-plane gradient ``F`` (2x2).

    The test field and macroscopic gradient are embedded in the first two
    target rows.  For p = 2 the energy is quadratic and the Euler-Lagrange
    system is solved by conjugate gradients on Hessian-vector products;
    otherwise L-BFGS is used.
    """
    F = np.asarray(F, dtype=float).reshape(2, 2)
    xi = np.zeros((3, 2))
    xi[:2] = F
    plane = AffinePlane()
    frame = tangent_frame(plane, np.zeros(3))
    n3 = max(2, integrand.coeff.vertical_pieces()) if n3 is None else n3
    grid = (t * n + 1, t * n + 1, n3 + 1)
    domain = SlabDomain.cell(t)
    template = DiscreteField(np.zeros(grid + (3,)), domain, TangentSubspace(frame), LateralBC(lateral))
    param = LinearParametrization(template)
    assembler = EnergyAssembler(domain, grid, BaseDensity(integrand, 1.0, eps), xi, (1, 1, 1),
                                QuadratureRule(quadrature))

    def fun_grad(x):
        e, g = assembler.energy_and_gradient(param.to_values(x))
        return e, param.pullback(g)

    if integrand.p == 2:
        e0, g0 = fun_grad(np.zeros(param.size))
        op = LinearOperator((param.size, param.size), matvec=lambda v: fun_grad(v)[1] - g0, dtype=float)
        x, _ = cg(op, -g0, rtol=tol, atol=0.0, maxiter=20 * param.size)
        return fun_grad(x)[0]
    return _solver.lbfgs(fun_grad, np.zeros(param.size), tol=1e-9).fun


# ---------------------------------------------------------------- homogenized density

@dataclass
class HomDensityEstimate:
    estimate: float
    values: dict  # t -> value
    converged: bool
    solver_converged: bool


def estimate_hom_density(integrand: IntegrandSpec, manifold: ManifoldDescriptor, s, xi_alpha,
                         t_list: Sequence[int] = (1, 2, 4), n: int = 32, **cell_options) -> HomDensityEstimate:
    """Cell solves (penalized unless overridden) over increasing t; the estimate is the value at the largest t.

    The convergence flag requires the last two values to agree within
    max(1% of the last, 1e-8); with a single t it is left unset.
    """
    t_list = [int(t) for t in t_list]
    if any(b <= a for a, b in zip(t_list, t_list[1:])):
        raise ValueError("t_list must be strictly increasing")
    opts = {"formulation": "penalized", **cell_options}
    values = {}
    ok = True
    for t in t_list:
        sol = solve_cell(CellProblem(integrand, manifold, s, xi_alpha, t=t, n=n, **opts))
        values[t] = sol.value
        ok = ok and sol.converged
    return HomDensityEstimate(values[t_list[-1]], values, t_converged(list(values.values())), ok)


def t_converged(values) -> bool:
    """The last two values of a t-sequence agree within max(1% of the last, 1e-8)."""
    if len(values) < 2:
        return False
    return bool(abs(values[-1] - values[-2]) <= max(0.01 * abs(values[-1]), 1e-8))


# ---------------------------------------------------------------- tables

def _multilinear(values, axis, c):
    """Multilinear interpolation of ``values`` (m,)*d on a uniform axis; returns (value, grad, outside)."""
    c = np.atleast_2d(np.asarray(c, dtype=float))
    d = c.shape[-1]
    m = axis.size
    step = axis[1] - axis[0]
    u = (c - axis[0]) / step
    near = np.rint(u)
    u = np.where(np.abs(u - near) < 1e-9, near, u)  # stored nodes are returned exactly
    outside = np.any((u < -1e-9) | (u > m - 1 + 1e-9), axis=-1)
    u = np.clip(u, 0.0, m - 1)
    i0 = np.minimum(np.floor(u).astype(int), m - 2)
    fr = u - i0
    clamped = (u <= 0.0) | (u >= m - 1)
    val = np.zeros(c.shape[:-1])
    grad = np.zeros(c.shape)
    for corner in itertools.product((0, 1), repeat=d):
        corner = np.array(corner)
        w = np.where(corner == 1, fr, 1.0 - fr)
        v = values[tuple((i0 + corner)[..., k] for k in range(d))]
        val += np.prod(w, axis=-1) * v
        sign = np.where(corner == 1, 1.0, -1.0) / step
        for k in range(d):
            others = np.prod(np.delete(w, k, axis=-1), axis=-1)
            grad[..., k] += sign[k] * others * v
    grad[clamped & outside[..., None]] = 0.0
    return val, grad, outside


_KEYS_A = -0.5


def _keys_weights(fr):
    """Keys cubic-convolution weights and derivatives for nodes i-1, i, i+1, i+2 at fraction fr."""
    a = _KEYS_A
    x = np.stack([1.0 + fr, fr, 1.0 - fr, 2.0 - fr], axis=-1)
    sgn = np.array([1.0, 1.0, -1.0, -1.0])  # d x / d fr
    inner = x <= 1.0
    w = np.where(inner, ((a + 2) * x - (a + 3)) * x * x + 1.0, ((a * x - 5 * a) * x + 8 * a) * x - 4 * a)
    dw = np.where(inner, (3 * (a + 2) * x - 2 * (a + 3)) * x, (3 * a * x - 10 * a) * x + 8 * a)
    return w, dw * sgn


def _pad_quadratic(values):
    """Add one ghost layer per axis, extrapolated so that quadratics are reproduced."""
    v = values
    for ax in range(values.ndim):
        first = [np.take(v, [i], axis=ax) for i in (0, 1, 2)]
        last = [np.take(v, [-1 - i], axis=ax) for i in (0, 1, 2)]
        lo = 3 * first[0] - 3 * first[1] + first[2]
        hi = 3 * last[0] - 3 * last[1] + last[2]
        v = np.concatenate([lo, v, hi], axis=ax)
    return v


def _cubic(values, axis, c, padded=None):
    """C^1 cubic-convolution interpolation on a uniform grid, exact for quadratics.

    Same contract as :func:`_multilinear`; coordinates outside the grid are
    clamped, with zero derivative in the clamped directions.
    """
    c = np.atleast_2d(np.asarray(c, dtype=float))
    d = c.shape[-1]
    m = axis.size
    step = axis[1] - axis[0]
    u = (c - axis[0]) / step
    near = np.rint(u)
    u = np.where(np.abs(u - near) < 1e-9, near, u)  # stored nodes are returned exactly
    outside = np.any((u < -1e-9) | (u > m - 1 + 1e-9), axis=-1)
    clamped = (u <= 0.0) | (u >= m - 1)
    u = np.clip(u, 0.0, m - 1)
    i0 = np.minimum(np.floor(u).astype(int), m - 2)
    w, dw = _keys_weights(u - i0)  # (..., d, 4)
    P = _pad_quadratic(values) if padded is None else padded
    val = np.zeros(c.shape[:-1])
    grad = np.zeros(c.shape)
    for corner in itertools.product(range(4), repeat=d):
        v = P[tuple(i0[..., k] + corner[k] for k in range(d))]
        ws = np.stack([w[..., k, corner[k]] for k in range(d)], axis=-1)
        dws = np.stack([dw[..., k, corner[k]] for k in range(d)], axis=-1)
        val += np.prod(ws, axis=-1) * v
        for k in range(d):
            others = np.prod(np.delete(ws, k, axis=-1), axis=-1)
            grad[..., k] += dws[..., k] * others * v / step
    grad[clamped & outside[..., None]] = 0.0
    return val, grad, outside


@dataclass(eq=False)
class DensityTable:
    """Homogenized density sampled on a tangent-coordinate grid at each base point.

    Tangent coordinates of xi_alpha at base point k are ``c = B_k^T xi_alpha``
    (a dim x 2 matrix) flattened row-major.  Values are interpolated
    multilinearly in c; base points are selected by nearest neighbour.
    """

    integrand: IntegrandSpec
    manifold: ManifoldDescriptor
    base_points: np.ndarray  # (K, 3)
    bases: np.ndarray  # (K, 3, dim)
    xi_max: float
    m: int
    values: np.ndarray  # (K,) + (m,) * 2 dim
    converged: np.ndarray  # same shape, bool
    t_list: tuple = (1, 2, 4)
    n: int = 32
    options: dict = field(default_factory=dict)
    interpolation: str = "linear"  # or "cubic" (C^1, exact on quadratics)

    @property
    def axis(self):
        return np.linspace(-self.xi_max, self.xi_max, self.m)

    @property
    def ncoords(self):
        return self.values.ndim - 1

    def grid_coords(self):
        """All tangent-coordinate grid points, shape (m,)*d + (d,)."""
        ax = self.axis
        return np.stack(np.meshgrid(*([ax] * self.ncoords), indexing="ij"), axis=-1)

    def nearest_index(self, points):
        points = np.asarray(points, dtype=float)
        d2 = np.sum((points[..., None, :] - self.base_points) ** 2, axis=-1)
        return np.argmin(d2, axis=-1)

    def coords(self, k: int, xi_alpha):
        """Tangent coordinates of a 3x2 matrix (or stack) at base point k."""
        xi = np.asarray(xi_alpha, dtype=float)
        c = np.einsum("id,...ij->...dj", self.bases[k], xi)
        return c.reshape(xi.shape[:-2] + (-1,))

    def interpolate(self, k: int, c):
        """(value, d value / d c, outside-range flag) at flattened coordinates c (..., d)."""
        c = np.asarray(c, dtype=float)
        flat = c.reshape(-1, c.shape[-1])
        if self.interpolation == "linear":
            val, grad, out = _multilinear(self.values[k], self.axis, flat)
        else:
            val, grad, out = _cubic(self.values[k], self.axis, flat)
        shp = c.shape[:-1]
        return val.reshape(shp), grad.reshape(c.shape), out.reshape(shp)

    def lookup(self, k: int, xi_alpha):
        c = self.coords(k, xi_alpha)
        val, _, out = self.interpolate(k, c)
        return val, out

    # -- persistence
    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        d = self.ncoords
        w.writerow(["s_index"] + [f"xi_{i}" for i in range(d)] + ["value", "converged", "t_max", "n"])
        gc = self.grid_coords().reshape(-1, d)
        for k in range(len(self.base_points)):
            vals = self.values[k].ravel()
            conv = self.converged[k].ravel()
            for c, v, ok in zip(gc, vals, conv):
                w.writerow([k] + [repr(float(x)) for x in c] + [repr(float(v)), int(bool(ok)),
                                                                 max(self.t_list), self.n])
        return buf.getvalue()

    def metadata(self) -> dict:
        return {"manifold": self.manifold.to_dict(), "integrand": self.integrand.to_dict(),
                "base_points": self.base_points.tolist(), "bases": self.bases.tolist(),
                "xi_max": self.xi_max, "m": self.m, "t_list": list(self.t_list), "n": self.n,
                "options": self.options, "interpolation": self.interpolation}

    def save(self, stem) -> None:
        """Write ``<stem>.csv`` and the ``<stem>.json`` sidecar via write-then-rename."""
        from .io import atomic_write
        stem = Path(stem)
        atomic_write(stem.with_suffix(".csv"), self.to_csv())
        atomic_write(stem.with_suffix(".json"), json.dumps(self.metadata(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, stem) -> "DensityTable":
        stem = Path(stem)
        meta = json.loads(stem.with_suffix(".json").read_text())
        rows = list(csv.reader(stem.with_suffix(".csv").read_text().splitlines()))[1:]
        K = len(meta["base_points"])
        m = meta["m"]
        d = len(rows[0]) - 5
        values = np.zeros((K,) + (m,) * d)
        conv = np.zeros((K,) + (m,) * d, dtype=bool)
        per = m ** d
        for r_i, row in enumerate(rows):
            k = int(row[0])
            idx = np.unravel_index(r_i % per, (m,) * d)
            values[(k,) + idx] = float(row[1 + d])
            conv[(k,) + idx] = bool(int(row[2 + d]))
        return cls(integrand_from_dict(meta["integrand"]), manifold_from_dict(meta["manifold"]),
                   np.array(meta["base_points"]), np.array(meta["bases"]), meta["xi_max"], m, values, conv,
                   tuple(meta["t_list"]), meta["n"], meta.get("options", {}),
                   meta.get("interpolation", "linear"))


def envelope_bounds(integrand: IntegrandSpec, norm_xi):
    """Certified lower/upper bounds on the homogenized density at |xi_alpha| = norm_xi.

    Lower: alpha |xi_alpha|^p - slack (Jensen, the test-field gradients average
    to zero in-plane).  Upper: beta (1 + |xi_alpha|^p) + slack (phi = 0).
    """
    alpha, beta = growth_constants(integrand)
    p = integrand.p
    return alpha * norm_xi ** p - ENVELOPE_SLACK, beta * (1.0 + norm_xi ** p) + ENVELOPE_SLACK


def build_density_table(integrand: IntegrandSpec, manifold: ManifoldDescriptor, s_list, xi_max: float = 1.0,
                        m: int = 5, t_list: Sequence[int] = (1, 2, 4), n: int = 32, threads: int = 1,
                        symmetric: bool = True, **cell_options) -> DensityTable:
    """Fill a table with :func:`estimate_hom_density` over the tangent-coordinate grid.

    With ``symmetric`` the evenness of the catalogue densities in xi is used
    to solve only one entry of each pair (c, -c).
    """
    if m < 3:
        raise ValueError("table needs at least 3 points per axis")
    s_arr = np.atleast_2d(np.asarray(s_list, dtype=float))
    frames = [tangent_frame(manifold, s) for s in s_arr]
    dim = frames[0].basis.shape[1]
    d = 2 * dim
    shape = (m,) * d
    axis = np.linspace(-xi_max, xi_max, m)
    jobs = []
    for k, fr in enumerate(frames):
        for idx in np.ndindex(shape):
            mirror = tuple(m - 1 - i for i in idx)
            if symmetric and mirror < idx:
                continue
            jobs.append((k, idx))

    def run(job):
        k, idx = job
        c = axis[list(idx)].reshape(dim, 2)
        xi = frames[k].basis @ c
        return estimate_hom_density(integrand, manifold, s_arr[k], xi, t_list, n, **cell_options)

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            results = list(ex.map(run, jobs))
    else:
        results = [run(j) for j in jobs]

    values = np.full((len(frames),) + shape, np.nan)
    conv = np.zeros((len(frames),) + shape, dtype=bool)
    for (k, idx), est in zip(jobs, results):
        mirror = tuple(m - 1 - i for i in idx)
        for target in {idx, mirror} if symmetric else {idx}:
            values[(k,) + target] = est.estimate
            conv[(k,) + target] = est.converged and est.solver_converged
    table = DensityTable(integrand, manifold, s_arr, np.stack([f.basis for f in frames]), float(xi_max), m,
                         values, conv, tuple(int(t) for t in t_list), int(n), dict(cell_options))
    lo, hi = envelope_bounds(integrand, np.linalg.norm(table.grid_coords(), axis=-1))
    bad = (values < lo) | (values > hi)
    if bad.any():
        log.warning("%d table entries violate the growth envelope", int(bad.sum()))
    return table


def frame_near(table: DensityTable, k: int, normals):
    """Tangent bases at points with unit normals ``normals``, transported from base point k.

    The base frame is rotated by the minimal rotation taking the base normal
    to each normal, which keeps the bases orthonormal and equal to the table's
    own basis at the base point.
    """
    b = table.bases[k]
    n0 = np.cross(b[:, 0], b[:, 1])
    return _rotate_frame(b, n0, normals)


def _rotate_frame(b, n0, n):
    n = np.asarray(n, dtype=float)
    v = np.cross(n0, n)
    c = n @ n0
    vx = np.zeros(n.shape + (3,))
    vx[..., 0, 1], vx[..., 0, 2] = -v[..., 2], v[..., 1]
    vx[..., 1, 0], vx[..., 1, 2] = v[..., 2], -v[..., 0]
    vx[..., 2, 0], vx[..., 2, 1] = -v[..., 1], v[..., 0]
    r = np.eye(3) + vx + (vx @ vx) / (1.0 + c)[..., None, None]
    return r @ b


__all__ = [
    "CellProblem", "CellSolution", "DensityTable", "EqualityReport", "HomDensityEstimate", "IncompatibleProblem",
    "build_density_table", "check_constrained_penalized_equality", "envelope_bounds", "estimate_hom_density",
    "frame_near", "solve_cell", "solve_classical_cell", "t_converged", "zero_field_energy",
]
