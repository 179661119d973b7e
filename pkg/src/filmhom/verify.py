"""Property suites over density tables and the thin-film convergence experiment.

Every suite returns a :class:`PropertyReport` whose pass flag is a pure
function of its worst violation and tolerance.  Violations are signed and
relative to the larger side of the tested inequality, which is the bounded
side whenever the inequality fails; positive numbers mean failure by that
fraction.
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .cell import CellProblem, DensityTable, build_density_table, envelope_bounds, frame_near, solve_cell
from .film import (
    FilmProblem,
    PreconditionViolated,
    RecoveryParams,
    build_recovery_sequence,
    datum_extension,
    eval_film_energy,
    film_grid,
    minimize_film,
    minimize_limit,
)
from .discretization import QuadratureRule, lateral_mask
from .io import csv_text

log = logging.getLogger(__name__)

STRUCTURAL_SLACK = 0.005
GAMMA_SLACK = 0.05
DRIFT_TOL = 0.10


class OutOfTableRange(ValueError):
    pass


@dataclass
class PropertyReport:
    name: str
    samples: int
    worst_violation: float
    tolerance: float
    provenance: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(self.worst_violation <= self.tolerance)

    def to_dict(self):
        d = asdict(self)
        d["passed"] = self.passed
        d["worst_violation"] = _json_float(self.worst_violation)
        return d


def _json_float(x):
    x = float(x)
    return x if np.isfinite(x) else str(x)


# ---------------------------------------------------------------- table helpers

def _frame(table: DensityTable, s):
    s = np.asarray(s, dtype=float)
    k = int(table.nearest_index(s))
    basis = frame_near(table, k, table.manifold.normal(s)[None])[0]
    return k, basis


def _density(table: DensityTable, k, basis, xi):
    """Table value at tangent matrices xi (..., 3, 2) expressed in ``basis``."""
    c = np.einsum("ai,...aj->...ij", basis, xi)
    val, _, out = table.interpolate(k, c.reshape(c.shape[:-2] + (-1,)))
    return val, out


def _check_range(table, k, basis, xi, what):
    _, out = _density(table, k, basis, xi)
    if np.any(out):
        raise OutOfTableRange(f"{what}: {int(np.sum(out))} evaluations outside the table range")


# ---------------------------------------------------------------- quasiconvexity

def _bilinear_gradients(nodal, rule: QuadratureRule):
    """Gradients (q, 3, 2) at quadrature points of a bilinear field on the unit square grid."""
    n = nodal.shape[0] - 1
    d = 1.0 / n
    out = []
    for a in rule.points:
        for b in rule.points:
            g1 = ((1 - b) * (nodal[1:, :-1] - nodal[:-1, :-1]) + b * (nodal[1:, 1:] - nodal[:-1, 1:])) / d
            g2 = ((1 - a) * (nodal[:-1, 1:] - nodal[:-1, :-1]) + a * (nodal[1:, 1:] - nodal[1:, :-1])) / d
            out.append(np.stack([g1, g2], axis=-1).reshape(-1, 3, 2))
    w = np.repeat(np.outer(rule.weights, rule.weights).ravel(), n * n) / (n * n)
    return np.concatenate(out), w


def verify_quasiconvexity(table: DensityTable, s, xi_alpha, n_tests: int = 50, seed: int = 42,
                          slack: float = STRUCTURAL_SLACK, n_elements: int = 4, quadrature: int = 2,
                          amplitude: float = 0.3) -> PropertyReport:
    """Jensen-type inequality T(xi) <= avg_Q' T(xi + grad psi) for tangent psi vanishing on the boundary.

    psi is bilinear on an ``n_elements``-square grid of Q' with random nodal
    tangent values, scaled so that each gradient coordinate stays below
    ``amplitude * xi_max``.
    """
    xi = np.asarray(xi_alpha, dtype=float).reshape(3, 2)
    k, basis = _frame(table, s)
    _check_range(table, k, basis, xi, "xi_alpha")
    rng = np.random.default_rng(seed)
    rule = QuadratureRule(quadrature)
    lhs = float(_density(table, k, basis, xi)[0])
    worst = -np.inf
    for _ in range(n_tests):
        coords = np.zeros((n_elements + 1, n_elements + 1, 2))
        coords[1:-1, 1:-1] = rng.standard_normal((n_elements - 1, n_elements - 1, 2))
        grads, w = _bilinear_gradients(coords @ basis.T, rule)
        cmax = np.abs(np.einsum("ai,qaj->qij", basis, grads)).max()
        if cmax > 0:
            grads *= amplitude * table.xi_max * rng.uniform(0.0, 1.0) / cmax
        vals, out = _density(table, k, basis, xi + grads)
        if np.any(out):
            raise OutOfTableRange("perturbed gradient leaves the table range")
        rhs = float(w @ vals)
        worst = max(worst, (lhs - rhs) / max(abs(lhs), abs(rhs), 1e-12))
    if n_tests == 0:
        worst = 0.0
    return PropertyReport("tangential_quasiconvexity", n_tests, float(worst), slack,
                          {"s": np.asarray(s, float).tolist(), "xi_alpha": xi.tolist(), "seed": seed,
                           "n_elements": n_elements, "quadrature": quadrature, "amplitude": amplitude,
                           "table_m": table.m, "table_n": table.n})


# ---------------------------------------------------------------- growth and Lipschitz

def lipschitz_ratio(table: DensityTable) -> float:
    """max |T(xi) - T(xi')| / ((1 + |xi|^(p-1) + |xi'|^(p-1)) |xi - xi'|) over entry pairs.

    Pairs closer than 1e-9 are excluded; entries are compared only at the
    same base point, where the coordinates are isometric to the matrices.
    """
    p = table.integrand.p
    c = table.grid_coords().reshape(-1, table.ncoords)
    norm = np.linalg.norm(c, axis=-1)
    dist = np.linalg.norm(c[:, None] - c[None], axis=-1)
    keep = dist > 1e-9
    scale = (1.0 + norm[:, None] ** (p - 1) + norm[None] ** (p - 1)) * np.where(keep, dist, 1.0)
    best = 0.0
    for k in range(len(table.base_points)):
        v = table.values[k].ravel()
        r = np.abs(v[:, None] - v[None]) / scale
        best = max(best, float(r[keep].max(initial=0.0)))
    return best


def verify_lipschitz_growth(table: DensityTable, refined: Optional[DensityTable] = None, rebuild: bool = True,
                            tolerance: float = DRIFT_TOL) -> PropertyReport:
    """Growth envelope on every entry and stability of the empirical Lipschitz ratio.

    ``refined`` is the same table at doubled cell resolution; it is rebuilt
    when absent and ``rebuild`` is set.  The worst violation is +inf when an
    entry leaves the envelope, otherwise the relative drift of the ratio.
    """
    lo, hi = envelope_bounds(table.integrand, np.linalg.norm(table.grid_coords(), axis=-1))
    bad = int(np.sum((table.values < lo) | (table.values > hi)))
    ratio = lipschitz_ratio(table)
    prov = {"entries": int(table.values.size), "envelope_failures": bad, "lipschitz_ratio": ratio,
            "table_m": table.m, "table_n": table.n}
    if refined is None and rebuild:
        refined = build_density_table(table.integrand, table.manifold, table.base_points, table.xi_max, table.m,
                                      table.t_list, 2 * table.n, **table.options)
    drift = 0.0
    if refined is not None:
        r2 = lipschitz_ratio(refined)
        drift = abs(ratio - r2) / max(r2, 1e-12)
        prov.update(refined_n=refined.n, refined_ratio=r2, drift=drift)
    worst = np.inf if bad else drift
    return PropertyReport("lipschitz_growth", int(table.values.size), float(worst), tolerance, prov)


# ---------------------------------------------------------------- rank-one convexity

def verify_rank_one(table: DensityTable, s, n_segments: int = 100, seed: int = 42,
                    slack: float = STRUCTURAL_SLACK, xi_alpha=None) -> PropertyReport:
    """Midpoint convexity along tangent rank-one segments xi + lambda a (x) nu, lambda in [-L, L].

    Centres are random inside half the table range unless ``xi_alpha`` fixes
    them; segment half-lengths keep both endpoints in range.
    """
    k, basis = _frame(table, s)
    rng = np.random.default_rng(seed)
    worst = 0.0 if n_segments == 0 else -np.inf
    half = 0.5 * table.xi_max
    for _ in range(n_segments):
        if xi_alpha is None:
            xi = basis @ rng.uniform(-half, half, (2, 2))
        else:
            xi = np.asarray(xi_alpha, dtype=float).reshape(3, 2)
        a = basis @ rng.standard_normal(2)
        a /= np.linalg.norm(a)
        nu = rng.standard_normal(2)
        nu /= np.linalg.norm(nu)
        step = np.outer(a, nu)
        c0 = np.abs(basis.T @ xi).max()
        length = rng.uniform(0.0, max(table.xi_max - c0, 0.0))
        ends = np.stack([xi - length * step, xi, xi + length * step])
        vals, out = _density(table, k, basis, ends)
        if np.any(out):
            raise OutOfTableRange("rank-one segment leaves the table range")
        mid, avg = vals[1], 0.5 * (vals[0] + vals[2])
        worst = max(worst, 0.0 if length == 0 else (mid - avg) / max(abs(mid), abs(avg), 1e-12))
    return PropertyReport("rank_one_convexity", n_segments, float(worst), slack,
                          {"s": np.asarray(s, float).tolist(), "seed": seed, "table_m": table.m})


# ---------------------------------------------------------------- convergence experiment

@dataclass
class GammaReport:
    h: list
    E_h: list
    E_limit: float
    recovery_energies: list
    iterations: list
    flags: list  # per h, list of strings
    tolerance: float = GAMMA_SLACK
    provenance: dict = field(default_factory=dict)

    @property
    def gaps(self):
        return [abs(e - self.E_limit) / max(self.E_limit, 1e-12) for e in self.E_h]

    @property
    def recovery_bound_holds(self) -> bool:
        return all(e <= r for e, r in zip(self.E_h, self.recovery_energies) if np.isfinite(r))

    @property
    def gap_trend_holds(self) -> bool:
        g = self.gaps
        return bool(g[-1] <= self.tolerance and g[-1] <= g[0])

    @property
    def passed(self) -> bool:
        return self.recovery_bound_holds and self.gap_trend_holds

    def to_dict(self):
        return {"h": self.h, "E_h": self.E_h, "E_limit": self.E_limit, "gaps": self.gaps,
                "recovery_energies": [_json_float(r) for r in self.recovery_energies],
                "iterations": self.iterations, "flags": self.flags, "tolerance": self.tolerance,
                "recovery_bound_holds": self.recovery_bound_holds, "gap_trend_holds": self.gap_trend_holds,
                "passed": self.passed, "provenance": self.provenance}

    def to_csv(self) -> str:
        rows = [(h, e, self.E_limit, g, it, ";".join(fl))
                for h, e, g, it, fl in zip(self.h, self.E_h, self.gaps, self.iterations, self.flags)]
        return csv_text(["h", "E_h", "E_limit", "gap", "iters", "flags"], rows)


def _film_step(problem: FilmProblem, h, per_period, n3, u_limit, params, tol, max_iter):
    grid = film_grid(h, per_period, n3)
    prob = problem.with_h(h, grid)
    flags = []
    start = datum_extension(prob)
    e_start = eval_film_energy(start, prob)
    e_rec = np.inf
    if params is not None:
        try:
            rec = build_recovery_sequence(u_limit, params, h, grid)
            m = lateral_mask(grid)
            rec.values[m] = prob.boundary_values()[m]
            e_rec = eval_film_energy(rec, prob)
            if e_rec < e_start:
                start, e_start = rec, e_rec
        except PreconditionViolated as exc:
            flags.append("RecoveryPrecondition")
            log.warning("recovery field unavailable at h=%g: %s", h, exc)
    res = minimize_film(prob, start, tol=tol, max_iter=max_iter)
    flags += res.flags
    return res.energy, e_rec, res.iterations, flags


def run_gamma_experiment(problem: FilmProblem, table: DensityTable, h_ladder: Sequence[float] = (0.5, 0.25, 0.125),
                         per_period: int = 8, n3: int = 2, planar_grid=(17, 17), delta: float = 0.45,
                         tol: float = 1e-8, max_iter: int = 20000, tolerance: float = GAMMA_SLACK,
                         threads: int = 1) -> GammaReport:
    """Film minima along an h ladder against the minimum of the table-based limit problem.

    The recovery field built from the limit minimizer, with the lateral
    datum restored, is an admissible competitor at every h; the film
    descent starts from it whenever it beats the datum extension, so the
    reported E_h never exceeds its energy.
    """
    h_ladder = [float(h) for h in h_ladder]
    if any(b >= a for a, b in zip(h_ladder, h_ladder[1:])):
        raise ValueError("h ladder must be strictly decreasing")
    limit = minimize_limit(problem, table, planar_grid, tol=min(tol, 1e-9), max_iter=max_iter)
    cell = solve_cell(CellProblem(problem.integrand, problem.manifold, problem.s0, problem.xi0, t=1,
                                  formulation="constrained", n=per_period, n3=n3, tol=tol))
    params = RecoveryParams(problem.s0, cell.argmin, delta, lateral_layer=True)

    def step(h):
        try:
            return _film_step(problem, h, per_period, n3, limit.field, params, tol, max_iter)
        except Exception as exc:  # the ladder is never aborted
            log.error("h=%g failed: %s", h, exc)
            return np.nan, np.nan, 0, [f"Error:{type(exc).__name__}"]

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            rows = list(ex.map(step, h_ladder))
    else:
        rows = [step(h) for h in h_ladder]
    flags = [fl for *_, fl in rows]
    if limit.out_of_range:
        flags = [fl + ["LimitOutOfTableRange"] for fl in flags]
    if not limit.converged:
        flags = [fl + ["LimitMaxIterations"] for fl in flags]
    prov = {"per_period": per_period, "n3": n3, "planar_grid": list(planar_grid), "delta": delta, "tol": tol,
            "s0": problem.s0.tolist(), "xi0": problem.xi0.tolist(), "cell_value": cell.value,
            "table_m": table.m, "table_n": table.n}
    return GammaReport(h_ladder, [float(r[0]) for r in rows], float(limit.energy), [float(r[1]) for r in rows],
                       [int(r[2]) for r in rows], flags, tolerance, prov)


# ---------------------------------------------------------------- output

def summary_table(reports) -> str:
    """Human-readable one-line-per-report summary."""
    lines = [f"{'property':<28}{'samples':>8}{'worst':>14}{'tol':>10}  result"]
    for r in reports:
        if isinstance(r, GammaReport):
            lines.append(f"{'gamma_experiment':<28}{len(r.h):>8}{r.gaps[-1]:>14.4e}{r.tolerance:>10.3g}  "
                         f"{'PASS' if r.passed else 'FAIL'}")
        else:
            lines.append(f"{r.name:<28}{r.samples:>8}{r.worst_violation:>14.4e}{r.tolerance:>10.3g}  "
                         f"{'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)


def reports_json(reports) -> str:
    return json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True)
