import numpy as np
import pytest

from filmhom.cell import CellProblem, build_density_table, solve_cell
from filmhom.discretization import DiscreteField, ManifoldValued, SlabDomain, lateral_mask, node_coordinates
from filmhom.film import (
    BCViolation,
    FilmProblem,
    PlanarField,
    PreconditionViolated,
    RecoveryParams,
    build_recovery_sequence,
    datum_extension,
    eval_film_energy,
    eval_limit_energy,
    film_grid,
    minimize_film,
    minimize_limit,
    periodic_cell_values,
    planar_datum,
    recovery_diagnostics,
    recovery_smallness,
    smoothstep_cutoff,
)
from filmhom.geometry import AffinePlane, Sphere
from filmhom.integrand import Constant, IntegrandSpec, Laminate1D

E1, E2, E3 = np.eye(3)
NORTH = np.array([0.0, 0.0, 1.0])
SQ = IntegrandSpec(Constant(1.0), 2.0)
LAM = IntegrandSpec(Laminate1D(1.0, 4.0, 0.5, 1), 2.0)
XI0 = np.stack([0.2 * E1, 0 * E1], axis=1)


@pytest.fixture(scope="module")
def plane_table(plane, square):
    return build_density_table(square, plane, [np.zeros(3)], xi_max=0.4, m=5, t_list=(1, 2), n=4)


def test_film_grid():
    assert film_grid(0.5) == (17, 17, 3)
    assert film_grid(0.125, 8, 2) == (65, 65, 3)
    with pytest.raises(ValueError):
        film_grid(0.3)


def test_constant_datum_gives_zero(sphere):
    prob = FilmProblem(LAM, sphere, 0.5, NORTH, np.zeros((3, 2)), film_grid(0.5, 4))
    res = minimize_film(prob)
    assert res.energy == 0.0
    assert np.array_equal(res.field.values, np.broadcast_to(NORTH, res.field.values.shape))


def test_plane_affine_datum_is_the_minimizer(plane):
    xi0 = np.array([[0.3, -0.1], [0.2, 0.4], [0.0, 0.0]])
    prob = FilmProblem(SQ, plane, 0.25, np.zeros(3), xi0, (9, 9, 3))
    res = minimize_film(prob)
    assert res.energy == pytest.approx(np.sum(xi0 ** 2), rel=1e-12)
    x = node_coordinates(prob.domain, prob.grid)[..., :2]
    assert np.allclose(res.field.values, x @ xi0.T, atol=1e-12)


@pytest.mark.parametrize("h", [1e-2, 1e-3])
def test_vertical_tangent_perturbation_energy(sphere, h):
    tau = np.array([0.6, 0.8, 0.0])
    prob = FilmProblem(SQ, sphere, h, NORTH, np.zeros((3, 2)), (3, 3, 9))
    x3 = node_coordinates(prob.domain, prob.grid)[..., 2:3]
    vals = sphere.project(NORTH + h * x3 * tau)
    assert prob.assembler().energy(vals) == pytest.approx(1.0, abs=10 * h ** 2)


def test_lateral_datum_is_enforced(sphere):
    prob = FilmProblem(LAM, sphere, 0.5, NORTH, XI0, (9, 9, 3))
    u = datum_extension(prob)
    eval_film_energy(u, prob)
    bad = u.values.copy()
    bad[0, 3, 1] = sphere.project(bad[0, 3, 1] + 1e-6 * E2)
    with pytest.raises(BCViolation):
        eval_film_energy(bad, prob)
    with pytest.raises(ValueError):
        FilmProblem(LAM, sphere, 0.5, NORTH, np.stack([E3, 0 * E3], axis=1))


def test_film_descent_history_and_feasibility(sphere):
    prob = FilmProblem(LAM, sphere, 0.5, NORTH, XI0, film_grid(0.5, 4))
    res = minimize_film(prob)
    energies = [e for _, e, _ in res.history]
    assert all(b <= a for a, b in zip(energies, energies[1:]))
    assert res.energy <= eval_film_energy(datum_extension(prob), prob)
    assert np.abs(sphere.residual(res.field.values)).max() <= 1e-8
    m = lateral_mask(prob.grid)
    assert np.abs(res.field.values[m] - prob.boundary_values()[m]).max() <= 1e-10
    assert res.converged and res.residual <= 1e-8


def test_minimize_film_reports_max_iterations(sphere):
    prob = FilmProblem(LAM, sphere, 0.5, NORTH, XI0, film_grid(0.5, 4))
    res = minimize_film(prob, max_iter=2)
    assert not res.converged and res.flags == ["MaxIterations"]


def test_planar_field_round_trip_to_film(sphere):
    prob = FilmProblem(LAM, sphere, 0.25, NORTH, XI0, (9, 9, 3))
    u = planar_datum(prob, (9, 9))
    film = u.to_film(prob.domain, prob.grid)
    assert np.array_equal(film.values, prob.boundary_values())
    fine = u.to_film(prob.domain, (17, 17, 3))
    assert np.abs(sphere.residual(fine.values)).max() < 1e-12


def test_limit_energy_constant_field(laminate_table, sphere):
    u = PlanarField(np.broadcast_to(NORTH, (5, 5, 3)).copy(), sphere)
    assert eval_limit_energy(u, laminate_table) == 0.0


def test_limit_energy_flat_case_is_exact(plane_table, plane):
    xi0 = np.array([[0.2, 0.0], [0.0, -0.2], [0.0, 0.0]])  # table nodes, where interpolation is exact
    prob = FilmProblem(SQ, plane, 0.5, np.zeros(3), xi0)
    u = planar_datum(prob, (9, 9))
    assert eval_limit_energy(u, plane_table) == pytest.approx(np.sum(xi0 ** 2), rel=1e-12)
    lim = minimize_limit(prob, plane_table, grid=(9, 9))
    assert lim.energy == pytest.approx(np.sum(xi0 ** 2), rel=1e-9)


def test_limit_energy_laminate_first_order(laminate_table, sphere):
    prob = FilmProblem(LAM, sphere, 0.5, NORTH, XI0)
    info = eval_limit_energy(planar_datum(prob, (17, 17)), laminate_table, details=True)
    assert info.energy == pytest.approx(1.6 * 0.04, rel=0.03)
    assert info.out_of_range == 0


def test_limit_energy_rejects_other_manifold(laminate_table, plane):
    with pytest.raises(ValueError):
        eval_limit_energy(PlanarField(np.zeros((3, 3, 3)), plane), laminate_table)


def test_limit_energy_gradient_matches_finite_differences(laminate_table, sphere):
    from filmhom.film import LimitEnergy
    from dataclasses import replace
    prob = FilmProblem(LAM, sphere, 0.5, NORTH, XI0)
    U = planar_datum(prob, (7, 7)).values.copy()
    rng = np.random.default_rng(0)
    U[1:-1, 1:-1] = sphere.project(U[1:-1, 1:-1] + 0.01 * rng.standard_normal((5, 5, 3)))
    le = LimitEnergy(replace(laminate_table, interpolation="cubic"), (7, 7))
    _, g, _ = le.evaluate(U)
    for idx in [(2, 3, 0), (4, 1, 1), (3, 3, 2)]:
        d = np.zeros_like(U)
        d[idx] = 1e-6
        fd = (le.evaluate(U + d, need_grad=False)[0] - le.evaluate(U - d, need_grad=False)[0]) / 2e-6
        assert g[idx] == pytest.approx(fd, rel=1e-4, abs=1e-9)


def test_film_energy_near_limit_at_h_eighth(laminate_table, sphere):
    prob = FilmProblem(LAM, sphere, 0.125, NORTH, XI0, film_grid(0.125))
    res = minimize_film(prob)
    limit = eval_limit_energy(planar_datum(prob, (17, 17)), laminate_table)
    assert res.energy == pytest.approx(limit, rel=0.05)


def test_smoothstep_cutoff():
    r = np.linspace(0, 1, 2001)
    z = smoothstep_cutoff(r, 0.4)
    assert np.all(z[r <= 0.1] == 1.0) and np.all(z[r >= 0.2] == 0.0)
    assert np.abs(np.diff(z) / np.diff(r)).max() <= 6 / 0.4 + 1e-9


@pytest.fixture(scope="module")
def cell_phi(sphere):
    sol = solve_cell(CellProblem(LAM, sphere, NORTH, XI0, n=8, formulation="constrained"))
    return sol.argmin


def test_recovery_with_zero_phi_is_identity(sphere):
    prob = FilmProblem(LAM, sphere, 0.25, NORTH, XI0, (9, 9, 3))
    u = planar_datum(prob, (9, 9))
    zero = DiscreteField(np.zeros((9, 9, 3, 3)), SlabDomain.cell(1), ManifoldValued(sphere))
    uk = build_recovery_sequence(u, RecoveryParams(NORTH, zero), 0.25, (9, 9, 3))
    assert np.array_equal(uk.values, u.to_film(uk.domain, (9, 9, 3)).values)


def test_recovery_preconditions(sphere, cell_phi):
    u = PlanarField(np.broadcast_to(NORTH, (5, 5, 3)).copy(), sphere)
    with pytest.raises(PreconditionViolated):
        build_recovery_sequence(u, RecoveryParams(NORTH, cell_phi, delta=0.6), 0.25, (5, 5, 3))
    big = DiscreteField(cell_phi.values * 1e3, cell_phi.domain)
    params = RecoveryParams(NORTH, big)
    assert recovery_smallness(params, 0.25) >= 1
    with pytest.raises(PreconditionViolated):
        build_recovery_sequence(u, params, 0.25, (5, 5, 3))


@pytest.mark.parametrize("h", [0.25, 0.125])
def test_recovery_sup_distance_bound(sphere, cell_phi, h):
    u = PlanarField(np.broadcast_to(NORTH, (9, 9, 3)).copy(), sphere)
    uk = build_recovery_sequence(u, RecoveryParams(NORTH, cell_phi), h, film_grid(h, 4))
    phimax = np.linalg.norm(cell_phi.values, axis=-1).max()
    dist = np.linalg.norm(uk.values - NORTH, axis=-1).max()
    assert 0 < dist <= h * phimax * (1 + 1e-12)  # |D Pi| <= 1 along tangent offsets from the unit sphere


def test_periodic_cell_values_reproduce_nodes(cell_phi):
    X = node_coordinates(cell_phi.domain, cell_phi.grid)
    assert np.allclose(periodic_cell_values(cell_phi, X), cell_phi.values, atol=1e-14)
    shifted = X.copy()
    shifted[..., 0] += 3.0
    assert np.allclose(periodic_cell_values(cell_phi, shifted), cell_phi.values, atol=1e-12)


def test_recovery_diagnostics_csv(sphere, cell_phi, laminate_table):
    prob = FilmProblem(LAM, sphere, 0.5, NORTH, XI0)
    u = planar_datum(prob, (17, 17))
    diag = recovery_diagnostics(prob, u, RecoveryParams(NORTH, cell_phi), laminate_table, [0.5, 0.25], 4)
    lines = diag.to_csv().splitlines()
    assert lines[0] == "k,h_k,sup_dist,energy,limit_energy" and len(lines) == 3
    assert all(r > 0 for r in diag.ratios)
