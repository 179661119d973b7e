"""The recovery construction u_k = Pi(u + h zeta phi(x/h, x3)).

The oscillation has amplitude h, so the uniform distance to u is
proportional to h.  The energies of u_k approach the limit energy of u.
"""
import numpy as np

from filmhom import CellProblem, IntegrandSpec, Laminate1D, Sphere, build_density_table, solve_cell
from filmhom.film import FilmProblem, RecoveryParams, planar_datum, recovery_diagnostics

f = IntegrandSpec(Laminate1D(1.0, 4.0, 0.5, 1), 2.0)
M = Sphere(1.0)
s0 = np.array([0.0, 0.0, 1.0])
xi0 = np.zeros((3, 2))
xi0[0, 0] = 0.2

table = build_density_table(f, M, [s0], xi_max=0.4, m=5, t_list=(1, 2), n=8)
phi = solve_cell(CellProblem(f, M, s0, xi0, n=8, formulation="constrained")).argmin
print("cell corrector sup norm:", np.linalg.norm(phi.values, axis=-1).max())

prob = FilmProblem(f, M, 0.5, s0, xi0)
u = planar_datum(prob, (129, 129))
diag = recovery_diagnostics(prob, u, RecoveryParams(s0, phi), table, [0.25, 0.125, 0.0625])
print(diag.to_csv())
print("sup/h:", [round(r, 5) for r in diag.ratios])
