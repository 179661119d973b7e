"""Thin films converging to the homogenized membrane energy.

A sphere-valued film with laminate microstructure of period h is clamped
laterally to Pi(s0 + xi0 x).  As h shrinks the film minima approach the
minimum of the table-based limit energy.  The recovery field built from a
cell minimizer is always an admissible competitor, so it bounds E_h.
"""
import time

import numpy as np

from filmhom import IntegrandSpec, Laminate1D, Sphere, build_density_table
from filmhom.film import FilmProblem
from filmhom.verify import run_gamma_experiment, summary_table

f = IntegrandSpec(Laminate1D(1.0, 4.0, 0.5, 1), 2.0)
M = Sphere(1.0)
s0 = np.array([0.0, 0.0, 1.0])
xi0 = np.zeros((3, 2))
xi0[0, 0] = 0.2

t0 = time.time()
table = build_density_table(f, M, [s0], xi_max=0.4, m=5, t_list=(1, 2), n=8)
print(f"table: {time.time() - t0:.0f} s")

t0 = time.time()
rep = run_gamma_experiment(FilmProblem(f, M, 0.5, s0, xi0), table, (0.5, 0.25, 0.125))
print(f"ladder: {time.time() - t0:.0f} s\n")
print(rep.to_csv())
for h, e, r in zip(rep.h, rep.E_h, rep.recovery_energies):
    print(f"h={h:<6g} E_h={e:.6f}  recovery={r:.6f}")
print(f"E* = {rep.E_limit:.6f}\n")
print(summary_table([rep]))
