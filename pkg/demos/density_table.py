"""Tabulating the homogenized density and reading it back.

For the laminate the density is the quadratic form
1.6 |xi e_1|^2 + 2.5 |xi e_2|^2 in tangent coordinates, so the table can be
checked entry by entry.
"""
import time

import numpy as np

from filmhom import DensityTable, IntegrandSpec, Laminate1D, Sphere, build_density_table

f = IntegrandSpec(Laminate1D(1.0, 4.0, 0.5, 1), 2.0)
north = [0.0, 0.0, 1.0]

t0 = time.time()
table = build_density_table(f, Sphere(1.0), [north], xi_max=0.4, m=5, t_list=(1, 2), n=8)
print(f"built {table.values.size} entries in {time.time() - t0:.1f} s")

c = table.grid_coords()
exact = 1.6 * (c[..., 0] ** 2 + c[..., 2] ** 2) + 2.5 * (c[..., 1] ** 2 + c[..., 3] ** 2)
print("max deviation from the quadratic:", np.abs(table.values[0] - exact).max())

table.save("laminate_table")
again = DensityTable.load("laminate_table")
print("reloaded identical:", np.array_equal(again.values, table.values))

# between nodes the multilinear rule lies on the chord, above the convex form
xi = np.array([[0.1, 0.0], [0.0, 0.0], [0.0, 0.0]])
val, _ = table.lookup(0, xi)
print(f"T(0.1 e1 (x) e1) = {float(val):.5f}, exact {1.6 * 0.01:.5f}")
