"""The three structural checks on a tabulated density.

Quasiconvexity and rank-one convexity are tested against random tangent
perturbations; the growth check compares the table to its certified
envelope and watches the Lipschitz ratio under a finer rebuild.
"""
import numpy as np

from filmhom import IntegrandSpec, Laminate1D, Sphere, build_density_table
from filmhom.verify import summary_table, verify_lipschitz_growth, verify_quasiconvexity, verify_rank_one

f = IntegrandSpec(Laminate1D(1.0, 4.0, 0.5, 1), 2.0)
north = np.array([0.0, 0.0, 1.0])
coarse = build_density_table(f, Sphere(1.0), [north], xi_max=0.4, m=5, t_list=(1, 2), n=4)
fine = build_density_table(f, Sphere(1.0), [north], xi_max=0.4, m=5, t_list=(1, 2), n=8)

B = fine.bases[0]
xi = B @ np.array([[0.2, 0.0], [0.0, -0.2]])

reports = [
    verify_quasiconvexity(fine, north, xi, n_tests=50, seed=42),
    verify_rank_one(fine, north, n_segments=100, seed=42),
    verify_lipschitz_growth(coarse, refined=fine),
]
print(summary_table(reports))
print("Lipschitz ratios:", reports[2].provenance["lipschitz_ratio"], reports[2].provenance["refined_ratio"])
