# Series terms q_n on a coarse grid and the constant ledger.
#
# Integrating q_n(t, x, .) against m gives E_x[A_t^n]; for the threshold
# functional these are Poisson moments, a direct check of the quadrature.
import math

import numpy as np

from fkstable.model import cauchy_model, threshold_perturbation
from fkstable.series import Grid, build_ledger, build_series_table

model = cauchy_model()
pert = threshold_perturbation(0.1, 0.5)
grid = Grid(time_nodes=32, space_nodes=256)
table = build_series_table(model, pert, grid, n_max=6)
print(f"self-convergence against the half grid: {table.quad_tol:.2e} pointwise, {table.mass_tol:.2e} mass")

i = table.row_index(0.0)
for t in (0.25, 0.5):
    k = grid.time_index(t) - 1
    m = 4 / math.pi * t
    closed = [0.1 * m, 0.01 * (m + m * m), 0.001 * (m + 3 * m * m + m ** 3)]
    for n in (1, 2, 3):
        print(f"t={t}: int q_{n} m(dz) = {table.mass[n, k, i]:.8f}   Poisson moment {closed[n - 1]:.8f}")

# |q_n| <= qbar_n, and the alternating sum approaches the density
k = grid.time_index(0.5) - 1
print("domination holds:", all(np.all(np.abs(table.q[n]) <= table.qbar[n]) for n in range(7)))
l0 = table.target_index(0.0)
print("q(0.5, 0, 0) partial sums:", [f"{table.partial_sum(N)[k, i, l0]:.6f}" for N in range(4)])

ledger = build_ledger(model, pert, grid, table=table)
print(ledger.report())
