# Two-sided envelope constants of the Feynman-Kac density.
#
# For F = 0 the density is the Cauchy kernel, and the fitted constants
# reproduce 1/(2 pi) and 1/pi.  Charging jumps lowers the lower constant and
# raises the upper one continuously in the amplitude c.
import math

from fkstable.model import cauchy_model, threshold_perturbation
from fkstable.series import Grid, build_ledger, build_series_table, engine_for
from fkstable.verify import fit_sandwich

model = cauchy_model()
grid = Grid(time_nodes=32, space_nodes=256)
print(f"reference: 1/(2 pi) = {1 / (2 * math.pi):.6f}, 1/pi = {1 / math.pi:.6f}")
for c in (0.0, 0.01, 0.05, 0.1):
    pert = threshold_perturbation(c, 0.5)
    table = build_series_table(model, pert, grid, n_max=10, self_convergence=False)
    ledger = build_ledger(model, pert, grid, table=table)
    fit = fit_sandwich(table, ledger, engine_for(model, pert, grid, 10), 10)
    print(f"c={c:<5} C3={fit.C3:.6f} C4={fit.C4:.4f} C5={fit.C5:.6f} C6={fit.C6:.4f} "
          f"(fitted on t <= {fit.t_star}, composed to {fit.certified_until})")
