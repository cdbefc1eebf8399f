# Monte Carlo Feynman-Kac values for a threshold functional.
#
# F(x, y) = c 1{|x - y| >= delta} charges every jump of size at least delta,
# so A_t = c N_t with N_t Poisson of rate lam = int_{|h| >= delta} 2C |h|^-2 dh.
# The Feynman-Kac value and the moments of A_t have closed forms to compare with.
import math

import numpy as np

from fkstable.model import cauchy_model, threshold_perturbation
from fkstable.pathsim import PathConfig, RngStream, feynman_kac_mc, large_jump_rate, moment_mc, sample_path

model = cauchy_model()
c, delta, t = 0.1, 0.5, 1.0
pert = threshold_perturbation(c, delta)
lam = large_jump_rate(model, delta)
print(f"rate of charged jumps: {lam:.6f} (4/pi = {4 / math.pi:.6f})")

# one path with its jump record
path = sample_path(model, pert, PathConfig(epsilon=0.2), [0.0], RngStream(seed=1, index=0))
for s, f, pre, post in zip(path.jumps.times, path.jumps.values, path.pre_states[:, 0], path.post_states[:, 0]):
    print(f"  jump at s={s:.4f}: {pre:+.4f} -> {post:+.4f}, F = {f}")
print(f"  X_t = {path.terminal[0]:+.4f}, A_t = {sum(path.jumps.values):.2f}")

cfg = PathConfig(epsilon=delta, t_horizon=t)
est = feynman_kac_mc(model, pert, cfg, [0.0], None, t, 100000, RngStream(1))
exact = math.exp(-lam * t * (1 - math.exp(-c)))
print(f"E[exp(-A_t)] = {est.estimate:.5f} +- {est.std_error:.5f}, exact {exact:.5f}")

m = lam * t
closed = {1: c * m, 2: c ** 2 * (m + m ** 2), 3: c ** 3 * (m + 3 * m ** 2 + m ** 3)}
for n in (1, 2, 3):
    est = moment_mc(model, pert, cfg, [0.0], None, t, n, 100000, RngStream(1))
    z = (est.estimate - closed[n]) / est.std_error
    print(f"E[A_t^{n}] = {est.estimate:.6f} +- {est.std_error:.1e}, exact {closed[n]:.6f} ({z:+.2f} sigma)")

# the estimate does not depend on the thread count
a = feynman_kac_mc(model, pert, cfg, [0.0], None, t, 20000, RngStream(7), threads=1)
b = feynman_kac_mc(model, pert, cfg, [0.0], None, t, 20000, RngStream(7), threads=4)
print("thread invariant:", np.array_equal(tuple(a), tuple(b)))
