# # From noisy data to a consensus gain
#
# Six pendulum followers track a leader pendulum.  We never hand the design
# the plant matrices: one follower is excited open loop for a while, and the
# gain is computed from that record plus a bound on the process noise.
#
# Run with `python3 demos/01_from_data_to_gain.py`.

# %%
import numpy as np

from ddstc import dataset, synthesis
from ddstc.plant import pendulum_zoh
from ddstc.topology import build_graph_matrices, pendulum_experiment_topology, validate_connectivity

np.set_printoptions(precision=4, suppress=True)

plant = pendulum_zoh()          # only used to generate data and to check results
topo = pendulum_experiment_topology()
print("topology:", validate_connectivity(topo).message)
gm = build_graph_matrices(topo)
print("H = L + P eigenvalues:", np.linalg.eigvalsh(gm.h))

# %% [markdown]
# ## Record 80 steps of one follower
#
# Inputs are uniform in [-1, 1]; the noise is drawn inside a ball of radius
# 0.01, which is also the bound the design is told about.

# %%
rho, w_bar = 80, 0.01
traj = dataset.collect_open_loop(plant, rho, noise_law=dataset.ball_noise(w_bar), seed=11, x0=[1.0, 0.5])
dm = dataset.assemble_matrices(traj, 1, rho)
theta = dataset.build_theta(dm, dataset.ball_noise_qmi(w_bar, rho, 2), plant.e)
print("data rank ok:", dataset.check_rank(theta))

# Every (A, B) that could have produced this record satisfies a quadratic
# matrix inequality.  The true pendulum must be one of them.
print("true plant min-eig:", np.linalg.eigvalsh(dataset.true_member_value(theta, plant))[0])
print("least-squares centre:\n", theta.center)

# %% [markdown]
# ## Design
#
# One LMI covers the whole set at once.  It returns the gain K, the
# triggering matrix Phi, and the certificates behind them.

# %%
design = synthesis.design_from_data(theta, gm, sigma=0.2, epsilon=2.0)
print("K   =", design.k)
print("Phi =\n", design.phi)
print("solver margin:", design.margins)

# %%
# Sanity check with the model we pretended not to know.
ok, lam = synthesis.model_based_stability_check(plant, design, gm)
acl = np.kron(np.eye(6), plant.a) + np.kron(gm.h, plant.b @ design.k)
print(f"true-plant certificate holds: {ok} (max eig {lam:.3g})")
print("closed-loop spectral radius:", max(abs(np.linalg.eigvals(acl))))

# %% [markdown]
# Too much noise and the data stop pinning the plant down.  The design
# says so instead of returning a gain.

# %%
loud = dataset.build_theta(dm, dataset.ball_noise_qmi(10.0, rho, 2), plant.e)
try:
    synthesis.design_from_data(loud, gm, 0.2, 2.0)
except synthesis.DesignError as exc:
    print("w_bar = 10:", exc)
