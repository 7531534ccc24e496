"""Kuramoto-Sivashinsky and Kolmogorov flow trajectories with PGM snapshots."""

import numpy as np

from nudgeforge import dynamics, evaluation
from nudgeforge.observation import ObservationOperator, Rng, observe

# Kuramoto-Sivashinsky: 128 modes on [0, 32 pi), ETDRK4 with dt = 0.025
ks = dynamics.kuramoto_sivashinsky()
traj = dynamics.generate_trajectory(ks, dynamics.ks_initial_condition(ks.workspace), 400,
                                    burn_in=200)
print("KS mean", traj.mean(axis=1)[[0, -1]], "std", traj.std())
evaluation.emit_field(traj, traj.shape, "ks_spacetime.pgm")

# Kolmogorov flow at the 32 x 32 desk grid (64 x 64 is kolmogorov(64))
kf = dynamics.kolmogorov(32)
w = dynamics.generate_trajectory(kf, kf.default_initial_condition(seed=0), 1, burn_in=300)[0]
evaluation.emit_field(w, kf.extents, "kolmogorov_vorticity.pgm")

# the 6.25% observation operator keeps every fourth point along both axes
H = ObservationOperator.from_sparsity(kf.extents, 6.25)
y = observe(w, H, sigma=0.5, rng=Rng(0))
evaluation.emit_field(y, H.obs_extents, "kolmogorov_observed.pgm")
print("vorticity range", w.min(), w.max(), "observed points", H.obs_dim)
