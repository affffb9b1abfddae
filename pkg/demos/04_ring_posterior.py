"""A ring of eight modes: amortized flow versus exact posterior versus MCMC.

The prior on a 2-D coefficient vector is an equal mixture of eight
Gaussians on a circle of radius 5.  With a linear-Gaussian likelihood the
posterior is again an eight-component mixture, available in closed form.
A conditional flow trained once on simulated (beta, dataset) pairs turns
Gaussian noise into posterior draws for any new dataset.

Training a flow good enough for the acceptance checks takes about ten
minutes; this demo trains a short one (two minutes) unless a checkpoint is
given: ``python demos/04_ring_posterior.py runs/ring/models/flow.ckpt``.
"""

# %%
import sys
import time

import numpy as np

from amortlab.baselines import McmcConfig, effective_sample_size, exact_ring_posterior, rw_metropolis, sample_mixture
from amortlab.eval_uq import energy_distance, energy_null_quantile, mode_coverage
from amortlab.flow_posterior import FlowModel, load_flow, sample_posterior, train_flow
from amortlab.harness import ring_log_posterior
from amortlab.set_estimators import TrainConfig
from amortlab.task_gen import RingPriorSpec, gen_ring_task

spec = RingPriorSpec()
if len(sys.argv) > 1:
    flow = load_flow(sys.argv[1])
else:
    flow = FlowModel.build(np.random.default_rng(0))
    t0 = time.perf_counter()
    train_flow(flow, spec, 4096, TrainConfig(epochs=40, batch_tasks=128, learning_rate=2e-3),
               final_lr_fraction=0.02, pairs_per_task=8)
    print(f"trained a short flow in {time.perf_counter() - t0:.0f} s")

# %% [markdown]
# Three datasets: none at all (the posterior is the prior), four
# observations, and twenty observations.

# %%
for n_obs in (0, 4, 20):
    task = gen_ring_task(spec, n_obs, seed=11)
    mix = exact_ring_posterior(task, spec)
    flow_draws = sample_posterior(flow, task, 2000, seed=1)
    exact_draws = sample_mixture(mix, 2000, 2)
    q95 = energy_null_quantile(lambda n, g: sample_mixture(mix, n, g), 2000, 2000, np.random.default_rng(3), 50)
    print(f"\nn_obs = {n_obs}")
    print("  exact weights ", np.round(mix.weights, 3))
    print("  flow coverage ", np.round(mode_coverage(flow_draws, mix), 3))
    print(f"  energy distance {energy_distance(flow_draws, exact_draws):.4f}  (null 95% point {q95:.4f})")

# %% [markdown]
# Cost per task: random-walk Metropolis needs a long chain because it
# rarely hops between modes; the flow needs one ODE solve per draw.  The
# flow is asked for as many draws as the chain's effective sample size.

# %%
task = gen_ring_task(spec, 4, seed=12)
t0 = time.perf_counter()
chain, acc = rw_metropolis(ring_log_posterior(task, spec), McmcConfig(seed=4))
t_mcmc = time.perf_counter() - t0
n_eff = int(np.ceil(effective_sample_size(chain)))
t0 = time.perf_counter()
sample_posterior(flow, task, n_eff, seed=5)
t_flow = time.perf_counter() - t0
print(f"\nMetropolis: {len(chain)} kept draws, acceptance {acc:.2f}, ESS {n_eff}, {t_mcmc:.2f} s")
print(f"flow:       {n_eff} draws, {t_flow:.2f} s")
