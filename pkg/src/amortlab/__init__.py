"""Amortized Bayesian inference laboratory built on numpy.

Submodules:

* :mod:`amortlab.task_gen` - synthetic regression tasks and meta-datasets,
* :mod:`amortlab.nn_core` - dense networks, backprop, Adam, checkpoints,
* :mod:`amortlab.set_estimators` - Deep Sets and Set Transformer estimators,
* :mod:`amortlab.flow_posterior` - flow-matching posterior sampler,
* :mod:`amortlab.baselines` - OLS, exact posteriors, Metropolis,
* :mod:`amortlab.eval_uq` - metrics and bootstrap stability,
* :mod:`amortlab.harness` - experiment runs and the command line.
"""

__version__ = "0.1.0"
