"""Latent-variable dynamics modeling, latent-space planning and exploration.

Subsystems:

- ``autodiff``: reverse-mode differentiation core, Adam, parameter store.
- ``trajectory``: the episode record and the plain-text dataset format.
- ``model``: stochastic recurrent sequence model and its inference network.
- ``objective``: regularized lower-bound training objective and evaluation
  likelihood bounds.
- ``planner``: latent-space model-predictive control.
- ``explorer``: model-likelihood-driven exploration policy, replay buffer
  and the alternating data-gathering loop.
- ``envs``: key-door gridworld and sparse-reward point navigation with
  scripted experts.
- ``pipeline`` / ``cli``: imitation training, baselines, evaluation and the
  command-line surface.
"""

__version__ = "0.1.0"
