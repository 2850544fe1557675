"""Score-based simulation-based inference engine.

Subpackages and modules:

- ``nn``         minimal differentiable network stack (residual MLP, deep sets,
                 Adam/AdamW, EMA, checkpoints)
- ``schedules``  log-SNR noise schedules, variance kinds, drift/diffusion algebra
- ``objectives`` perturbation kernel, losses, prediction conversions, OT couplings,
                 consistency training
- ``score_model`` trained network wrapped as an evaluable score/velocity field
- ``samplers``   reverse-time SDE/ODE solvers, Langevin, predictor-corrector,
                 consistency multistep, probability-flow log densities
- ``guidance``   classifier-free guidance, constraint guidance, compositional and
                 hierarchical score aggregation
- ``tasks``      benchmark simulators, priors, transforms, datasets, summaries
- ``metrics``    C2ST, MMD, NRMSE, calibration error, contraction
- ``harness``    config-driven train/sample/eval/benchmark runner
"""

__version__ = "0.1.0"
