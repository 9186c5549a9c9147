"""cops: continuous-time field prediction from sparse sensors, desk scale.

Subpackages:
  tensor      dense tensors + reverse-mode autodiff tape
  dynamics    synthetic PDE trajectory generators and dataset container
  encoder     Gabor-filter multiplicative encoder for (value, coordinate) pairs
  gridmap     irregular-point <-> uniform-grid message passing, query decoding
  ode         multi-scale graph ODE right-hand side and fixed-step RK4 solver
  correction  discrete Markov-style latent corrector
  pipeline    end-to-end model, training loop, evaluation protocol
  bounds      hybrid continuous-discrete error-bound verifier
  cli         command-line entry point
"""

__version__ = "0.1.0"
