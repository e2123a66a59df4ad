"""Energy-distance distributional soft actor-critic, desk scale.

Subpackages:

- `gauss`: Gaussian/Dirac return distributions, the closed-form squared-Cramer
  (energy) distance, its quadrature discretization, and analytic gradients.
- `tabular`: exact finite-MDP operators and iteration schemes, with
  contraction measurement.
- `verify`: randomized certification probes over the tabular engine.
- `nn`: flat-parameter MLPs with reverse-mode gradients, Adam, Polyak.
- `envs`: seedable analytic control tasks (pendulum, point mass, noisy chain).
- `agent`: replay buffer, actor/critic networks, losses, training loop and the
  overestimation probe.
- `cli`: the `cramer-rl` command (train / eval / verify / analyze-gradients).
"""

__version__ = "0.1.0"

from .gauss import GaussianReturn, QuadratureSpec, energy_distance_closed_form  # noqa: F401
