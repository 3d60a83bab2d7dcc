"""agmlab: a laboratory for adaptive-gradient implicit sharpness regularization.

Modules:
    numerics  - dense linear algebra and seeded splittable randomness
    problems  - loss landscapes with analytic derivatives and label noise
    agm       - the general adaptive-gradient optimizer family
    manifold  - preconditioned flow projection and its derivatives on the manifold
    slowdyn   - slow ODE/SDE integrators, regularizers, fixed points, curl checks
    harness   - experiment configs, runners, CLI, CSV/JSON/SVG outputs
"""
from . import agm, manifold, numerics, problems, slowdyn

__version__ = "0.1.0"

__all__ = ["numerics", "problems", "agm", "manifold", "slowdyn", "__version__"]
