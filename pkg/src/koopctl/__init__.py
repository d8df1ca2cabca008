"""koopctl: bilinear Koopman identification and LMI feedback synthesis.

The pipeline, in dependency order:

1. ``plants``        control-affine pendulum dynamics and the RK4 discretizer
2. ``observables``   lifting maps (state-leading feature vectors)
3. ``babbling``      forced-response dataset generation with random gains
4. ``factorization`` selection/measurement pair (S, H) via blockwise least squares
5. ``edmd``          bilinear Koopman system-matrix identification
6. ``synthesis``     Lyapunov LMI gain synthesis with resampled candidates
7. ``evaluation``    closed-loop assessment on the true plant
8. ``cli``           pipeline driver (``koopctl`` entry point)
"""

__version__ = "0.1.0"

from . import (  # noqa: F401
    babbling,
    edmd,
    evaluation,
    factorization,
    observables,
    plants,
    synthesis,
    tensor,
)
