"""Adaptive spectral inversion for time-harmonic inverse medium problems.

The package is organised bottom-up:

* :mod:`asinv.mesh` -- structured triangulations of rectangles.
* :mod:`asinv.medium` -- piecewise-constant media and region classification.
* :mod:`asinv.linalg` -- sparse factorizations, Lanczos, Gram-Schmidt, QCQP.
* :mod:`asinv.fem` -- P1 assembly and the Helmholtz forward solver.
* :mod:`asinv.spectral` -- adaptive spectral decompositions and estimate checks.
* :mod:`asinv.inversion` -- misfit, adjoint gradient, BFGS and the ASI loop.
* :mod:`asinv.cli` -- configuration, scenarios and report emission.
"""

__version__ = "0.1.0"
