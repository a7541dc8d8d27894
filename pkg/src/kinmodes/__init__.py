"""kinmodes: special macroscopic modes of confined linear kinetic equations.

Simulates dh/dt = T h + C h for a BGK collision operator and a confining
potential, constructs the attracting macroscopic mode from the global
conservation laws, and certifies the hypocoercive decay together with the
geometric constants (Poincare, rigidity) that govern its rate.
"""

from . import basis, collision, diagnostics, evolve, modes, potential, spectral

__all__ = [
    "basis",
    "collision",
    "diagnostics",
    "evolve",
    "modes",
    "potential",
    "spectral",
]

__version__ = "0.1.0"
