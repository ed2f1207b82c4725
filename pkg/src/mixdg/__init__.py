"""Interior-penalty DG eigensolver for the mixed elasticity problem with weakly imposed stress symmetry.

Modules: ``mesh`` (triangulations and face skeleton), ``space`` (bases,
quadrature, dof maps), ``forms`` (matrix assembly), ``spectral``
(eigensolvers and mode classification), ``study`` (experiment harness) and
``cli`` (command line).
"""

__version__ = "0.1.0"
