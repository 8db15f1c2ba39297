"""Recovers geometry and physical parameters of a continuum object from
sparse-view video: differentiable MLS-MPM simulation, voxel radiance fields,
Lagrangian particle optimization, and the iterative geometry-physics loop.
"""

__version__ = "0.1.0"
