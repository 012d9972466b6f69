"""Inverse rendering with a neural radiance prior.

Submodules:

``geometry``     scene description, ray casting, cameras;
``materials``    parameter fields and the diffuse BRDF;
``autodiff``     array-valued reverse-mode tape and Adam;
``neuralfield``  hash-grid encoded radiance network;
``transport``    path tracing and the rendering-equation estimators;
``inverse``      losses, datasets and the optimisation loop;
``cli``          command-line entry point.
"""

__version__ = "0.1.0"

from . import autodiff, geometry, materials, neuralfield, transport  # noqa: F401
