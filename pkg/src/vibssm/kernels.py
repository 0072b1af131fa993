"""Surface kernels with compiled fast path.

The Cython extension ``vibssm._kernels`` is used when it was built; otherwise
the NumPy implementation in ``vibssm._kernels_py`` is used.  Setting the
environment variable ``VIBSSM_PURE_PYTHON=1`` forces the NumPy path.
"""

import os

from vibssm import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("VIBSSM_PURE_PYTHON", "0") != "1":
    try:
        from vibssm import _kernels as _compiled
    except ImportError:  # extension not built
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"

implicit_sdf = _impl.implicit_sdf
project_to_surface = _impl.project_to_surface
radial_scale = _kernels_py.radial_scale

__all__ = ["BACKEND", "implicit_sdf", "project_to_surface", "radial_scale"]
