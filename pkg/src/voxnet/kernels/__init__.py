"""Hot volumetric kernels with a compiled backend and a numpy fallback.

The compiled extension is used when it imports; set ``VOXNET_PURE_PYTHON=1``
to force the fallback. ``BACKEND`` names the active implementation.
"""

import os

from . import _pykernels as python_backend

compiled_backend = None
if not os.environ.get("VOXNET_PURE_PYTHON"):
    try:
        from . import _ckernels as compiled_backend
    except ImportError:  # extension not built
        compiled_backend = None

_active = compiled_backend if compiled_backend is not None else python_backend
BACKEND = "cython" if compiled_backend is not None else "python"

im2col3d = _active.im2col3d
col2im3d = _active.col2im3d
maxpool3d_forward = _active.maxpool3d_forward
maxpool3d_backward = _active.maxpool3d_backward

__all__ = [
    "BACKEND",
    "compiled_backend",
    "python_backend",
    "im2col3d",
    "col2im3d",
    "maxpool3d_forward",
    "maxpool3d_backward",
]
