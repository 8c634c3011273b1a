"""Backend selection for the numeric kernels.

Two families with different winners, measured in benchmarks/bench_kernels.py:

  * batched MLP forward/backward: BLAS-backed numpy wins at every batch
    size, so these always route to the numpy implementation;
  * per-step geometry and stepping (polyline projection, oriented-rectangle
    collision grids, unicycle steps): the compiled extension wins by one to
    two orders of magnitude and is preferred when it imports.

Override the geometry choice with DRIVEALIGN_KERNELS=compiled|numpy
(forcing ``compiled`` raises if the extension is missing).
"""

import os

from . import _kernels_py

_requested = os.environ.get("DRIVEALIGN_KERNELS", "auto").lower()

if _requested in ("auto", "compiled", "c"):
    try:
        from . import _speedups as _geom
    except ImportError:
        if _requested != "auto":
            raise
        _geom = _kernels_py
elif _requested in ("numpy", "py", "python"):
    _geom = _kernels_py
else:
    raise RuntimeError(
        f"unknown DRIVEALIGN_KERNELS value {_requested!r}; "
        "expected 'auto', 'compiled' or 'numpy'")

BACKEND = _geom.BACKEND_NAME

ACT_LINEAR = _kernels_py.ACT_LINEAR
ACT_TANH = _kernels_py.ACT_TANH
ACT_RELU = _kernels_py.ACT_RELU

mlp_forward = _kernels_py.mlp_forward
mlp_backward = _kernels_py.mlp_backward
polyline_project = _geom.polyline_project
obb_overlap = _geom.obb_overlap
collision_grid = _geom.collision_grid
unicycle_steps = _geom.unicycle_steps
