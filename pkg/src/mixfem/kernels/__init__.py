"""Hot-kernel backend selection.

The compiled Cython core is preferred; the pure NumPy/SciPy fallback is
used when the extension was not built or when MIXFEM_PURE_PYTHON=1.
``BACKEND`` reports which one is active.
"""

import os

if os.environ.get("MIXFEM_PURE_PYTHON", "") not in ("", "0"):
    from . import _pure as _impl

    BACKEND = "python"
else:
    try:
        from . import _core as _impl  # type: ignore[attr-defined]

        BACKEND = "compiled"
    except ImportError:
        from . import _pure as _impl

        BACKEND = "python"

triangle_geometry = _impl.triangle_geometry
mass_blocks = _impl.mass_blocks
operator_blocks = _impl.operator_blocks
locate_points = _impl.locate_points
bspline_design = _impl.bspline_design

__all__ = [
    "BACKEND",
    "triangle_geometry",
    "mass_blocks",
    "operator_blocks",
    "locate_points",
    "bspline_design",
]
