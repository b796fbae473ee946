"""Hot interpolation kernels with two interchangeable backends.

``_ref`` is pure numpy and always available; ``_core`` is a compiled
Cython extension built at install time. The active backend is picked at
import: compiled if present, else the reference. Set the environment
variable ``FIELDCHAIN_KERNELS`` to ``python`` or ``compiled`` to force
one (``compiled`` raises if the extension is missing).

Both backends implement the identical contract:

  vm_forward(den_planes, den_lines, app_planes, app_lines, coords)
      -> (sigma_raw (S,), feats (S, 3*Ra))
  vm_backward(..., d_sigma, d_feats, grads or None, need_coord_grad)
      -> d_coords (S, 3) or None

where factor arrays are C-contiguous float64 with shapes
(3, R, N, N) / (3, R, N) and ``coords`` are continuous grid coordinates
in [0, N-1]. Gradient buffers are accumulated in place, serially, so
results are deterministic.
"""

import os

from . import _ref

try:
    from . import _core  # type: ignore[attr-defined]

    HAVE_COMPILED = True
except ImportError:
    _core = None
    HAVE_COMPILED = False

_forced = os.environ.get("FIELDCHAIN_KERNELS", "auto").lower()
if _forced in ("auto", ""):
    _active = _core if HAVE_COMPILED else _ref
elif _forced in ("python", "ref", "numpy"):
    _active = _ref
elif _forced in ("compiled", "cython", "c"):
    if not HAVE_COMPILED:
        raise ImportError(
            "FIELDCHAIN_KERNELS=compiled but the extension is not built"
        )
    _active = _core
else:
    raise ValueError(f"unknown FIELDCHAIN_KERNELS value: {_forced!r}")

BACKEND = "compiled" if _active is _core else "python"

vm_forward = _active.vm_forward
vm_backward = _active.vm_backward


def get_backend(name: str):
    """Return the module implementing ``name`` ('python' or 'compiled')."""
    if name == "python":
        return _ref
    if name == "compiled":
        if not HAVE_COMPILED:
            raise ImportError("compiled kernel backend not built")
        return _core
    raise ValueError(name)
