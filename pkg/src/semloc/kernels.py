"""Backend selection for the hot kernels.

The compiled extension ``semloc._ckernels`` is used when it imports; otherwise
the numpy implementations in ``semloc._pykernels`` take over.  Setting
``SEMLOC_PURE_PYTHON=1`` forces the fallback.
"""

import logging
import os

from . import _pykernels

log = logging.getLogger(__name__)

_impl = _pykernels
BACKEND = "python"

if os.environ.get("SEMLOC_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # pragma: no cover - depends on the build
        log.debug("compiled kernels unavailable, using numpy fallback")

P_SKIP = _pykernels.P_SKIP

intersection_area = _impl.intersection_area
footprint_iou = _impl.footprint_iou
max_density = _impl.max_density
object_weights = _impl.object_weights
max_overlap = _impl.max_overlap
raycast = _impl.raycast
