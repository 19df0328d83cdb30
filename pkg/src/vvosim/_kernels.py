"""Kernel backend selection.

The compiled extension is preferred; set ``VVOSIM_PURE_PYTHON=1`` to force the
pure-Python implementation (used by the equivalence tests and the benchmark).
"""

import os

from . import _pykernels

BACKEND = "python"
crc16_dnp = _pykernels.crc16_dnp
sweep = _pykernels.sweep

if os.environ.get("VVOSIM_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels
    except ImportError:  # extension not built
        _ckernels = None
    if _ckernels is not None:
        BACKEND = "cython"
        crc16_dnp = _ckernels.crc16_dnp
        sweep = _ckernels.sweep


def backends():
    """Mapping of every importable backend name to its module."""
    out = {"python": _pykernels}
    try:
        from . import _ckernels as ck
        out["cython"] = ck
    except ImportError:
        pass
    return out
