"""Hot-kernel backend, chosen at import.

The compiled extension ``bjsfod._ckernels`` is used when it was built;
otherwise (or when ``BJSFOD_PURE_PYTHON=1``) the numpy versions in
``bjsfod._pykernels`` are used.  Both expose the same functions.
"""
import os

from . import _pykernels

if os.environ.get("BJSFOD_PURE_PYTHON", "") not in ("", "0"):
    _impl = _pykernels
else:
    try:
        from . import _ckernels as _impl
    except ImportError:
        _impl = _pykernels

BACKEND = _impl.NAME
block_shrink = _impl.block_shrink
masked_gram = _impl.masked_gram
strict_local_maxima = _impl.strict_local_maxima
bjs_batch = _impl.bjs_batch
python = _pykernels


def compiled():
    """The compiled module, or None when it is unavailable."""
    try:
        from . import _ckernels
    except ImportError:
        return None
    return _ckernels
