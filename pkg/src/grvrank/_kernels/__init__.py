"""Hot-kernel backend selection.

The compiled extension is preferred when present; the numpy fallback is
picked automatically otherwise, or forced with GRVRANK_PURE=1 (useful for
benchmarking and for testing both paths).
"""

import os

from . import _pure

if os.environ.get("GRVRANK_PURE", "0") not in ("", "0"):
    _impl = _pure
    BACKEND = "pure"
else:
    try:
        from . import _speedups as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _pure
        BACKEND = "pure"

cox_breslow_terms = _impl.cox_breslow_terms
mf_epoch = _impl.mf_epoch

__all__ = ["BACKEND", "cox_breslow_terms", "mf_epoch"]
