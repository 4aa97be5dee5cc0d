"""Hot inner loops, with a numba path and a pure-numpy fallback.

Set ``LDANON_DISABLE_NUMBA=1`` to force the numpy path (useful for
debugging and on platforms without numba). ``BACKEND`` names the one in use.
"""
import os

from . import _numpy

_disabled = os.environ.get("LDANON_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes"}

if _disabled:
    _impl = _numpy
    BACKEND = "numpy"
else:
    try:
        from . import _numba as _impl
        BACKEND = "numba"
    except ImportError:  # pragma: no cover - numba is an optional speedup
        _impl = _numpy
        BACKEND = "numpy"

emd_rows = _impl.emd_rows
constrained_argmin = _impl.constrained_argmin
rank_of = _impl.rank_of
auc_numerator = _impl.auc_numerator

__all__ = ["BACKEND", "emd_rows", "constrained_argmin", "rank_of", "auc_numerator"]
