"""Kernel dispatch.

The compiled extension is used when it imports; otherwise the numpy fallback
is used. Set ``FACTORADAPT_PURE_PYTHON=1`` to force the fallback.
"""

import os

import numpy as np

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("FACTORADAPT_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # pragma: no cover - depends on build
        _impl = _pykernels


def ctc_alpha_beta(logp, ext, impl=None):
    impl = impl or _impl
    return impl.ctc_alpha_beta(
        np.ascontiguousarray(logp, dtype=np.float64), np.ascontiguousarray(ext, dtype=np.int64)
    )


def ctc_prefix_extend(logp, r_nb, r_b, last, cands, blank, impl=None):
    impl = impl or _impl
    return impl.ctc_prefix_extend(
        np.ascontiguousarray(logp, dtype=np.float64),
        np.ascontiguousarray(r_nb, dtype=np.float64),
        np.ascontiguousarray(r_b, dtype=np.float64),
        int(last),
        np.ascontiguousarray(cands, dtype=np.int64),
        int(blank),
    )


def edit_distance_table(ref, hyp, impl=None):
    impl = impl or _impl
    return impl.edit_distance_table(
        np.ascontiguousarray(ref, dtype=np.int64), np.ascontiguousarray(hyp, dtype=np.int64)
    )


def implementations():
    """Available kernel modules keyed by backend name."""
    out = {"python": _pykernels}
    try:
        from . import _ckernels

        out["cython"] = _ckernels
    except ImportError:  # pragma: no cover
        pass
    return out
