"""Backend selection for the hot kernels.

The compiled ``_kernels`` extension is used when it imports; otherwise the
numpy fallback in ``_pykernels``. Set ``MTSPINE_KERNELS=python`` to force the
fallback. Both backends produce identical results.
"""
import os

import numpy as np

from . import _pykernels

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

BACKENDS = ("compiled", "python")

backend = None
_impl = None


def available_backends():
    return [b for b in BACKENDS if b != "compiled" or _compiled is not None]


def use_backend(name):
    """Switch kernel implementation at runtime ("compiled" or "python")."""
    global backend, _impl
    if name == "compiled":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not built; run `pip install -e .`")
        _impl = _compiled
    elif name == "python":
        _impl = _pykernels
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    backend = name


def im2col(x, kh, kw, stride, pad):
    return _impl.im2col(np.ascontiguousarray(x, dtype=np.float64), kh, kw, stride, pad)


def col2im(cols, shape, kh, kw, stride, pad):
    cols = np.ascontiguousarray(cols, dtype=np.float64)
    return _impl.col2im(cols, tuple(shape), kh, kw, stride, pad)


def label_components(mask):
    return _impl.label_components(mask)


conv_out_size = _pykernels.conv_out_size

use_backend(
    "python"
    if os.environ.get("MTSPINE_KERNELS", "").lower() == "python" or _compiled is None
    else "compiled"
)
