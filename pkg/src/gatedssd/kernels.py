"""Backend selection for the convolution hot loops.

The compiled core (``_ckernels``) is used when importable; otherwise the numpy
fallback in ``_pykernels``. Set ``GATEDSSD_BACKEND=python`` to force the
fallback, or call :func:`use_backend` at runtime.
"""

import os

from gatedssd import _pykernels

try:
    from gatedssd import _ckernels
except ImportError:  # extension not built
    _ckernels = None

BACKENDS = ("cython", "python")


class _Active:
    name = "python"
    im2col = staticmethod(_pykernels.im2col)
    col2im = staticmethod(_pykernels.col2im)
    depthwise_forward = staticmethod(_pykernels.depthwise_forward)
    depthwise_backward = staticmethod(_pykernels.depthwise_backward)


active = _Active()


def available_backends():
    return [name for name in BACKENDS if name == "python" or _ckernels is not None]


def use_backend(name):
    """Switch the process-wide kernel backend; returns the previous name."""
    if name not in BACKENDS:
        raise ValueError(f"unknown backend {name!r}; choose from {BACKENDS}")
    if name == "cython" and _ckernels is None:
        raise RuntimeError("compiled kernels are not built; reinstall the package with Cython available")
    module = _ckernels if name == "cython" else _pykernels
    previous = active.name
    for fn in ("im2col", "col2im", "depthwise_forward", "depthwise_backward"):
        setattr(_Active, fn, staticmethod(getattr(module, fn)))
    _Active.name = name
    return previous


def backend_name():
    return active.name


_requested = os.environ.get("GATEDSSD_BACKEND", "").strip().lower()
if _requested == "python" or _ckernels is None:
    use_backend("python")
else:
    use_backend("cython")
