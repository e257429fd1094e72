"""Kernel selection: compiled extension when importable, pure Python otherwise.

Set ``COMPDESIGN_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _kernel_py

if os.environ.get("COMPDESIGN_PURE_PYTHON"):
    kernel = _kernel_py
    BACKEND = "python"
else:
    try:
        from . import _kernel_c as kernel
        BACKEND = "cython"
    except ImportError:
        kernel = _kernel_py
        BACKEND = "python"


def get_kernel(name=None):
    """Return the kernel module by name (``"cython"``/``"python"``), default the active one."""
    if name is None:
        return kernel
    if name == "python":
        return _kernel_py
    if name == "cython":
        from . import _kernel_c
        return _kernel_c
    raise ValueError(f"unknown backend {name!r}")
