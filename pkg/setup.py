"""Build the optional compiled simulator kernel.

The package works without it: ``compdesign.sim`` falls back to the pure-Python
kernel when the extension is missing.
"""
import os

from setuptools import setup

ext_modules = []
if not os.environ.get("COMPDESIGN_NO_EXT"):
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "compdesign.sim._kernel_c",
                    ["src/compdesign/sim/_kernel_c.pyx"],
                    include_dirs=[np.get_include()],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                    # keep a*b+c unfused so results match the Python fallback bitwise
                    extra_compile_args=["-O2", "-ffp-contract=off"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
