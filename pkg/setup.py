"""Build script for the optional compiled kernel core.

The package is pure Python except for rankalloc._kernels._fastcore, a small
Cython extension holding the dense inference kernels used on the sampling hot
path.  If the extension cannot be built the package still works: the kernel
dispatcher falls back to the numpy reference implementation at import time.
"""

from setuptools import setup

try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        "src/rankalloc/_kernels/_fastcore.pyx",
        language_level=3,
    )
except ImportError:
    ext_modules = []

setup(ext_modules=ext_modules)
