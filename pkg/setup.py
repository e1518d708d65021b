"""Build script for the optional compiled kernel extension.

The package works without the extension (numpy fallback is selected at
import time); compilation failures are therefore non-fatal.
"""

import sys

from setuptools import Extension, setup


def make_extensions():
    try:
        import numpy
        from Cython.Build import cythonize
    except ImportError:
        return []
    ext = Extension(
        "occnet._kernels",
        sources=["src/occnet/_kernels.pyx"],
        include_dirs=[numpy.get_include()],
        extra_compile_args=["-O3", "-march=native", "-ffast-math"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
    return cythonize([ext], language_level=3)


try:
    setup(ext_modules=make_extensions())
except Exception as exc:  # pragma: no cover
    sys.stderr.write(f"compiled kernels unavailable ({exc}); installing pure-python build\n")
    setup(ext_modules=[])
