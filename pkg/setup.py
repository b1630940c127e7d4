"""Builds the optional compiled convolution kernels.

The package is fully functional without them (a NumPy fallback is selected
at import time), so a missing compiler or Cython only costs speed.
"""

from setuptools import setup

ext_modules = []
try:
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [
            Extension(
                "layerfeed.kernels._convkernels",
                ["src/layerfeed/kernels/_convkernels.pyx"],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={
            "language_level": 3,
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
        },
    )
except ImportError:
    pass

setup(ext_modules=ext_modules)
