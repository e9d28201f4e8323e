"""Build script for the optional compiled kernels.

The package works without the extension (a pure-numpy fallback is selected at
import time), so failure to compile is deliberately non-fatal: we build what we
can and move on.
"""

import numpy
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

extensions = []
if cythonize is not None:
    extensions = cythonize(
        [
            Extension(
                "ionlock._kernels",
                sources=["src/ionlock/_kernels.pyx"],
                include_dirs=[numpy.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                # Bit-parity with the pure-Python reference backend requires
                # identical floating-point semantics: no FMA contraction and
                # no sin+cos -> sincos() fusion (glibc sincos is 1 ulp off
                # plain sin for some arguments).
                extra_compile_args=[
                    "-O3",
                    "-ffp-contract=off",
                    "-fno-builtin-sin",
                    "-fno-builtin-cos",
                ],
            )
        ],
        compiler_directives={
            "language_level": 3,
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
        },
    )

setup(ext_modules=extensions)
