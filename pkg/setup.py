"""Build script for the optional compiled kernels.

The Cython extension is optional: when Cython or a C compiler is missing the
package installs without it and ``psycal.kernels`` falls back to the pure
Python implementations.
"""
import os

import numpy as np
from setuptools import Extension, setup

ext_modules = []
if not os.environ.get("PSYCAL_NO_EXT"):
    try:
        from Cython.Build import cythonize
    except ImportError:
        cythonize = None
    if cythonize is not None:
        extensions = [
            Extension(
                "psycal._ckernels",
                ["src/psycal/_ckernels.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ]
        ext_modules = cythonize(
            extensions,
            compiler_directives={"language_level": "3", "boundscheck": False, "wraparound": False},
        )

setup(ext_modules=ext_modules)
