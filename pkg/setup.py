"""Build script for the compiled rollout kernels.

The package works without the extension (a pure-NumPy fallback is selected
at import time); building it just makes rollout generation and trace
backprop much faster.
"""

import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

ext = Extension(
    "bacr.kernels._core",
    ["src/bacr/kernels/_core.pyx"],
    include_dirs=[np.get_include()],
    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
)

setup(ext_modules=cythonize(ext, language_level=3))
