"""Build script for the compiled kernel extension.

The extension is optional at runtime: if it fails to build or import, the
package falls back to the numpy implementation in ``hybridpdf._fallback``.
"""
import os

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # pragma: no cover - build without Cython
    cythonize = None

# -ffp-contract=off keeps floating point results close to the numpy fallback
compile_args = ["-O3", "-ffp-contract=off"]
link_args = []
if os.environ.get("HYBRIDPDF_NO_OPENMP") != "1":
    compile_args.append("-fopenmp")
    link_args.append("-fopenmp")

ext_modules = []
if cythonize is not None:
    ext_modules = cythonize(
        [
            Extension(
                "hybridpdf._kernels",
                ["src/hybridpdf/_kernels.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=compile_args,
                extra_link_args=link_args,
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
