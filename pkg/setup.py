import os

import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

# SPLAT2D_NO_EXT=1 builds a pure-Python install (the fallback kernels are used).
if os.environ.get("SPLAT2D_NO_EXT"):
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "splat2d._ckernels",
                ["src/splat2d/_ckernels.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
