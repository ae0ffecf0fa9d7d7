import os

import numpy as np
from setuptools import Extension, setup

ext_modules = []
if os.environ.get("SPECTRACAST_PURE_PYTHON", "") != "1":
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "spectracast._kernels._ckernels",
                ["src/spectracast/_kernels/_ckernels.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3", "-fno-trapping-math"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
