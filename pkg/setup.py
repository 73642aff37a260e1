"""Build script for the optional compiled kernel core.

The package is fully functional without the extension: duala.kernels falls
back to the pure-NumPy implementations when duala._kernels is missing or
when DUALA_NO_EXT=1 is set.
"""

import numpy as np
from setuptools import Extension, setup
from Cython.Build import cythonize

extensions = [
    Extension(
        "duala._kernels",
        ["src/duala/_kernels.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=["-O3"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
]

setup(ext_modules=cythonize(extensions, compiler_directives={"language_level": "3"}))
