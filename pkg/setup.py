import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

# -ffp-contract=off keeps the C loops bit-for-bit identical to the numpy
# fallback (no FMA contraction); do not add -ffast-math.
extensions = [
    Extension(
        "dualgrid.kernels._core",
        ["src/dualgrid/kernels/_core.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=["-O2", "-ffp-contract=off"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
]

setup(
    ext_modules=cythonize(
        extensions,
        compiler_directives={"language_level": "3"},
    )
)
