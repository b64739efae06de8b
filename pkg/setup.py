import os

import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

# DEEPGESI_PORTABLE=1 drops -march=native for wheels built on one machine and
# run on another.
arch = [] if os.environ.get("DEEPGESI_PORTABLE") else ["-march=native"]

extensions = [
    Extension(
        "deepgesi._kernels._ckernels",
        ["src/deepgesi/_kernels/_ckernels.pyx"],
        include_dirs=[np.get_include(), "src/deepgesi/_kernels"],
        extra_compile_args=["-O3", *arch],
    )
]

setup(
    ext_modules=cythonize(extensions, compiler_directives={"language_level": "3"}),
)
