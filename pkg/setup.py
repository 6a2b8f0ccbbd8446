import os

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # pure-Python install; the numpy fallback kernel is used
    cythonize = None

ext_modules = []
if cythonize is not None and not os.environ.get("VSSBD_NO_EXT"):
    ext_modules = cythonize(
        [
            Extension(
                "vssbackdoor._scan_ext",
                ["src/vssbackdoor/_scan_ext.pyx"],
                include_dirs=[np.get_include()],
                libraries=["m"],
                extra_compile_args=["-O3", "-march=native", "-ffast-math"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
