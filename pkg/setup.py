import os

import numpy as np
from setuptools import Extension, setup

ext_modules = []
if os.environ.get("ADVNLG_NO_EXT") != "1":
    try:
        from Cython.Build import cythonize
    except ImportError:  # pure-Python install; kernels fall back to numpy
        cythonize = None
    if cythonize is not None:
        ext_modules = cythonize(
            [
                Extension(
                    "advnlg.kernels._gru_c",
                    ["src/advnlg/kernels/_gru_c.pyx"],
                    include_dirs=[np.get_include()],
                    libraries=["m"],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
