import numpy as np
from setuptools import setup

try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        "src/styledistill/_kernels_cy.pyx",
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    # Pure-python fallback kernels are used when the extension is absent.
    ext_modules = []

setup(
    ext_modules=ext_modules,
    include_dirs=[np.get_include()],
)
