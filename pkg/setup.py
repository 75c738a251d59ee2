"""Build script for the optional compiled scan kernel.

The package works without the extension (a numpy fallback is selected at
import time); building it just makes the greedy sparsifier's candidate scan
much faster.
"""

import numpy
from setuptools import setup
from Cython.Build import cythonize

setup(
    ext_modules=cythonize(
        ["src/sparsegain/_scan_cy.pyx"],
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
        },
    ),
    include_dirs=[numpy.get_include()],
)
