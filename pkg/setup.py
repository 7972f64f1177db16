"""Build script for the compiled tape engine.

The package works without the extension (a pure-Python engine is selected at
import time), so a failed extension build degrades performance but not
functionality.
"""

from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    extensions = cythonize(
        [
            Extension(
                "macrofin._tape_c",
                ["src/macrofin/_tape_c.pyx"],
                extra_compile_args=["-O3"],
            )
        ],
        language_level=3,
    )
except ImportError:
    extensions = []

setup(ext_modules=extensions)
