"""Builds the optional Cython recurrence kernel.

The package works without it; ``fastweights.kernels`` falls back to numpy.
"""
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "fastweights._recurrence",
                ["src/fastweights/_recurrence.pyx"],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
