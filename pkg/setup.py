"""Build script. The Cython kernel extension is optional: if Cython or a C
compiler is missing the package still installs and falls back to the numpy
reference kernels at import time."""

from setuptools import setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize

    ext_modules = cythonize(
        "src/granst/kernels/_fast.pyx",
        compiler_directives={
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
            "initializedcheck": False,
            "language_level": 3,
        },
    )
    for ext in ext_modules:
        ext.include_dirs.append(numpy.get_include())
        ext.define_macros.append(("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION"))
except Exception as exc:  # pragma: no cover - exercised only on broken toolchains
    import warnings

    warnings.warn(f"building without compiled kernels: {exc}")
    ext_modules = []

setup(ext_modules=ext_modules)
