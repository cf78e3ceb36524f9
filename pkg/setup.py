"""Build script: compiles the optional Cython attention kernel.

The package is fully functional without the extension (a numpy fallback is
selected at import time), so any build failure here is non-fatal.
"""

import sys

from setuptools import setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [
            Extension(
                "s2g._attnkern",
                ["src/s2g/_attnkern.pyx"],
                include_dirs=[numpy.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )
except Exception as exc:  # pragma: no cover - build-env dependent
    print(f"s2g: skipping Cython extension build ({exc})", file=sys.stderr)

setup(ext_modules=ext_modules)
