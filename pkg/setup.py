"""Builds the optional compiled convolution kernels.

The package works without the extension (a pure-numpy backend is selected
at import time), so any build failure here is downgraded to a warning.
Set ZIPKIT_NO_EXT=1 to skip the extension build entirely.
"""

import os
import sys

from setuptools import Extension, setup

ext_modules = []
if os.environ.get("ZIPKIT_NO_EXT") != "1":
    try:
        from Cython.Build import cythonize

        ext_modules = cythonize(
            [
                Extension(
                    "zipkit._kernels._conv_cy",
                    ["src/zipkit/_kernels/_conv_cy.pyx"],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={"language_level": 3},
        )
    except ImportError as exc:
        print(f"zipkit: Cython unavailable ({exc}); building without the "
              "compiled kernels", file=sys.stderr)

setup(ext_modules=ext_modules)
