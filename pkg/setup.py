"""Optional compiled-kernel build.

The package runs without the extension (a pure-Python fallback is selected
at import time); building it speeds up corpus-scale embedding and retrieval.
Set TRIALSCREEN_NO_EXT=1 to skip compilation entirely.
"""

import os

from setuptools import Extension, setup

ext_modules = []
if os.environ.get("TRIALSCREEN_NO_EXT") != "1":
    try:
        from Cython.Build import cythonize

        ext_modules = cythonize(
            [Extension("trialscreen._kernels", ["src/trialscreen/_kernels.pyx"])],
            compiler_directives={"language_level": 3},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
