"""Build the optional compiled codec/kernel core.

The package works without it (pure-Python fallback selected at import);
the extension is marked optional so installs succeed on boxes without a
C toolchain.
"""

import os

from setuptools import Extension, setup

ext = Extension(
    "simhijack._speedups",
    ["src/simhijack/_speedups.pyx"],
    # -ffp-contract=off keeps float results bit-identical to the pure
    # Python backend (no FMA contraction differences).
    extra_compile_args=["-O2", "-ffp-contract=off"],
    language="c",
)
ext.optional = True

ext_modules = []
if os.path.exists(ext.sources[0]):
    try:
        from Cython.Build import cythonize

        ext_modules = cythonize([ext], language_level=3)
    except ImportError:
        pass

setup(ext_modules=ext_modules)
