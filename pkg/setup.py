"""Build script: compiles the optional Cython kernel extension.

The extension is a speedup only -- if Cython or a C compiler is missing the
package installs anyway and falls back to the pure-Python kernels.
"""

from setuptools import setup

ext_modules = []
try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        ["src/chainsim/_kernels_c.pyx"],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    pass

setup(ext_modules=ext_modules)
