"""Builds the optional compiled kernel extension.

The package works without it (a numpy fallback is selected at import time),
so the extension is marked optional: a missing compiler degrades to the
pure-Python backend instead of failing the install.
"""

from setuptools import Extension, setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "qrec.kernels._ext",
                ["src/qrec/kernels/_ext.pyx"],
                include_dirs=[numpy.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
                optional=True,
            )
        ],
        language_level=3,
    )
except ImportError:
    pass

setup(ext_modules=ext_modules)
