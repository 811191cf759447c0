"""Build hook for the optional compiled kernel core.

The package is fully functional without the extension (a numpy fallback is
selected at import time); the extension just makes the small-matrix training
loops faster. Builds degrade gracefully when Cython or a C compiler is
missing.
"""

from setuptools import Extension, setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "dailoc.backend._kernels_c",
                ["src/dailoc/backend/_kernels_c.pyx"],
                include_dirs=[numpy.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
                optional=True,
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    pass

setup(ext_modules=ext_modules)
