import numpy
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

extensions = [
    Extension(
        "adfl.engine._core",
        ["src/adfl/engine/_core.pyx"],
        include_dirs=[numpy.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=["-O3"],
        # The package runs on the pure-NumPy backend if this fails to build.
        optional=True,
    )
]

if cythonize is not None:
    extensions = cythonize(extensions, compiler_directives={"language_level": 3})

setup(ext_modules=extensions)
