"""Build the optional compiled kernels; the package falls back to numpy without them."""
from setuptools import setup

ext_modules = []
try:
    from Cython.Build import cythonize
    from setuptools import Extension
except ImportError:
    cythonize = None

if cythonize is not None:
    kernels = Extension(
        "eqprop._kernels",
        ["src/eqprop/_kernels.pyx"],
        extra_compile_args=["-O3"],
    )
    ext_modules = cythonize(
        [kernels],
        compiler_directives={"language_level": 3, "embedsignature": True},
    )

setup(ext_modules=ext_modules)
