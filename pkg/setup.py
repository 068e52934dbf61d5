"""Builds the optional compiled kernels; the package works without them."""

from setuptools import Extension, setup


def get_extensions():
    try:
        import numpy as np
        from Cython.Build import cythonize
    except ImportError:
        print("Cython/numpy unavailable at build time: using the pure NumPy kernels.")
        return []
    ext = Extension(
        "mmtrisk.numcore._kernels_c",
        ["src/mmtrisk/numcore/_kernels_c.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=["-O3"],
        optional=True,
    )
    return cythonize([ext], compiler_directives={"language_level": "3"})


setup(ext_modules=get_extensions())
