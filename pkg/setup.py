"""Build script for the optional compiled kernel extension.

The package is fully functional without the extension (a pure-numpy
fallback is selected at import time); building it just makes the hot
per-point statistics update considerably faster.
"""
from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class OptionalBuildExt(build_ext):
    """Build the Cython extension if possible, otherwise skip it."""

    def run(self):
        try:
            super().run()
        except Exception as exc:  # missing compiler / Cython
            print(f"[voxplane] skipping compiled kernels: {exc}")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            print(f"[voxplane] skipping {ext.name}: {exc}")


def make_extensions():
    try:
        import numpy as np
        from Cython.Build import cythonize
    except ImportError:
        return []
    ext = Extension(
        "voxplane._kernels._core",
        sources=["src/voxplane/_kernels/_core.pyx"],
        include_dirs=[np.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=["-O3"],
    )
    return cythonize([ext], language_level=3)


setup(
    ext_modules=make_extensions(),
    cmdclass={"build_ext": OptionalBuildExt},
)
