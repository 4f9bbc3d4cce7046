"""Build script for the optional compiled filter kernels.

The package is fully functional without the extension; ``modal_dekf.backend``
falls back to the pure NumPy loops when the import fails.
"""

import numpy
from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class OptionalBuildExt(build_ext):
    """Build the accelerator extension, degrading to pure Python on failure."""

    def run(self):
        try:
            super().run()
        except Exception as exc:  # compiler missing, etc.
            self._warn(exc)

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            self._warn(exc)

    @staticmethod
    def _warn(exc):
        print(f"WARNING: skipping compiled kernels, pure-Python fallback will be used ({exc})")


def make_extensions():
    try:
        from Cython.Build import cythonize
    except ImportError:
        return []
    ext = Extension(
        "modal_dekf._fastpath",
        ["src/modal_dekf/_fastpath.pyx"],
        include_dirs=[numpy.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=["-O3"],
    )
    return cythonize([ext], language_level="3")


setup(cmdclass={"build_ext": OptionalBuildExt}, ext_modules=make_extensions())
