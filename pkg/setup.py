"""Build script for the optional compiled NCE kernel.

The package works without the extension (a numpy fallback is selected at
import time), so a failed compile downgrades to a warning instead of
aborting the install.
"""

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class optional_build_ext(build_ext):
    def run(self):
        try:
            super().run()
        except Exception as exc:  # missing compiler, broken toolchain
            print(f"WARNING: compiled kernel skipped ({exc}); "
                  "pure-numpy fallback will be used")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            print(f"WARNING: building {ext.name} failed ({exc}); "
                  "pure-numpy fallback will be used")


def extensions():
    try:
        import numpy
        from Cython.Build import cythonize
    except ImportError:
        return []
    ext = Extension(
        "anomstream._nce",
        ["src/anomstream/_nce.pyx"],
        include_dirs=[numpy.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=["-O3"],
    )
    return cythonize(
        [ext],
        compiler_directives={
            "language_level": 3,
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
            "initializedcheck": False,
        },
    )


setup(
    ext_modules=extensions(),
    cmdclass={"build_ext": optional_build_ext},
)
