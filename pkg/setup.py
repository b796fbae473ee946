import os

from setuptools import Extension, setup

ext_modules = []
if os.environ.get("FIELDCHAIN_PURE_PYTHON") != "1":
    try:
        from Cython.Build import cythonize

        ext_modules = cythonize(
            [
                Extension(
                    "fieldchain.kernels._core",
                    sources=["src/fieldchain/kernels/_core.pyx"],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        # Pure-python fallback kernels are always available.
        ext_modules = []

setup(ext_modules=ext_modules)
