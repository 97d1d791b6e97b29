import platform

import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup


def _simd_flags():
    # the lockstep kernel gains ~2x from AVX2/FMA; only enable it when the
    # build host has it (AVX-512 via -march=native measured slower)
    if platform.machine() not in ("x86_64", "AMD64"):
        return []
    try:
        with open("/proc/cpuinfo") as fh:
            flags = set()
            for line in fh:
                if line.startswith("flags"):
                    flags.update(line.split(":", 1)[1].split())
                    break
    except OSError:
        return []
    return ["-mavx2", "-mfma"] if {"avx2", "fma"} <= flags else []


ext = Extension(
    "matchsync._kernel_c",
    ["src/matchsync/_kernel_c.pyx"],
    include_dirs=[np.get_include()],
    extra_compile_args=["-O3"] + _simd_flags(),
    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    optional=True,
)

setup(ext_modules=cythonize([ext], compiler_directives={"language_level": 3}))
