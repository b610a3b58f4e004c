from setuptools import setup, Extension
from Cython.Build import cythonize
import numpy as np

extensions = [
    Extension(
        "sgsplat.raster._cpu",
        ["src/sgsplat/raster/_cpu.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=["-O3", "-march=native"],
    ),
    Extension(
        "sgsplat._fusedmlp",
        ["src/sgsplat/_fusedmlp.pyx", "csrc/fused_mlp.c"],
        include_dirs=[np.get_include(), "csrc"],
        extra_compile_args=["-O3", "-march=native", "-fopenmp"],
        extra_link_args=["-fopenmp"],
    ),
]

setup(ext_modules=cythonize(extensions, language_level=3))
