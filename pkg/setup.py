from setuptools import setup, Extension

try:
    from Cython.Build import cythonize
    import numpy as np
except ImportError:  # build without the compiled kernels
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "voxnet.kernels._ckernels",
                ["src/voxnet/kernels/_ckernels.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )

setup(ext_modules=ext_modules)
