"""Build the optional Cython kernels.

    pip install -e . --no-build-isolation

If Cython or a C compiler is missing the package still installs and falls
back to the numpy kernels at import time.
"""

from setuptools import Extension, setup

ext_modules = []
try:
    import numpy as np
    from Cython.Build import cythonize
except ImportError:
    pass
else:
    ext_modules = cythonize(
        [
            Extension(
                "drrspec._ckernels",
                sources=["src/drrspec/_ckernels.pyx"],
                include_dirs=[np.get_include(), "src/drrspec"],
                depends=["src/drrspec/_ckernels_impl.h"],
                extra_compile_args=["-O3", "-march=native", "-fopenmp-simd"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                optional=True,
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
