"""Build script: compiles the optional PRNG kernel extension.

The extension is marked optional; if Cython or a C compiler is missing the
package installs anyway and falls back to the pure numpy kernels at import.
"""

from setuptools import Extension, setup

ext_modules = []
try:
    import numpy as np
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "fragaudit._kernels",
                ["src/fragaudit/_kernels.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                optional=True,
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except Exception as exc:  # pragma: no cover - build-environment dependent
    print(f"fragaudit: skipping compiled kernels ({exc!r}); pure-python fallback will be used")

setup(ext_modules=ext_modules)
