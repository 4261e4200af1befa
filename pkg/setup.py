from setuptools import Extension, setup
from Cython.Build import cythonize

# -ffp-contract=off keeps the compiled kernel bit-identical to the pure-Python
# fallback: both must do plain IEEE mul/add (no FMA fusion) through the same libm.
setup(
    ext_modules=cythonize(
        [
            Extension(
                "dvsim._kernel_cy",
                ["src/dvsim/_kernel_cy.pyx"],
                extra_compile_args=["-O3", "-ffp-contract=off"],
            )
        ],
        language_level=3,
    )
)
