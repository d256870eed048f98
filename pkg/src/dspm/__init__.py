"""Desk-scale trainable PatchMatch multi-view stereo.

Kept import-light on purpose: the CLI applies the DSPM_THREADS cap to the
BLAS thread pool before any numpy-backed submodule is loaded.
"""

__version__ = "0.1.0"
