"""splatdistill: distill tri-plane radiance fields into 3D Gaussian splat scenes."""

import os

# Pick the OpenMP layer up front; the TBB probe is noisy on older TBBs.
os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")
# Spinning OMP workers starve the BLAS pool between kernel launches on
# small machines; parked workers cost ~nothing at our kernel sizes.
os.environ.setdefault("OMP_WAIT_POLICY", "passive")


def _tune_allocator():
    # glibc mmap()s multi-megabyte blocks and returns them to the kernel on
    # free, so every fresh activation buffer page-faults. Keeping large
    # blocks on the heap trades resident memory for a large win on the
    # training hot path. Best effort: silently skipped off glibc.
    try:
        import ctypes

        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
    except Exception:
        pass


_tune_allocator()

__version__ = "0.1.0"
