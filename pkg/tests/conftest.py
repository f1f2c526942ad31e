import os

# Small matmuls run faster single-threaded, and pinning the thread count keeps
# BLAS reductions bit-reproducible across runs on the same machine.
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")
