import os

# Pin BLAS to one thread before numpy loads anywhere: small-matrix matmuls
# thrash on multiple threads and reproducibility statements assume one.
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")
