import os

# On small CPU boxes, OpenBLAS oversubscription makes the many small matmuls
# in the desk-scale configs slower, not faster; pin before numpy loads.
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
