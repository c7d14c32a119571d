import os

# Must happen before numpy is first imported anywhere in the test session;
# see the note in ecgrecon/__init__.py.
for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")
