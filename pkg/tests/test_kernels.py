import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cmr import kernels
from cmr.meshgraph import SparseMatrix

needs_compiled = pytest.mark.skipif(kernels.BACKEND != "cython", reason="compiled kernels not built")


def _sparse(seed, n, m):
    r = np.random.default_rng(seed)
    return SparseMatrix.from_dense(r.normal(size=(n, m)) * (r.uniform(size=(n, m)) < 0.3))


@needs_compiled
@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 40), st.integers(1, 40), st.integers(1, 5))
def test_csr_backends_bit_identical(seed, n, m, c):
    s = _sparse(seed, n, m)
    x = np.random.default_rng(seed + 1).normal(size=(m, c))
    a = kernels.csr_matmul(s.indptr, s.indices, s.data, x)
    b = kernels.csr_matmul_python(s.indptr, s.indices, s.data, x)
    assert a.tobytes() == b.tobytes()


@needs_compiled
def test_csr_float32():
    s = _sparse(0, 9, 7)
    x = np.random.default_rng(1).normal(size=(7, 3)).astype(np.float32)
    a = kernels.csr_matmul(s.indptr, s.indices, s.data, x)
    b = kernels.csr_matmul_python(s.indptr, s.indices, s.data, x)
    assert a.dtype == np.float32
    assert a.tobytes() == b.tobytes()


@needs_compiled
@pytest.mark.parametrize("seed", range(5))
def test_raster_backends_identical(seed):
    r = np.random.default_rng(seed)
    px = r.uniform(-4, 36, size=(30, 2))
    z = r.normal(size=30)
    faces = np.array([r.choice(30, 3, replace=False) for _ in range(25)], dtype=np.int64)
    a = kernels.rasterize_faces(px, z, faces, 32, 32)
    b = kernels.rasterize_faces_python(px, z, faces, 32, 32)
    np.testing.assert_array_equal(a[0], b[0])
    assert a[1].tobytes() == b[1].tobytes()


def test_backend_override_env():
    code = "from cmr import kernels; print(kernels.BACKEND)"
    env = dict(os.environ, CMR_BACKEND="python")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
