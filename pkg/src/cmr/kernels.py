"""Hot kernels with a compiled backend and a NumPy fallback.

The compiled module ``cmr._kernels`` is used when it imports; setting
``CMR_BACKEND=python`` forces the fallback. Both backends perform the same
floating-point operations in the same order, so results are bit-identical.
"""
import os

import numpy as np

try:
    if os.environ.get("CMR_BACKEND", "").lower() == "python":
        raise ImportError("fallback forced by CMR_BACKEND")
    from cmr import _kernels as _compiled
except ImportError:
    _compiled = None

BACKEND = "cython" if _compiled is not None else "python"


def csr_matmul_python(indptr, indices, data, x):
    """CSR times dense; accumulates each row's terms in ascending column order."""
    nrows = indptr.shape[0] - 1
    out = np.zeros((nrows, x.shape[1]), dtype=x.dtype)
    nnz = np.diff(indptr)
    if nrows == 0 or nnz.max(initial=0) == 0:
        return out
    vals = data.astype(x.dtype, copy=False)
    for k in range(int(nnz.max())):
        rows = np.nonzero(nnz > k)[0]
        pos = indptr[rows] + k
        out[rows] = out[rows] + vals[pos][:, None] * x[indices[pos]]
    return out


def rasterize_faces_python(px, z, faces, height, width):
    face_id = np.full((height, width), -1, dtype=np.int64)
    depth = np.full((height, width), -np.inf, dtype=np.float64)
    for f in range(faces.shape[0]):
        i0, i1, i2 = (int(i) for i in faces[f])
        ax, ay = px[i0]
        bx, by = px[i1]
        cx, cy = px[i2]
        area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        if area == 0.0:
            continue
        if area < 0.0:
            i1, i2 = i2, i1
            bx, by = px[i1]
            cx, cy = px[i2]
            area = -area
        cmin = int(max(0.0, np.floor(min(ax, bx, cx) - 0.5)))
        cmax = int(min(width - 1.0, np.ceil(max(ax, bx, cx) - 0.5)))
        rmin = int(max(0.0, np.floor(min(ay, by, cy) - 0.5)))
        rmax = int(min(height - 1.0, np.ceil(max(ay, by, cy) - 0.5)))
        if cmax < cmin or rmax < rmin:
            continue
        qy = np.arange(rmin, rmax + 1, dtype=np.float64)[:, None] + 0.5
        qx = np.arange(cmin, cmax + 1, dtype=np.float64)[None, :] + 0.5
        w0 = (cx - bx) * (qy - by) - (cy - by) * (qx - bx)
        w1 = (ax - cx) * (qy - cy) - (ay - cy) * (qx - cx)
        w2 = (bx - ax) * (qy - ay) - (by - ay) * (qx - ax)
        zz = (w0 * z[i0] + w1 * z[i1] + w2 * z[i2]) / area
        window = depth[rmin:rmax + 1, cmin:cmax + 1]
        hit = (w0 >= 0.0) & (w1 >= 0.0) & (w2 >= 0.0) & (zz > window)
        window[hit] = zz[hit]
        face_id[rmin:rmax + 1, cmin:cmax + 1][hit] = f
    return face_id, depth


def _prep_csr(indptr, indices, data):
    return (np.ascontiguousarray(indptr, dtype=np.int64),
            np.ascontiguousarray(indices, dtype=np.int64),
            np.ascontiguousarray(data, dtype=np.float64))


def csr_matmul(indptr, indices, data, x):
    indptr, indices, data = _prep_csr(indptr, indices, data)
    if x.dtype not in (np.float32, np.float64):
        x = x.astype(np.float64)
    x = np.ascontiguousarray(x)
    if _compiled is not None:
        return _compiled.csr_matmul(indptr, indices, data, x)
    return csr_matmul_python(indptr, indices, data, x)


def rasterize_faces(px, z, faces, height, width):
    px = np.ascontiguousarray(px, dtype=np.float64)
    z = np.ascontiguousarray(z, dtype=np.float64)
    faces = np.ascontiguousarray(faces, dtype=np.int64).reshape(-1, 3)
    if _compiled is not None:
        return _compiled.rasterize_faces(px, z, faces, int(height), int(width))
    return rasterize_faces_python(px, z, faces, int(height), int(width))
