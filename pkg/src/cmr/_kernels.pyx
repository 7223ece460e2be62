# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops. ``cmr.kernels`` holds the NumPy twins of these."""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor, ceil, INFINITY

cnp.import_array()

ctypedef fused real:
    float
    double


def csr_matmul(const long long[::1] indptr, const long long[::1] indices,
               const double[::1] data, const real[:, ::1] x):
    """Row-wise CSR times dense, accumulating in ascending column order."""
    cdef Py_ssize_t nrows = indptr.shape[0] - 1
    cdef Py_ssize_t ncols = x.shape[1]
    cdef Py_ssize_t i, p, j, c
    cdef real v
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((nrows, ncols), dtype=dtype)
    cdef real[:, ::1] out = out_arr
    with nogil:
        for i in range(nrows):
            for p in range(indptr[i], indptr[i + 1]):
                c = indices[p]
                v = <real>data[p]
                for j in range(ncols):
                    out[i, j] = out[i, j] + v * x[c, j]
    return out_arr


def rasterize_faces(const double[:, ::1] px, const double[::1] z,
                    const long long[:, ::1] faces, int height, int width):
    """Edge-function fill with a max-z buffer.

    ``px`` holds pixel-space (column, row) coordinates. Returns the winning
    face index per pixel (-1 for background) and the interpolated depth.
    """
    cdef Py_ssize_t nf = faces.shape[0]
    face_arr = np.full((height, width), -1, dtype=np.int64)
    depth_arr = np.full((height, width), -np.inf, dtype=np.float64)
    cdef long long[:, ::1] face_id = face_arr
    cdef double[:, ::1] depth = depth_arr
    cdef Py_ssize_t f, r, c
    cdef long long i0, i1, i2, tmp
    cdef double ax, ay, bx, by, cx, cy, area, w0, w1, w2, qx, qy, zz
    cdef double xmin, xmax, ymin, ymax
    cdef int cmin, cmax, rmin, rmax
    with nogil:
        for f in range(nf):
            i0 = faces[f, 0]
            i1 = faces[f, 1]
            i2 = faces[f, 2]
            ax = px[i0, 0]; ay = px[i0, 1]
            bx = px[i1, 0]; by = px[i1, 1]
            cx = px[i2, 0]; cy = px[i2, 1]
            area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
            if area == 0.0:
                continue
            if area < 0.0:
                tmp = i1; i1 = i2; i2 = tmp
                bx = px[i1, 0]; by = px[i1, 1]
                cx = px[i2, 0]; cy = px[i2, 1]
                area = -area
            xmin = min(ax, min(bx, cx)); xmax = max(ax, max(bx, cx))
            ymin = min(ay, min(by, cy)); ymax = max(ay, max(by, cy))
            cmin = <int>max(0.0, floor(xmin - 0.5))
            cmax = <int>min(width - 1.0, ceil(xmax - 0.5))
            rmin = <int>max(0.0, floor(ymin - 0.5))
            rmax = <int>min(height - 1.0, ceil(ymax - 0.5))
            for r in range(rmin, rmax + 1):
                qy = r + 0.5
                for c in range(cmin, cmax + 1):
                    qx = c + 0.5
                    w0 = (cx - bx) * (qy - by) - (cy - by) * (qx - bx)
                    w1 = (ax - cx) * (qy - cy) - (ay - cy) * (qx - cx)
                    w2 = (bx - ax) * (qy - ay) - (by - ay) * (qx - ax)
                    if w0 >= 0.0 and w1 >= 0.0 and w2 >= 0.0:
                        zz = (w0 * z[i0] + w1 * z[i1] + w2 * z[i2]) / area
                        if zz > depth[r, c]:
                            depth[r, c] = zz
                            face_id[r, c] = f
    return face_arr, depth_arr
