# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the kernels in ``_pykernels``.

Results are bitwise identical to the numpy fallback: im2col is a pure copy
and col2im accumulates in the same (ki, kj) order.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


cdef inline void _x_range(Py_ssize_t j, Py_ssize_t w, Py_ssize_t wo, int stride, int pad,
                          Py_ssize_t *lo, Py_ssize_t *hi) nogil:
    # output columns xx with 0 <= xx * stride + j - pad < w
    cdef Py_ssize_t a = pad - j
    lo[0] = 0 if a <= 0 else (a + stride - 1) // stride
    a = w - 1 + pad - j
    hi[0] = 0 if a < 0 else a // stride + 1
    if hi[0] > wo:
        hi[0] = wo
    if lo[0] > hi[0]:
        lo[0] = hi[0]


def im2col(double[:, :, :, ::1] x, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((c * kh * kw, n * ho * wo), dtype=np.float64)
    cdef double[:, ::1] cols = out
    cdef Py_ssize_t ci, i, j, b, y, xx, row, sy, x0, x1
    cdef double *dst
    cdef const double *src
    with nogil:
        for ci in range(c):
            for i in range(kh):
                for j in range(kw):
                    row = (ci * kh + i) * kw + j
                    _x_range(j, w, wo, stride, pad, &x0, &x1)
                    for b in range(n):
                        for y in range(ho):
                            sy = y * stride + i - pad
                            if sy < 0 or sy >= h:
                                continue
                            dst = &cols[row, (b * ho + y) * wo]
                            src = &x[b, ci, sy, 0]
                            for xx in range(x0, x1):
                                dst[xx] = src[xx * stride + j - pad]
    return out


def col2im(double[:, ::1] cols, shape, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t n = shape[0], c = shape[1], h = shape[2], w = shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, c, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] img = out
    cdef Py_ssize_t ci, i, j, b, y, xx, row, sy, x0, x1
    cdef double *dst
    cdef const double *src
    with nogil:
        for ci in range(c):
            for i in range(kh):
                for j in range(kw):
                    row = (ci * kh + i) * kw + j
                    _x_range(j, w, wo, stride, pad, &x0, &x1)
                    for b in range(n):
                        for y in range(ho):
                            sy = y * stride + i - pad
                            if sy < 0 or sy >= h:
                                continue
                            src = &cols[row, (b * ho + y) * wo]
                            dst = &img[b, ci, sy, 0]
                            for xx in range(x0, x1):
                                dst[xx * stride + j - pad] += src[xx]
    return out


def label_components(mask):
    cdef cnp.uint8_t[:, ::1] fg = np.ascontiguousarray(mask, dtype=bool).view(np.uint8)
    cdef Py_ssize_t h = fg.shape[0], w = fg.shape[1]
    labels = np.zeros((h, w), dtype=np.int32)
    cdef int[:, ::1] lab = labels
    queue = np.empty(max(h * w, 1), dtype=np.intp)
    cdef Py_ssize_t[::1] q = queue
    cdef Py_ssize_t r, c, head, tail, p, y, x
    cdef int count = 0
    for r in range(h):
        for c in range(w):
            if not fg[r, c] or lab[r, c]:
                continue
            count += 1
            lab[r, c] = count
            head = 0
            tail = 0
            q[tail] = r * w + c
            tail += 1
            while head < tail:
                p = q[head]
                head += 1
                y = p // w
                x = p - y * w
                if y > 0 and fg[y - 1, x] and not lab[y - 1, x]:
                    lab[y - 1, x] = count
                    q[tail] = p - w
                    tail += 1
                if y + 1 < h and fg[y + 1, x] and not lab[y + 1, x]:
                    lab[y + 1, x] = count
                    q[tail] = p + w
                    tail += 1
                if x > 0 and fg[y, x - 1] and not lab[y, x - 1]:
                    lab[y, x - 1] = count
                    q[tail] = p - 1
                    tail += 1
                if x + 1 < w and fg[y, x + 1] and not lab[y, x + 1]:
                    lab[y, x + 1] = count
                    q[tail] = p + 1
                    tail += 1
    return labels, count
