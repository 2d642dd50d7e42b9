# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twins of the kernels in ``_pykernels``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()


def conv2d(const float[:, :, :, ::1] x, const float[:, :, :, ::1] weight,
           const float[::1] bias, int stride, int padding, int groups):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t out_c = weight.shape[0], cg = weight.shape[1]
    cdef Py_ssize_t kh = weight.shape[2], kw = weight.shape[3]
    cdef Py_ssize_t oh = (h + 2 * padding - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * padding - kw) // stride + 1
    cdef Py_ssize_t og = out_c // groups
    out = np.empty((n, out_c, oh, ow), dtype=np.float32)
    cdef float[:, :, :, ::1] o = out
    cdef double[:, ::1] acc = np.empty((oh, ow), dtype=np.float64)
    cdef Py_ssize_t b, oc, ch, ic, oy, ox, i, j, iy, x0, lo, hi, t
    cdef double wv
    with nogil:
        for b in range(n):
            for oc in range(out_c):
                acc[:, :] = bias[oc]
                for ic in range(cg):
                    ch = (oc // og) * cg + ic
                    for j in range(kw):
                        # output columns whose tap j lands inside the row
                        lo = 0 if padding <= j else (padding - j + stride - 1) // stride
                        t = w - 1 + padding - j
                        hi = 0 if t < 0 else t // stride + 1
                        if hi > ow:
                            hi = ow
                        x0 = j - padding
                        for i in range(kh):
                            wv = weight[oc, ic, i, j]
                            for oy in range(oh):
                                iy = oy * stride + i - padding
                                if iy < 0 or iy >= h:
                                    continue
                                for ox in range(lo, hi):
                                    acc[oy, ox] += wv * x[b, ch, iy, ox * stride + x0]
                for oy in range(oh):
                    for ox in range(ow):
                        o[b, oc, oy, ox] = <float>acc[oy, ox]
    return out


def cc_scores(const double[:, :, :, ::1] q, const double[:, :, :, ::1] k):
    cdef Py_ssize_t n = q.shape[0], c = q.shape[1], h = q.shape[2], w = q.shape[3]
    out = np.empty((n, h + w - 1, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] o = out
    cdef Py_ssize_t b, y, x, r, ch, slot
    cdef double acc
    with nogil:
        for b in range(n):
            for y in range(h):
                for x in range(w):
                    for r in range(h):
                        acc = 0.0
                        for ch in range(c):
                            acc += q[b, ch, y, x] * k[b, ch, r, x]
                        o[b, r, y, x] = acc
                    slot = h
                    for r in range(w):
                        if r == x:
                            continue
                        acc = 0.0
                        for ch in range(c):
                            acc += q[b, ch, y, x] * k[b, ch, y, r]
                        o[b, slot, y, x] = acc
                        slot += 1
    return out


def cc_aggregate(const double[:, :, :, ::1] t, const double[:, :, :, ::1] v):
    cdef Py_ssize_t n = v.shape[0], c = v.shape[1], h = v.shape[2], w = v.shape[3]
    out = np.zeros((n, c, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] o = out
    cdef Py_ssize_t b, y, x, r, ch, slot
    with nogil:
        for b in range(n):
            for ch in range(c):
                for y in range(h):
                    for x in range(w):
                        for r in range(h):
                            o[b, ch, y, x] += t[b, r, y, x] * v[b, ch, r, x]
                        slot = h
                        for r in range(w):
                            if r == x:
                                continue
                            o[b, ch, y, x] += t[b, slot, y, x] * v[b, ch, y, r]
                            slot += 1
    return out


def sbl_anchor_terms(const double[:, :, :, ::1] feat, const cnp.int64_t[:, ::1] labels,
                     const cnp.int64_t[:, ::1] anchors, int half, double margin):
    cdef Py_ssize_t nb = feat.shape[0], d = feat.shape[1], m = anchors.shape[0]
    out = np.empty((nb, m), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t b, a, ay, ax, dy, dx, yy, xx, ch
    cdef cnp.int64_t lab
    cdef double diff, dist, pos_sum, neg_min
    cdef int n_pos
    with nogil:
        for b in range(nb):
            for a in range(m):
                ay = anchors[a, 0]
                ax = anchors[a, 1]
                lab = labels[ay, ax]
                pos_sum = 0.0
                n_pos = 0
                neg_min = INFINITY
                for dy in range(-half, half + 1):
                    for dx in range(-half, half + 1):
                        if dy == 0 and dx == 0:
                            continue
                        yy = ay + dy
                        xx = ax + dx
                        dist = 0.0
                        for ch in range(d):
                            diff = feat[b, ch, ay, ax] - feat[b, ch, yy, xx]
                            dist += diff * diff
                        if labels[yy, xx] == lab:
                            pos_sum += dist
                            n_pos += 1
                        elif dist < neg_min:
                            neg_min = dist
                o[b, a] = pos_sum / n_pos + (margin - neg_min if margin > neg_min else 0.0)
    return out
