"""Pure numpy implementations of the hot kernels.

Every function here has a twin with the same signature in ``_ckernels.pyx``.
Inputs are assumed already validated and contiguous by the public wrappers.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv2d(x, weight, bias, stride, padding, groups):
    """Direct grouped cross-correlation, float64 accumulation, float32 result."""
    n, c, h, w = x.shape
    out_c, cg, kh, kw = weight.shape
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    oh, ow = win.shape[2], win.shape[3]
    og = out_c // groups
    out = np.empty((n, out_c, oh, ow), dtype=np.float64)
    w64 = weight.astype(np.float64)
    for g in range(groups):
        xs = win[:, g * cg:(g + 1) * cg]
        ws = w64[g * og:(g + 1) * og]
        out[:, g * og:(g + 1) * og] = np.einsum("ncyxij,ocij->noyx", xs, ws, optimize=True)
    out += bias.astype(np.float64)[None, :, None, None]
    return out.astype(np.float32)


def cc_scores(q, k):
    """Criss-cross dot products.

    Output index ``i < H`` is the column entry at row ``i``; ``i >= H`` walks the
    row, skipping the centre column, so every position appears once.
    """
    n, c, h, w = q.shape
    out = np.empty((n, h + w - 1, h, w), dtype=np.float64)
    out[:, :h] = np.einsum("ncyx,ncrx->nryx", q, k)
    if w > 1:
        row = np.einsum("ncyx,ncyr->nryx", q, k)  # (n, w, h, w), r = row entry
        out[:, h:] = np.take_along_axis(row, _row_index(n, h, w), axis=1)
    return out


def _row_index(n, h, w):
    # slot j at centre column x holds row entry j (j < x) or j + 1 (j >= x)
    j = np.arange(w - 1)[:, None]
    x = np.arange(w)[None, :]
    idx = np.where(j < x, j, j + 1)
    return np.broadcast_to(idx[None, :, None, :], (n, w - 1, h, w))


def cc_aggregate(t, v):
    """Weighted sum of values over each position's criss-cross set."""
    n, c, h, w = v.shape
    out = np.einsum("nryx,ncrx->ncyx", t[:, :h], v)
    if w > 1:
        dense = np.zeros((n, w, h, w), dtype=np.float64)
        np.put_along_axis(dense, _row_index(n, h, w), t[:, h:], axis=1)
        out += np.einsum("nryx,ncyr->ncyx", dense, v)
    return out


def sbl_anchor_terms(feat, labels, anchors, half, margin):
    """Per-anchor ``d+ + [margin - d-]_+`` for unit-norm features.

    ``feat`` is (b, d, h, w); ``anchors`` is (m, 2) of (row, col).
    Returns (b, m).
    """
    b = feat.shape[0]
    m = anchors.shape[0]
    if m == 0:
        return np.zeros((b, 0))
    offs = [(dy, dx) for dy in range(-half, half + 1) for dx in range(-half, half + 1)
            if (dy, dx) != (0, 0)]
    ay, ax = anchors[:, 0], anchors[:, 1]
    centre = feat[:, :, ay, ax]  # (b, d, m)
    dist = np.empty((b, m, len(offs)))
    same = np.empty((m, len(offs)), dtype=bool)
    for j, (dy, dx) in enumerate(offs):
        other = feat[:, :, ay + dy, ax + dx]
        diff = centre - other
        dist[:, :, j] = np.einsum("bdm,bdm->bm", diff, diff)
        same[:, j] = labels[ay + dy, ax + dx] == labels[ay, ax]
    n_pos = same.sum(axis=1)
    d_pos = np.where(same[None], dist, 0.0).sum(axis=2) / n_pos
    d_neg = np.where(same[None], np.inf, dist).min(axis=2)
    return d_pos + np.maximum(margin - d_neg, 0.0)
