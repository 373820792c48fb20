"""Pure numpy / Python implementations of the hot kernels.

These are the reference versions. The Cython module ``_kernels`` must agree
with them bit for bit; accumulation order in ``col2im`` is (ki, kj) major so
both backends sum overlapping contributions in the same sequence.
"""
from collections import deque

import numpy as np


def conv_out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def im2col(x, kh, kw, stride, pad):
    """Unfold ``x[N, C, H, W]`` into columns of shape ``(C*kh*kw, N*Ho*Wo)``."""
    n, c, h, w = x.shape
    ho = conv_out_size(h, kh, stride, pad)
    wo = conv_out_size(w, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            patch = x[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
            cols[:, i, j] = patch.transpose(1, 0, 2, 3)
    return cols.reshape(c * kh * kw, n * ho * wo)


def col2im(cols, shape, kh, kw, stride, pad):
    """Adjoint of :func:`im2col`: scatter-add columns back to ``shape``."""
    n, c, h, w = shape
    ho = conv_out_size(h, kh, stride, pad)
    wo = conv_out_size(w, kw, stride, pad)
    cols = cols.reshape(c, kh, kw, n, ho, wo)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                cols[:, i, j].transpose(1, 0, 2, 3)
            )
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(out)


def label_components(mask):
    """4-connected component labelling.

    Labels are numbered from 1 in raster order of each component's first
    pixel; background is 0. Returns ``(labels, count)``.
    """
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=np.int32)
    fg = mask.tolist()
    lab = labels.tolist()
    count = 0
    queue = deque()
    for r in range(h):
        row = fg[r]
        for c in range(w):
            if not row[c] or lab[r][c]:
                continue
            count += 1
            lab[r][c] = count
            queue.append((r, c))
            while queue:
                y, x = queue.popleft()
                for yy, xx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                    if 0 <= yy < h and 0 <= xx < w and fg[yy][xx] and not lab[yy][xx]:
                        lab[yy][xx] = count
                        queue.append((yy, xx))
    labels[:] = lab
    return labels, count
