"""Independent brute-force reference implementations used only by tests.

These are deliberately written as plain nested loops / direct formulas so they
share no code path with the package implementations they check.
"""

import numpy as np


def conv3d_naive(x, w, bias=None, stride=(1, 1, 1)):
    """Seven-nested-loop valid 3D cross-correlation. Slow and obviously right."""
    c_in, d, h, wid = x.shape
    k_out, c_k, kd, kh, kw = w.shape
    assert c_in == c_k
    sd, sh, sw = stride
    od = (d - kd) // sd + 1
    oh = (h - kh) // sh + 1
    ow = (wid - kw) // sw + 1
    out = np.zeros((k_out, od, oh, ow), dtype=np.float64)
    for k in range(k_out):
        for zo in range(od):
            for yo in range(oh):
                for xo in range(ow):
                    acc = 0.0
                    for c in range(c_in):
                        for i in range(kd):
                            for j in range(kh):
                                for l in range(kw):
                                    acc += (
                                        float(x[c, zo * sd + i, yo * sh + j, xo * sw + l])
                                        * float(w[k, c, i, j, l])
                                    )
                    out[k, zo, yo, xo] = acc
        if bias is not None:
            out[k] += float(bias[k])
    return out


def dice_naive(a, b):
    """Dice from explicit voxel counting."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    inter = int(np.logical_and(a, b).sum())
    size = int(a.sum()) + int(b.sum())
    if size == 0:
        return 1.0
    return 2.0 * inter / size


def bce_naive(logits, labels):
    """Summed binary cross-entropy from probabilities, no masking or weights."""
    z = np.asarray(logits, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.float64).ravel()
    p = 1.0 / (1.0 + np.exp(-z))
    return float(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)).sum())
