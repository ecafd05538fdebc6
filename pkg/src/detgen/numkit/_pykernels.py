"""Pure-numpy twin of ``_ckernels``.

Same accumulation order as the compiled kernels (sequential over the reduced
index, product rounded before the add), so outputs are bit-identical.
"""
import numpy as np


def affine(x, w, b):
    if w.shape[0] != x.shape[1] or b.shape[0] != w.shape[1]:
        raise ValueError("affine: shape mismatch")
    out = np.zeros((x.shape[0], w.shape[1]))
    for k in range(x.shape[1]):
        out += x[:, k, None] * w[k]
    out += b
    return out


def grad_weight(a, d):
    if a.shape[0] != d.shape[0]:
        raise ValueError("grad_weight: shape mismatch")
    out = np.zeros((a.shape[1], d.shape[1]))
    for i in range(a.shape[0]):
        out += a[i, :, None] * d[i]
    return out


def grad_input(d, wt):
    if wt.shape[0] != d.shape[1]:
        raise ValueError("grad_input: shape mismatch")
    out = np.zeros((d.shape[0], wt.shape[1]))
    for j in range(d.shape[1]):
        out += d[:, j, None] * wt[j]
    return out
