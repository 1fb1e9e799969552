"""Independent brute-force oracles the fast paths are checked against.

Everything here is deliberately naive (nested loops, direct formula
evaluation) and shares no code with the package implementations.
"""

import math

import numpy as np


def naive_conv3d(x, w, stride, padding):
    """7-nested-loop cross-correlation. x: (N,C,T,H,W); w: (K,C,kt,kh,kw)."""
    N, C, T, H, W = x.shape
    K, _, kt, kh, kw = w.shape
    st, sh, sw = stride
    pt, ph, pw = padding
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)))
    To = (T + 2 * pt - kt) // st + 1
    Ho = (H + 2 * ph - kh) // sh + 1
    Wo = (W + 2 * pw - kw) // sw + 1
    out = np.zeros((N, K, To, Ho, Wo), x.dtype)
    for n in range(N):
        for k in range(K):
            for to in range(To):
                for ho in range(Ho):
                    for wo in range(Wo):
                        acc = 0.0
                        for c in range(C):
                            for dt in range(kt):
                                for dh in range(kh):
                                    for dw in range(kw):
                                        acc += (xp[n, c, to * st + dt, ho * sh + dh,
                                                   wo * sw + dw]
                                                * w[k, c, dt, dh, dw])
                        out[n, k, to, ho, wo] = acc
    return out


def naive_dot(a, b):
    acc = 0.0
    for x, y in zip(a, b):
        acc += float(x) * float(y)
    return acc


def naive_mip_loss(f_r, f_l1, f_l2, gamma):
    """Hinge on the similarity gap, directly from the written formula."""
    pos = naive_dot(f_r, f_l1)
    neg = naive_dot(f_r, f_l2)
    return max(gamma - (pos - neg), 0.0)


def naive_cip_loss(f_r, bank, positive_index, tau):
    """Plain exp/sum softmax ratio, no stabilization."""
    sims = [naive_dot(f_r, entry) for entry in bank]
    num = math.exp(sims[positive_index] / tau)
    den = sum(math.exp(s / tau) for s in sims)
    return -math.log(num / den)
