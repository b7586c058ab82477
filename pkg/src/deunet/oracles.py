"""Slow reference implementations used to cross-check the vectorized code.

Everything here is written as explicit loops over plain Python scalars and
shares no code with the fast paths it verifies.
"""
import math

import numpy as np


def conv2d_direct(x, w, bias=None, stride=1, padding=0):
    C, H, W = x.shape
    Cout, Cin, S, _ = w.shape
    Ho = (H + 2 * padding - S) // stride + 1
    Wo = (W + 2 * padding - S) // stride + 1
    out = np.zeros((Cout, Ho, Wo))
    for o in range(Cout):
        for i in range(Ho):
            for j in range(Wo):
                acc = 0.0 if bias is None else float(bias[o])
                for c in range(Cin):
                    for a in range(S):
                        for b in range(S):
                            yy = i * stride + a - padding
                            xx = j * stride + b - padding
                            if 0 <= yy < H and 0 <= xx < W:
                                acc += w[o, c, a, b] * x[c, yy, xx]
                out[o, i, j] = acc
    return out


def maxpool_windows(x, k):
    C, H, W = x.shape
    out = np.zeros((C, H // k, W // k))
    for c in range(C):
        for i in range(H // k):
            for j in range(W // k):
                out[c, i, j] = max(x[c, i * k + a, j * k + b] for a in range(k) for b in range(k))
    return out


def matmul_loops(a, b):
    P, Q = a.shape
    R = b.shape[1]
    out = np.zeros((P, R))
    for i in range(P):
        for j in range(R):
            out[i, j] = sum(a[i, q] * b[q, j] for q in range(Q))
    return out


def _bilinear(img, y, x):
    H, W = img.shape
    y0, x0 = math.floor(y), math.floor(x)
    total = 0.0
    for yy in (y0, y0 + 1):
        for xx in (x0, x0 + 1):
            if 0 <= yy < H and 0 <= xx < W:
                total += (1 - abs(y - yy)) * (1 - abs(x - xx)) * img[yy, xx]
    return total


def deform_conv_loops(x, offsets, w, groups=1):
    """Deformable conv by explicit bilinear sampling of every tap.

    ``groups`` input-channel groups each read their own ``2*S*S`` offsets.
    """
    C, H, W = x.shape
    Cout, Cin, S, _ = w.shape
    pad = (S - 1) // 2
    cg = C // groups
    out = np.zeros((Cout, H, W))
    for o in range(Cout):
        for i in range(H):
            for j in range(W):
                acc = 0.0
                for c in range(C):
                    g = c // cg
                    for s in range(S * S):
                        a, b = divmod(s, S)
                        dy = offsets[g * 2 * S * S + 2 * s, i, j]
                        dx = offsets[g * 2 * S * S + 2 * s + 1, i, j]
                        acc += w[o, c, a, b] * _bilinear(x[c], i + a - pad + dy, j + b - pad + dx)
                out[o, i, j] = acc
    return out


def channel_attention_loops(Bm, Cm, Dm, alpha, O):
    """``Z_j = alpha * sum_i p_ji D_i + O_j`` with ``p_ji`` softmax over i of ``B_i . C_j``."""
    N, M = Bm.shape
    Z = np.zeros((N, M))
    for j in range(N):
        logits = [sum(Bm[i, m] * Cm[j, m] for m in range(M)) for i in range(N)]
        top = max(logits)
        ex = [math.exp(v - top) for v in logits]
        den = sum(ex)
        for m in range(M):
            Z[j, m] = alpha * sum(ex[i] / den * Dm[i, m] for i in range(N)) + O[j, m]
    return Z


def border_pixels(binary):
    """Foreground pixels with a 4-neighbour outside the region or on the image edge."""
    H, W = binary.shape
    pts = []
    for i in range(H):
        for j in range(W):
            if not binary[i, j]:
                continue
            for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                a, b = i + di, j + dj
                if not (0 <= a < H and 0 <= b < W) or not binary[a, b]:
                    pts.append((i, j))
                    break
    return pts


def _nearest(points, others, spacing):
    out = []
    for (a, b) in points:
        out.append(min(math.sqrt(((a - c) * spacing) ** 2 + ((b - d) * spacing) ** 2) for (c, d) in others))
    return out


def hausdorff_pairwise(pred, gt, class_id, spacing=1.0):
    A = border_pixels(pred == class_id)
    B = border_pixels(gt == class_id)
    if not A and not B:
        return 0.0
    if not A or not B:
        return float("nan")
    return max(max(_nearest(A, B, spacing)), max(_nearest(B, A, spacing)))


def assd_pairwise(pred, gt, class_id, spacing=1.0):
    A = border_pixels(pred == class_id)
    B = border_pixels(gt == class_id)
    if not A and not B:
        return 0.0
    if not A or not B:
        return float("nan")
    return math.fsum(_nearest(A, B, spacing) + _nearest(B, A, spacing)) / (len(A) + len(B))


def dice_counts(pred, gt, class_id):
    a = b = both = 0
    for p, g in zip(np.ravel(pred), np.ravel(gt)):
        a += p == class_id
        b += g == class_id
        both += (p == class_id) and (g == class_id)
    if a + b == 0:
        return 1.0
    return 2.0 * both / (a + b)


def adam_scalar(theta, grads, lr, weight_decay=0.0, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar Adam with decoupled decay, one step per entry of ``grads``."""
    m = v = 0.0
    history = []
    for t, g in enumerate(grads, start=1):
        theta = theta - lr * weight_decay * theta
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        theta = theta - lr * mhat / (math.sqrt(vhat) + eps)
        history.append(theta)
    return history
