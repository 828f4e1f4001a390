"""Independent reference implementations used by the tests.

Each oracle is written in the most direct way possible (explicit loops,
brute force), without sharing code with the package.
"""
import itertools
import math

import numpy as np


def conv_direct(x, w, b):
    """Zero-padded stride-1 cross-correlation by six nested loops."""
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    p = k // 2
    out = np.zeros((n, o, h, wd))
    for ni in range(n):
        for oi in range(o):
            for i in range(h):
                for j in range(wd):
                    s = 0.0 if b is None else float(b[oi])
                    for ci in range(c):
                        for di in range(k):
                            for dj in range(k):
                                y, xx = i + di - p, j + dj - p
                                if 0 <= y < h and 0 <= xx < wd:
                                    s += x[ni, ci, y, xx] * w[oi, ci, di, dj]
                    out[ni, oi, i, j] = s
    return out


def finite_difference_grads(loss, params, h=1e-4):
    """Central differences of scalar `loss()` w.r.t. each entry of each array."""
    out = {}
    for name, arr in params.items():
        g = np.zeros(arr.shape)
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss()
            flat[i] = orig - h
            down = loss()
            flat[i] = orig
            g.reshape(-1)[i] = (up - down) / (2 * h)
        out[name] = g
    return out


def orbit_key(pattern):
    """Canonical representative under reversal and negation."""
    p = tuple(pattern)
    cands = [p, p[::-1], tuple(-s for s in p), tuple(-s for s in p[::-1])]
    return min(cands)


def brute_histogram(q, top, left, window):
    """Count every 4-tap horizontal and vertical pattern fully inside the window."""
    counts = {}
    for i in range(top, top + window):
        for j in range(left, left + window):
            if j + 3 < left + window:
                key = orbit_key(q[i, j:j + 4])
                counts[key] = counts.get(key, 0) + 1
            if i + 3 < top + window:
                key = orbit_key(q[i:i + 4, j])
                counts[key] = counts.get(key, 0) + 1
    return counts


def all_orbits():
    return sorted({orbit_key(p) for p in itertools.product((-1, 0, 1), repeat=4)})


def f1_brute(pred, mask):
    tp = fp = fn = 0
    for p, m in zip(pred.ravel(), mask.ravel()):
        tp += bool(p and m)
        fp += bool(p and not m)
        fn += bool(m and not p)
    d = 2 * tp + fp + fn
    return 2 * tp / d if d else 0.0


def max_f1_brute(heatmap, mask):
    best = 0.0
    for m in (mask.astype(bool), ~mask.astype(bool)):
        for t in np.unique(heatmap):
            best = max(best, f1_brute(heatmap >= t, m))
    return best


def auc_pairwise(fake, real):
    total = 0.0
    for a in fake:
        for b in real:
            total += 1.0 if a > b else 0.5 if a == b else 0.0
    return total / (len(fake) * len(real))


def nearest_rank(values, pct=0.995):
    v = sorted(values)
    return v[math.ceil(pct * len(v)) - 1]


def coverage_mean(post, window, stride, shape):
    """Mean posterior of the windows covering each pixel, by direct counting."""
    h, w = shape
    acc = np.zeros(shape)
    cnt = np.zeros(shape)
    rows, cols = post.shape
    for r in range(rows):
        for c in range(cols):
            acc[r * stride:r * stride + window, c * stride:c * stride + window] += post[r, c]
            cnt[r * stride:r * stride + window, c * stride:c * stride + window] += 1
    return acc, cnt
