"""Brute-force reference implementations used by the test suite.

Everything here is written as plain loops over elements so it shares no
code path with the vectorised library functions it checks.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def mse_loop(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    total = 0.0
    for idx in np.ndindex(a.shape):
        total += (a[idx] - b[idx]) ** 2
    return total / a.size


def soft_dice_loop(g, p, eps=1e-6) -> float:
    """Batch-mean of per-channel ``1 - (2 sum pg + eps) / (sum p^2 + sum g^2 + eps)``."""
    g, p = np.asarray(g, float), np.asarray(p, float)
    if g.ndim == 4:
        g, p = g[None], p[None]
    total = 0.0
    b, l = g.shape[:2]
    for i in range(b):
        for c in range(l):
            num = den_p = den_g = 0.0
            for idx in np.ndindex(g.shape[2:]):
                num += p[(i, c) + idx] * g[(i, c) + idx]
                den_p += p[(i, c) + idx] ** 2
                den_g += g[(i, c) + idx] ** 2
            total += 1.0 - (2.0 * num + eps) / (den_p + den_g + eps)
    return total / (b * l)


def kl_loop(mu, log_sigma) -> float:
    mu = np.atleast_2d(np.asarray(mu, float))
    ls = np.atleast_2d(np.asarray(log_sigma, float))
    total = 0.0
    for i in range(mu.shape[0]):
        for j in range(mu.shape[1]):
            s2 = math.exp(2.0 * ls[i, j])
            total += 0.5 * (s2 + mu[i, j] ** 2 - 1.0 - 2.0 * ls[i, j])
    return total / mu.shape[0]


def dice_loop(a, b, labels=range(1, 10)) -> list[float]:
    a, b = np.asarray(a), np.asarray(b)
    out = []
    for lab in labels:
        na = nb = inter = 0
        for idx in np.ndindex(a.shape):
            in_a, in_b = a[idx] == lab, b[idx] == lab
            na += in_a
            nb += in_b
            inter += in_a and in_b
        out.append(1.0 if na + nb == 0 else 2.0 * inter / (na + nb))
    return out


def mae_loop(t, p) -> float:
    return sum(abs(float(x) - float(y)) for x, y in zip(t, p)) / len(t)


def pearson_loop(x, y) -> float:
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)


def median3_loop(d):
    """3x3x3 median with edge replication, by sorting each neighbourhood."""
    d = np.asarray(d)
    nx, ny, nz = d.shape
    out = np.empty_like(d)
    for x, y, z in itertools.product(range(nx), range(ny), range(nz)):
        vals = []
        for dx, dy, dz in itertools.product((-1, 0, 1), repeat=3):
            xi = min(max(x + dx, 0), nx - 1)
            yi = min(max(y + dy, 0), ny - 1)
            zi = min(max(z + dz, 0), nz - 1)
            vals.append(d[xi, yi, zi])
        vals.sort()
        out[x, y, z] = vals[13]
    return out


def conv3d_loop(x, w, b, stride=1, pad=0):
    """Direct 6-fold loop cross-correlation, ``x`` (B, C, X, Y, Z)."""
    x = np.pad(x, ((0, 0), (0, 0)) + ((pad, pad),) * 3)
    bsz, cin, nx, ny, nz = x.shape
    cout, _, kx, ky, kz = w.shape
    ox, oy, oz = ((nx - kx) // stride + 1, (ny - ky) // stride + 1, (nz - kz) // stride + 1)
    out = np.zeros((bsz, cout, ox, oy, oz))
    for n, o, i, j, k in itertools.product(range(bsz), range(cout), range(ox), range(oy), range(oz)):
        patch = x[n, :, i * stride:i * stride + kx, j * stride:j * stride + ky,
                  k * stride:k * stride + kz]
        out[n, o, i, j, k] = float((patch * w[o]).sum()) + b[o]
    return out
