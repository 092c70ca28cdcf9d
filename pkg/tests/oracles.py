"""Slow, obviously-correct reference implementations used as test oracles."""

import math

import numpy as np


def adi_brute_force(alt: np.ndarray, populated: np.ndarray, radius: int) -> np.ndarray:
    h, w = alt.shape
    out = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            if not populated[y, x]:
                continue
            total, m = 0.0, 0
            for ny in range(h):
                for nx in range(w):
                    if (ny, nx) == (y, x) or not populated[ny, nx]:
                        continue
                    if max(abs(ny - y), abs(nx - x)) > radius:
                        continue
                    total += abs(alt[y, x] - alt[ny, nx]) / math.hypot(nx - x, ny - y)
                    m += 1
            out[y, x] = total / m if m else 0.0
    return out


def random_sparse_grid(rng: np.random.Generator, max_side: int = 64):
    h, w = rng.integers(1, max_side + 1, size=2)
    density = rng.uniform(0.05, 0.9)
    populated = rng.random((h, w)) < density
    alt = np.where(populated, rng.normal(-1.5, 0.5, (h, w)), np.nan)
    return alt, populated


def tolerance_match_brute_force(pred: np.ndarray, gt: np.ndarray, tol: float):
    """All-pairs tolerance matching: returns (tp, fp, fn)."""
    p = np.argwhere(pred > 0)
    g = np.argwhere(gt > 0)

    def near(a, b):
        if len(b) == 0:
            return np.zeros(len(a), bool)
        d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
        return (d2 <= tol * tol).any(axis=1)

    hit_p = near(p, g)
    hit_g = near(g, p)
    return int(hit_p.sum()), int((~hit_p).sum()), int((~hit_g).sum())


def conv2d_direct(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray, groups: int, stride: int, padding: int):
    """Textbook grouped convolution with explicit loops (NCHW / OIHW)."""
    n, c, hh, ww = x.shape
    o, cg, k, _ = kernel.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (hh + 2 * padding - k) // stride + 1
    wo = (ww + 2 * padding - k) // stride + 1
    out = np.zeros((n, o, ho, wo))
    og = o // groups
    for b in range(n):
        for oc in range(o):
            g = oc // og
            for i in range(ho):
                for j in range(wo):
                    patch = xp[b, g * cg : (g + 1) * cg, i * stride : i * stride + k, j * stride : j * stride + k]
                    out[b, oc, i, j] = (patch * kernel[oc]).sum() + bias[oc]
    return out


def adi_all_pairs(alt: np.ndarray, populated: np.ndarray, radius: int) -> np.ndarray:
    """Same definition as ``adi_brute_force`` over an explicit populated-pair table."""
    ys, xs = np.nonzero(populated)
    a = alt[ys, xs]
    dy = ys[:, None] - ys[None, :]
    dx = xs[:, None] - xs[None, :]
    pair = (np.maximum(np.abs(dy), np.abs(dx)) <= radius) & ((dy != 0) | (dx != 0))
    with np.errstate(divide="ignore", invalid="ignore"):
        term = np.where(pair, np.abs(a[:, None] - a[None, :]) / np.hypot(dx, dy), 0.0)
    m = pair.sum(axis=1)
    out = np.zeros(alt.shape)
    out[ys, xs] = np.where(m > 0, term.sum(axis=1) / np.maximum(m, 1), 0.0)
    return out
