import numpy as np


def thick_curb_mask(height=800, width=400, thickness=19, curves=((2e-4, -0.1, 100.0), (-1e-4, 0.05, 290.0))):
    """Binary BEV mask with one thick quadratic band per curve (~30k pixels at the defaults)."""
    mask = np.zeros((height, width), np.uint8)
    v = np.arange(height)
    half = thickness // 2
    for a, b, c in curves:
        centre = np.floor(a * v * v + b * v + c + 0.5).astype(int)
        for d in range(-half, thickness - half):
            u = centre + d
            ok = (u >= 0) & (u < width)
            mask[v[ok], u[ok]] = 1
    return mask
