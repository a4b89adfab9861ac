"""Central finite differences, used as the independent oracle for every gradient test."""
import numpy as np

STEP = 1e-5


def rel_err(a, b, floor=1e-8):
    """Elementwise |a - b| / max(|a|, |b|), zero where both sit under ``floor``."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    diff = np.abs(a - b)
    scale = np.maximum(np.abs(a), np.abs(b))
    return np.where(diff <= floor, 0.0, diff / np.maximum(scale, floor))


def numeric_grad(f, x, coords=None, step=STEP):
    """d f / d x[coords] by central differences; ``x`` is perturbed in place and restored."""
    flat = x.reshape(-1)
    coords = range(flat.size) if coords is None else coords
    out = []
    for i in coords:
        old = flat[i]
        flat[i] = old + step
        up = f()
        flat[i] = old - step
        down = f()
        flat[i] = old
        out.append((up - down) / (2 * step))
    return np.array(out)


def directional(f, x, direction, step=STEP):
    """Central difference of f along ``direction`` (same shape as x)."""
    old = x.copy()
    x += step * direction
    up = f()
    x[...] = old - step * direction
    down = f()
    x[...] = old
    return (up - down) / (2 * step)
