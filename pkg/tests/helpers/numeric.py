import numpy as np


def central_difference(fn, x, h=1e-5):
    """Gradient of scalar ``fn`` at ``x`` by central differences."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    for i in range(x.size):
        step = np.zeros(x.size)
        step[i] = h
        step = step.reshape(x.shape)
        flat[i] = (fn(x + step) - fn(x - step)) / (2.0 * h)
    return grad


def relative_error(a, b, floor=1e-3):
    a = np.asarray(a)
    b = np.asarray(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))
