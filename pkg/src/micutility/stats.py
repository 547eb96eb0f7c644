import numpy as np


def pearson(x, y) -> float:
    """Pearson correlation of two equal-length vectors; NaN if either is constant."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ValueError(f"length mismatch {x.shape} vs {y.shape}")
    xc = x - x.mean()
    yc = y - y.mean()
    den = np.sqrt(np.dot(xc, xc) * np.dot(yc, yc))
    if not den > 0:
        return float("nan")
    return float(np.clip(np.dot(xc, yc) / den, -1.0, 1.0))
