import numpy as np
from sklearn.utils.validation import check_array


def check_magnitudes(X, name="X"):
    """2-D, finite, float64 and non-negative."""
    X = check_array(X, dtype=np.float64, ensure_all_finite=True, input_name=name)
    if np.any(X < 0):
        raise ValueError(f"{name} must be non-negative (magnitude spectrogram)")
    return X


def as_label_array(L):
    """Binary float array from a :class:`~weaksep.score.LabelMatrix` or array-like."""
    L = getattr(L, "L", L)
    L = np.asarray(L, dtype=np.float64)
    if not np.all((L == 0.0) | (L == 1.0)):
        raise ValueError("label entries must be 0 or 1")
    return L
