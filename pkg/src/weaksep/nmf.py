"""Score-informed NMF with KL multiplicative updates.

Activations ``H`` start as random values multiplied by the label matrix, so
every entry the labels forbid is exactly zero. Multiplicative updates never
turn a zero into a non-zero, which keeps the constraint for the whole run.
"""
import logging
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import checkpoint
from ._validation import as_label_array, check_magnitudes

log = logging.getLogger(__name__)

EPS = 1e-12


@dataclass
class NmfModel:
    W: np.ndarray  # (M, K)
    H: np.ndarray  # (K, N)
    zero_mask: np.ndarray  # (K, N), 1 where H may be non-zero

    @property
    def n_units(self):
        return self.W.shape[1]

    def reconstruction(self):
        return self.W @ self.H


def _check_V(V):
    V = np.asarray(V, dtype=np.float64)
    if V.ndim != 2:
        raise ValueError(f"V must be 2-D, got shape {V.shape}")
    if np.any(V < 0) or not np.all(np.isfinite(V)):
        raise ValueError("V must be finite and non-negative")
    return V


def nmf_init(V, L, seed=0):
    """Uniform(0.1, 1) factors with ``H`` zeroed where ``L`` is zero."""
    V = _check_V(V)
    mask = as_label_array(L)
    M, N = V.shape
    if mask.ndim != 2 or mask.shape[1] != N:
        raise ValueError(f"label matrix shape {mask.shape} does not match {N} frames")
    rng = np.random.default_rng(seed)
    K = mask.shape[0]
    W = rng.uniform(0.1, 1.0, size=(M, K))
    H = rng.uniform(0.1, 1.0, size=(K, N)) * mask
    return NmfModel(W, H, mask.copy())


def divergence(V, model, eps=EPS):
    """Generalized KL divergence d(V, WH)."""
    WH = model.W @ model.H
    return float(np.sum(V * np.log((V + eps) / (WH + eps)) - V + WH))


def nmf_update(model, V, eps=EPS):
    """One multiplicative pass: H first, then W with the refreshed product."""
    W, H = model.W, model.H
    ones = np.ones_like(V)
    H = H * (W.T @ (V / (W @ H + eps))) / (W.T @ ones + eps)
    W = W * ((V / (W @ H + eps)) @ H.T) / (ones @ H.T + eps)
    return NmfModel(W, H, model.zero_mask)


def nmf_fit(V, L, n_iter=1000, tol=1e-8, seed=0, eps=EPS):
    """Run updates until ``n_iter`` or relative improvement below ``tol``.

    Returns ``(model, divergences)`` with the divergence after every update.
    """
    V = _check_V(V)
    model = nmf_init(V, L, seed)
    trace = []
    prev = divergence(V, model, eps)
    for it in range(n_iter):
        model = nmf_update(model, V, eps)
        cur = divergence(V, model, eps)
        trace.append(cur)
        if tol > 0 and prev - cur < tol * abs(prev):
            log.info("NMF converged after %d updates", it + 1)
            break
        prev = cur
    return model, trace


def group_estimates(model, restrictions):
    """``W @ (H * L_g)`` for each named restriction ``L_g``."""
    out = {}
    for name, Lg in restrictions.items():
        Lg = as_label_array(Lg)
        if Lg.shape != model.H.shape:
            raise ValueError(f"restriction {name!r} has shape {Lg.shape}, "
                             f"expected {model.H.shape}")
        out[name] = model.W @ (model.H * Lg)
    return out


def nmf_separate(model, restrictions, X, eps_mask=1e-10, mask_denominator="sum_of_groups"):
    """Soft-mask the complex spectrogram ``X`` with each group's share of ``WH``.

    The denominator is the sum of the group estimates, or the full product
    ``WH`` with ``mask_denominator="full_label_output"``. A ``"residual"``
    restriction, if present, also takes the bins no estimate explains (see
    :func:`weaksep.separation.compute_masks`). Returns
    ``(stems, estimates)``: AudioClips and magnitude estimates keyed like
    ``restrictions``.
    """
    from .separation import DENOMINATORS, RESIDUAL, apply_masks

    if mask_denominator not in DENOMINATORS:
        raise ValueError(f"mask_denominator must be one of {DENOMINATORS}")
    estimates = group_estimates(model, restrictions)
    denom = model.W @ model.H if mask_denominator == "full_label_output" else None
    uncovered = RESIDUAL if RESIDUAL in estimates else None
    return apply_masks(estimates, X, eps_mask, denom, uncovered), estimates


def save_nmf(path, model, meta=None):
    checkpoint.save(path, "nmf", {"W": model.W, "H": model.H, "zero_mask": model.zero_mask},
                    {"extra": meta or {}})


def load_nmf(path):
    _, meta, t = checkpoint.load(path, kind="nmf")
    return NmfModel(t["W"], t["H"], t["zero_mask"]), meta["extra"]


class ScoreInformedNMF(TransformerMixin, BaseEstimator):
    """KL-NMF whose activations are constrained to zero where labels say so.

    Follows the scikit-learn orientation: ``X`` is ``(n_frames, n_bins)`` and
    ``L`` is ``(n_frames, n_units)``. After fitting, ``components_`` holds
    the spectral templates (``W`` transposed) and ``model_`` the factors in
    spectrogram orientation.
    """

    def __init__(self, n_iter=1000, tol=1e-8, random_state=0):
        self.n_iter = n_iter
        self.tol = tol
        self.random_state = random_state

    def fit(self, X, L):
        self.fit_transform(X, L)
        return self

    def fit_transform(self, X, L):
        X = check_magnitudes(X)
        L = as_label_array(L)
        self.model_, self.divergence_trace_ = nmf_fit(X.T, L.T, self.n_iter, self.tol,
                                                      self.random_state)
        self.components_ = self.model_.W.T
        self.n_features_in_ = X.shape[1]
        return self.model_.H.T

    def transform(self, X, L=None):
        """Activations for new frames with the templates held fixed."""
        check_is_fitted(self, "model_")
        X = check_magnitudes(X)
        V = X.T
        K = self.model_.n_units
        mask = np.ones((K, V.shape[1])) if L is None else as_label_array(L).T
        rng = np.random.default_rng(self.random_state)
        H = rng.uniform(0.1, 1.0, size=(K, V.shape[1])) * mask
        W = self.model_.W
        denom = W.T @ np.ones_like(V) + EPS
        prev = np.inf
        for _ in range(self.n_iter):
            H = H * (W.T @ (V / (W @ H + EPS))) / denom
            cur = divergence(V, NmfModel(W, H, mask))
            if prev - cur < self.tol * abs(cur):
                break
            prev = cur
        return H.T

    def inverse_transform(self, H):
        check_is_fitted(self, "model_")
        return np.asarray(H) @ self.components_
