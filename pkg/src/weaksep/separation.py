"""Score-informed separation with a trained autoencoder.

For every note group the label matrix is restricted to that group's notes and
the mixture magnitudes are passed through the network with that restriction
as the dropout mask. Each group's output, divided by a common denominator,
becomes a soft mask on the complex mixture STFT.
"""
from dataclasses import dataclass

import numpy as np

from . import autoencoder as ae
from .score import residual_labels, restrict_labels
from .signal import istft

RESIDUAL = "residual"
DENOMINATORS = ("sum_of_groups", "full_label_output")


@dataclass
class SeparationRequest:
    groups: dict  # name -> list of NoteEvent
    mask_denominator: str = "sum_of_groups"
    eps_mask: float = 1e-10

    def __post_init__(self):
        if self.mask_denominator not in DENOMINATORS:
            raise ValueError(f"mask_denominator must be one of {DENOMINATORS}")
        if self.eps_mask <= 0:
            raise ValueError("eps_mask must be positive")
        if RESIDUAL in self.groups:
            raise ValueError(f"group name {RESIDUAL!r} is reserved for the free units")
        seen = set()
        for name, notes in self.groups.items():
            ids = {id(n) for n in notes}
            if seen & ids:
                raise ValueError(f"group {name!r} shares notes with another group")
            seen |= ids

    @property
    def notes(self):
        return [n for group in self.groups.values() for n in group]


@dataclass
class SeparationResult:
    stems: dict  # name -> AudioClip, residual last
    magnitudes: dict  # name -> (M, N) group estimate
    masks: dict


def group_restrictions(labels, request):
    notes = request.notes
    out = {name: restrict_labels(labels, group, notes) for name, group in request.groups.items()}
    out[RESIDUAL] = residual_labels(labels)
    return out


def group_output(model, V, Lg):
    """Network output with representation masked by ``Lg``; silent where ``Lg`` is all zero."""
    Xin = ae.context_matrix(np.asarray(V) / model.input_scale, model.context)
    Lt = Lg.T
    out = ae.decode(model, Lt * ae.encode(model, Xin)) * model.input_scale
    out[~Lt.any(axis=1)] = 0.0
    return out.T


def apply_masks(estimates, X, eps_mask=1e-10, denominator=None, uncovered=None):
    """Soft masks from :func:`compute_masks` applied to ``X``; returns stems."""
    masks = compute_masks(estimates, eps_mask, denominator, uncovered)
    Z = X.complex
    return {name: istft(X.with_values(mask * Z)) for name, mask in masks.items()}


def compute_masks(estimates, eps_mask=1e-10, denominator=None, uncovered=None):
    """``estimate / (denominator + eps_mask)`` for every named estimate.

    The default denominator is the sum of the estimates. In that case, if
    ``uncovered`` names one of the estimates, bins where every estimate
    vanishes (total at most ``10 * eps_mask``) go entirely to that mask, so the
    masks sum to one everywhere and the stems add up to the mixture.
    """
    if denominator is not None:
        D = denominator + eps_mask
        return {name: est / D for name, est in estimates.items()}
    total = sum(estimates.values())
    live = total > 10 * eps_mask
    D = total + eps_mask
    masks = {name: np.where(live, est / D, 0.0) for name, est in estimates.items()}
    if uncovered is not None:
        masks[uncovered] = np.where(live, masks[uncovered], 1.0)
    return masks


def _check_shapes(model, V, X, labels):
    M, N = V.shape
    if X.shape != (M, N):
        raise ValueError(f"STFT shape {X.shape} does not match magnitudes {V.shape}")
    if model.n_bins != M:
        raise ValueError(f"model expects {model.n_bins} frequency bins, spectrogram has {M}")
    K = labels.L.shape[0]
    if model.n_units != K:
        raise ValueError(f"model has K={model.n_units} representation units but the note "
                         f"list yields K={K} (classes x units_per_class + free_units)")
    if labels.L.shape[1] != N:
        raise ValueError(f"label matrix has {labels.L.shape[1]} frames, spectrogram has {N}")


def separate(model, V, X, labels, request):
    """Separate ``X`` into one stem per requested group plus the residual.

    The residual stem carries the free units and, with the default
    denominator, every bin that no unit explains.
    """
    V = np.asarray(V, dtype=np.float64)
    _check_shapes(model, V, X, labels)
    restrictions = group_restrictions(labels, request)
    estimates = {name: group_output(model, V, Lg.L) for name, Lg in restrictions.items()}
    denom = None
    if request.mask_denominator == "full_label_output":
        denom = group_output(model, V, labels.L)
    masks = compute_masks(estimates, request.eps_mask, denom, uncovered=RESIDUAL)
    Z = X.complex
    stems = {name: istft(X.with_values(mask * Z)) for name, mask in masks.items()}
    return SeparationResult(stems, estimates, masks)
