"""Weak-label structured-dropout autoencoders for score-informed separation."""
from .autoencoder import StructuredDropoutAutoencoder
from .nmf import ScoreInformedNMF
from .score import NoteEvent, build_assignment, build_label_matrix, load_notes, restrict_labels
from .signal import AudioClip, istft, read_wav, stft, write_wav

__version__ = "0.1.0"

__all__ = [
    "AudioClip",
    "NoteEvent",
    "ScoreInformedNMF",
    "StructuredDropoutAutoencoder",
    "build_assignment",
    "build_label_matrix",
    "istft",
    "load_notes",
    "read_wav",
    "restrict_labels",
    "stft",
    "write_wav",
]
