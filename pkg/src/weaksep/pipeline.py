"""End-to-end steps shared by the CLI and the experiment harness."""
import zlib
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autoencoder as ae
from .nmf import nmf_fit, nmf_separate
from .score import (DEFAULT_ONSET_TOLERANCE, DEFAULT_SUSTAIN_TOLERANCE, build_assignment,
                    build_label_matrix)
from .separation import SeparationRequest, group_restrictions, separate
from .signal import DEFAULT_HOP, DEFAULT_WINDOW, magnitude, stft

AUTOENCODER_METHODS = ("B", "C", "D")


@dataclass
class PipelineConfig:
    """Every tunable of the pipeline, with module defaults."""

    seed: int = 0
    window: int = DEFAULT_WINDOW
    hop: int = DEFAULT_HOP
    units_per_class: int = 3
    free_units: int = 0
    onset_tolerance: float = DEFAULT_ONSET_TOLERANCE
    sustain_tolerance: float = DEFAULT_SUSTAIN_TOLERANCE
    hidden_dims: tuple = (1500, 1500)
    decoder_hidden_dims: tuple = None
    multi_frame_context: int = 2
    init_output_scale: float = 1.0
    input_peak: float = 1.0
    lam: float = ae.DEFAULT_LAMBDA
    stage1_iters: int = 3000
    stage2_iters: int = 1000
    step_size: float = ae.DEFAULT_STEP_SIZE
    eps_kl: float = ae.DEFAULT_EPS_KL
    loss_tolerance: float = 1e-7
    nmf_iters: int = 1000
    nmf_tol: float = 1e-8
    mask_denominator: str = "sum_of_groups"
    eps_mask: float = 1e-10

    def sub_seed(self, name):
        """Named, independent seed derived from ``seed``."""
        seq = np.random.SeedSequence([self.seed, zlib.crc32(name.encode())])
        return int(seq.generate_state(1)[0])

    def to_dict(self):
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        if self.decoder_hidden_dims is not None:
            d["decoder_hidden_dims"] = list(self.decoder_hidden_dims)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown pipeline settings: {sorted(unknown)}")
        d = dict(d)
        for key in ("hidden_dims", "decoder_hidden_dims"):
            if d.get(key) is not None:
                d[key] = tuple(int(x) for x in d[key])
        return cls(**d)

    def label_settings(self):
        return {"units_per_class": self.units_per_class, "free_units": self.free_units,
                "onset_tolerance": self.onset_tolerance,
                "sustain_tolerance": self.sustain_tolerance,
                "window": self.window, "hop": self.hop}


@dataclass
class Analysis:
    X: object  # ComplexSpectrogram
    V: np.ndarray
    labels: object  # LabelMatrix


@dataclass
class MethodResult:
    stems: dict
    estimates: dict
    model: object
    analysis: Analysis
    trace: list = field(default_factory=list)


def analyze(clip, notes, config, units_per_class=None, free_units=None,
            onset_tolerance=None, sustain_tolerance=None):
    """STFT, magnitudes and the label matrix for ``notes`` on ``clip``'s frame grid."""
    X = stft(clip, config.window, config.hop)
    assignment = build_assignment(
        notes,
        config.units_per_class if units_per_class is None else units_per_class,
        config.free_units if free_units is None else free_units,
    )
    labels = build_label_matrix(
        notes, assignment, X.shape[1], X.hop_seconds,
        config.onset_tolerance if onset_tolerance is None else onset_tolerance,
        config.sustain_tolerance if sustain_tolerance is None else sustain_tolerance,
    )
    return Analysis(X, magnitude(X), labels)


def autoencoder_for(method, n_bins, n_units, config):
    if method not in AUTOENCODER_METHODS:
        raise ValueError(f"autoencoder method must be one of {AUTOENCODER_METHODS}")
    nonneg = method in ("C", "D")
    context = config.multi_frame_context if method == "D" else 0
    return ae.init_model(n_bins, n_units, context, config.hidden_dims,
                         config.decoder_hidden_dims, nonneg, seed=config.sub_seed("init"),
                         eps_kl=config.eps_kl, output_scale=config.init_output_scale)


def train_config(config):
    return ae.TrainConfig(stage1_iters=config.stage1_iters, stage2_iters=config.stage2_iters,
                          lam=config.lam, step_size=config.step_size,
                          seed=config.sub_seed("init"), loss_tolerance=config.loss_tolerance)


def train_autoencoder(method, analysis, config, callback=None):
    V, L = analysis.V, analysis.labels.L
    model = autoencoder_for(method, V.shape[0], L.shape[0], config)
    if config.input_peak <= 0:
        raise ValueError("input_peak must be positive")
    peak = float(V.max())
    model.input_scale = peak / config.input_peak if peak > 0 else 1.0
    model, trace = ae.train(model, V / model.input_scale, L, train_config(config), callback)
    return model, trace


def train_nmf(analysis, config):
    return nmf_fit(analysis.V, analysis.labels.L, config.nmf_iters, config.nmf_tol,
                   seed=config.sub_seed("init"))


def run_method(method, mixture, notes, groups, config):
    """Train ``method`` on ``mixture`` and separate it into ``groups`` (+ residual)."""
    analysis = analyze(mixture, notes, config)
    request = SeparationRequest(groups, config.mask_denominator, config.eps_mask)
    if method == "A":
        model, trace = train_nmf(analysis, config)
        restrictions = {k: v.L for k, v in group_restrictions(analysis.labels, request).items()}
        stems, estimates = nmf_separate(model, restrictions, analysis.X, config.eps_mask,
                                        config.mask_denominator)
        return MethodResult(stems, estimates, model, analysis, trace)
    model, trace = train_autoencoder(method, analysis, config)
    result = separate(model, analysis.V, analysis.X, analysis.labels, request)
    return MethodResult(result.stems, result.magnitudes, model, analysis, trace.all)
