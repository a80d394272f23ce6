"""Feed-forward autoencoder whose representation units are tied to weak labels.

The encoder maps a (context-stacked) magnitude frame to ``K`` non-negative
units, the decoder maps those units back to one magnitude frame. Training
uses two objectives on top of the generalized KL reconstruction error:

* structured dropout: the representation is multiplied by the label column
  ``L[:, n]`` before decoding, so inactive classes never reach the decoder;
* activity cost: ``lam * ||(1 - L[:, n]) * r_n||^2`` penalises representation
  activity of inactive classes.

:func:`train` runs the dropout objective first and then refines with the
activity cost. Gradients are computed by hand (:func:`backprop`).

Shapes follow the spectrogram convention: ``V`` is ``(n_bins, n_frames)`` and
``L`` is ``(n_units, n_frames)``. :class:`StructuredDropoutAutoencoder` wraps
this in the scikit-learn convention (rows are frames).
"""
import copy
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import checkpoint
from ._validation import as_label_array, check_magnitudes
from .numerics import AdamState, adam_step

log = logging.getLogger(__name__)

DEFAULT_EPS_KL = 1e-6
DEFAULT_LAMBDA = 10.0
DEFAULT_STEP_SIZE = 1e-4
OBJECTIVES = ("plain", "activity", "dropout")


class TrainingDivergedError(FloatingPointError):
    def __init__(self, iteration, stage, value):
        super().__init__(f"non-finite loss {value!r} at iteration {iteration} of stage {stage}")
        self.iteration = iteration
        self.stage = stage


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str

    def __post_init__(self):
        if self.in_dim <= 0 or self.out_dim <= 0:
            raise ValueError("layer dimensions must be positive")
        if self.activation not in ("sigmoid", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass
class Layer:
    W: np.ndarray  # (in_dim, out_dim)
    b: np.ndarray  # (out_dim,)
    activation: str

    @property
    def spec(self):
        return LayerSpec(self.W.shape[0], self.W.shape[1], self.activation)


@dataclass
class AutoencoderModel:
    encoder: list
    decoder: list
    context: int = 0
    nonneg_decoder: bool = False
    eps_kl: float = DEFAULT_EPS_KL
    # magnitudes are divided by this before entering the network
    input_scale: float = 1.0

    @property
    def n_bins(self):
        return self.decoder[-1].W.shape[1]

    @property
    def n_units(self):
        return self.encoder[-1].W.shape[1]

    @property
    def input_dim(self):
        return self.encoder[0].W.shape[0]

    @property
    def topology(self):
        return [l.spec for l in self.encoder], [l.spec for l in self.decoder]

    def params(self):
        """Ordered name -> array mapping (the arrays are shared, not copied)."""
        out = {}
        for part, layers in (("encoder", self.encoder), ("decoder", self.decoder)):
            for i, layer in enumerate(layers):
                out[f"{part}.{i}.W"] = layer.W
                out[f"{part}.{i}.b"] = layer.b
        return out

    def with_params(self, params):
        new = copy.copy(self)
        new.encoder = [Layer(params[f"encoder.{i}.W"], params[f"encoder.{i}.b"], l.activation)
                       for i, l in enumerate(self.encoder)]
        new.decoder = [Layer(params[f"decoder.{i}.W"], params[f"decoder.{i}.b"], l.activation)
                       for i, l in enumerate(self.decoder)]
        return new

    def copy(self):
        return self.with_params({k: v.copy() for k, v in self.params().items()})


def init_model(n_bins, n_units, context=0, hidden_dims=(1500, 1500), decoder_hidden_dims=None,
               nonneg_decoder=False, seed=0, eps_kl=DEFAULT_EPS_KL, output_scale=1.0):
    """Glorot-uniform weights, zero biases.

    Hidden layers are sigmoid; the representation and output layers are ReLU.
    ``decoder_hidden_dims`` defaults to the last encoder hidden width, giving
    the 3-layer analysis / 2-layer synthesis layout; ``()`` makes the decoder
    a single ReLU layer.

    ``output_scale`` multiplies the decoder's last weight matrix. A value
    below one makes the initial reconstruction undershoot the (normalised)
    input, so the first updates grow the representation instead of pushing
    every ReLU unit below zero.
    """
    if output_scale <= 0:
        raise ValueError("output_scale must be positive")
    if n_bins <= 0 or n_units <= 0 or context < 0:
        raise ValueError("n_bins and n_units must be positive, context non-negative")
    hidden_dims = list(hidden_dims)
    if decoder_hidden_dims is None:
        decoder_hidden_dims = hidden_dims[-1:]
    rng = np.random.default_rng(seed)

    def stack(dims):
        layers = []
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            act = "relu" if i == len(dims) - 2 else "sigmoid"
            LayerSpec(fan_in, fan_out, act)
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            W = rng.uniform(-limit, limit, size=(fan_in, fan_out))
            layers.append(Layer(W, np.zeros(fan_out), act))
        return layers

    encoder = stack([n_bins * (2 * context + 1), *hidden_dims, n_units])
    decoder = stack([n_units, *decoder_hidden_dims, n_bins])
    if nonneg_decoder:
        for layer in decoder:
            np.abs(layer.W, out=layer.W)
    decoder[-1].W *= output_scale
    return AutoencoderModel(encoder, decoder, context, nonneg_decoder, eps_kl)


def context_matrix(V, context):
    """Stack ``2*context + 1`` neighbouring frames per row; edges are replicated.

    Returns an ``(n_frames, n_bins * (2*context + 1))`` array whose row ``n``
    is ``[V[:, n-C], ..., V[:, n+C]]``.
    """
    V = np.asarray(V, dtype=np.float64)
    M, N = V.shape
    if context == 0:
        return np.ascontiguousarray(V.T)
    idx = np.clip(np.arange(N)[:, None] + np.arange(-context, context + 1)[None, :], 0, N - 1)
    return V.T[idx].reshape(N, M * (2 * context + 1))


def assemble_context(V, n, context):
    V = np.asarray(V, dtype=np.float64)
    N = V.shape[1]
    if not 0 <= n < N:
        raise IndexError(f"frame {n} out of range for {N} frames")
    cols = np.clip(np.arange(n - context, n + context + 1), 0, N - 1)
    return V[:, cols].T.reshape(-1)


def _activate(Z, activation):
    if activation == "sigmoid":
        return expit(Z)
    return np.maximum(Z, 0.0)


def _run(layers, A):
    for layer in layers:
        A = _activate(A @ layer.W + layer.b, layer.activation)
    return A


def _check_width(x, width, what):
    if x.shape[-1] != width:
        raise ValueError(f"{what} has length {x.shape[-1]}, model expects {width}")


def encode(model, x):
    """Representation of one input vector (or a batch of rows)."""
    x = np.asarray(x, dtype=np.float64)
    _check_width(x, model.input_dim, "encoder input")
    return _run(model.encoder, x)


def decode(model, r):
    r = np.asarray(r, dtype=np.float64)
    _check_width(r, model.n_units, "representation")
    return _run(model.decoder, r)


def forward_dropout(model, x, l):
    l = np.asarray(l, dtype=np.float64)
    _check_width(l, model.n_units, "dropout vector")
    return decode(model, l * encode(model, x))


def kl_divergence(a, b, eps=DEFAULT_EPS_KL):
    """Generalized KL divergence ``sum(a*log((a+eps)/(b+eps)) - a + b)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if eps <= 0:
        raise ValueError("eps must be positive")
    if np.any(a < 0) or np.any(b < 0):
        raise ValueError("generalized KL divergence needs non-negative inputs")
    return float(np.sum(a * np.log((a + eps) / (b + eps)) - a + b))


def _kl_terms(A, B, eps):
    return A * np.log((A + eps) / (B + eps)) - A + B


def _label_columns(L, N, K):
    L = as_label_array(L)
    if L.shape != (K, N):
        raise ValueError(f"label matrix has shape {L.shape}, expected {(K, N)}")
    return np.ascontiguousarray(L.T)


def _prepare(model, V):
    V = np.asarray(V, dtype=np.float64)
    if V.ndim != 2 or V.shape[0] != model.n_bins:
        raise ValueError(f"spectrogram has shape {V.shape}, model expects {model.n_bins} bins")
    return context_matrix(V, model.context), np.ascontiguousarray(V.T)


def _loss_and_grads(model, X, T, Lt, objective, lam, need_grads=True):
    """Objective value (and gradients) on frame-major data.

    ``X`` is ``(N, input_dim)``, ``T`` the ``(N, M)`` targets and ``Lt`` the
    ``(N, K)`` labels (unused for the plain objective).
    """
    N = X.shape[0]
    eps = model.eps_kl
    acts = [X]
    for layer in model.encoder:
        acts.append(_activate(acts[-1] @ layer.W + layer.b, layer.activation))
    r = acts[-1]
    z = Lt * r if objective == "dropout" else r
    dec_acts = [z]
    for layer in model.decoder:
        dec_acts.append(_activate(dec_acts[-1] @ layer.W + layer.b, layer.activation))
    out = dec_acts[-1]

    loss = float(np.sum(_kl_terms(out, T, eps))) / N
    if objective == "activity":
        inactive = (1.0 - Lt) * r
        loss += lam * float(np.sum(inactive * inactive)) / N
    if not need_grads:
        return loss, None

    grads = {}
    dA = (np.log((out + eps) / (T + eps)) + out / (out + eps) - 1.0) / N
    for i in range(len(model.decoder) - 1, -1, -1):
        layer = model.decoder[i]
        dZ = _activation_grad(dA, dec_acts[i + 1], layer.activation)
        grads[f"decoder.{i}.W"] = dec_acts[i].T @ dZ
        grads[f"decoder.{i}.b"] = dZ.sum(axis=0)
        dA = dZ @ layer.W.T
    if objective == "dropout":
        dA = dA * Lt
    elif objective == "activity":
        dA = dA + (2.0 * lam / N) * (1.0 - Lt) * r
    for i in range(len(model.encoder) - 1, -1, -1):
        layer = model.encoder[i]
        dZ = _activation_grad(dA, acts[i + 1], layer.activation)
        grads[f"encoder.{i}.W"] = acts[i].T @ dZ
        grads[f"encoder.{i}.b"] = dZ.sum(axis=0)
        if i:
            dA = dZ @ layer.W.T
    return loss, {k: grads[k] for k in model.params()}


def _activation_grad(dA, A, activation):
    if activation == "sigmoid":
        return dA * A * (1.0 - A)
    # relu subgradient at 0 is 0
    return dA * (A > 0.0)


def loss_reconstruction(model, V):
    X, T = _prepare(model, V)
    return _loss_and_grads(model, X, T, None, "plain", 0.0, need_grads=False)[0]


def loss_activity(model, V, L, lam=DEFAULT_LAMBDA):
    if lam < 0:
        raise ValueError("lam must be non-negative")
    X, T = _prepare(model, V)
    Lt = _label_columns(L, X.shape[0], model.n_units)
    return _loss_and_grads(model, X, T, Lt, "activity", lam, need_grads=False)[0]


def loss_dropout(model, V, L):
    X, T = _prepare(model, V)
    Lt = _label_columns(L, X.shape[0], model.n_units)
    return _loss_and_grads(model, X, T, Lt, "dropout", 0.0, need_grads=False)[0]


def backprop(model, V, L=None, objective="dropout", lam=DEFAULT_LAMBDA):
    """Loss value and exact gradients for every weight and bias.

    Returns ``(loss, grads)`` where ``grads`` is keyed like ``model.params()``.
    """
    if objective not in OBJECTIVES:
        raise ValueError(f"objective must be one of {OBJECTIVES}, got {objective!r}")
    X, T = _prepare(model, V)
    Lt = None if objective == "plain" else _label_columns(L, X.shape[0], model.n_units)
    return _loss_and_grads(model, X, T, Lt, objective, lam)


def project_nonneg(model):
    """Copy of ``model`` with negative decoder weights clamped to zero."""
    params = dict(model.params())
    for i in range(len(model.decoder)):
        params[f"decoder.{i}.W"] = np.maximum(params[f"decoder.{i}.W"], 0.0)
    return model.with_params(params)


@dataclass
class TrainConfig:
    stage1_iters: int = 3000
    stage2_iters: int = 1000
    lam: float = DEFAULT_LAMBDA
    step_size: float = DEFAULT_STEP_SIZE
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    seed: int = 0
    # stop a stage when the loss improved by less than this fraction over `patience` iterations
    loss_tolerance: float = 1e-7
    patience: int = 50


@dataclass
class LossTrace:
    stage1: list = field(default_factory=list)
    stage2: list = field(default_factory=list)

    @property
    def all(self):
        return self.stage1 + self.stage2


def _run_stage(model, X, T, Lt, objective, n_iter, config, trace, stage, callback=None):
    state = AdamState(config.step_size, config.beta1, config.beta2, config.eps_adam)
    params = {k: v.copy() for k, v in model.params().items()}
    dec_weights = [f"decoder.{i}.W" for i in range(len(model.decoder))]
    for it in range(n_iter):
        loss, grads = _loss_and_grads(model, X, T, Lt, objective, config.lam)
        if not np.isfinite(loss):
            raise TrainingDivergedError(it, stage, loss)
        trace.append(loss)
        if callback is not None:
            callback(stage, it, loss, model)
        params = adam_step(state, params, grads)
        if model.nonneg_decoder:
            for name in dec_weights:
                np.maximum(params[name], 0.0, out=params[name])
        model = model.with_params(params)
        p = config.patience
        if config.loss_tolerance > 0 and len(trace) > p:
            ref = trace[-1 - p]
            if ref - trace[-1] < config.loss_tolerance * abs(ref):
                log.info("stage %d converged after %d iterations", stage, it + 1)
                break
    return model


def train(model, V, L, config=None, callback=None):
    """Structured-dropout stage followed by activity-cost refinement.

    Each stage runs full-batch ADAM with fresh moment estimates. Returns the
    trained copy of ``model`` and a :class:`LossTrace` holding the objective
    value before every step. ``callback(stage, iteration, loss, model)`` is
    called once per iteration if given.
    """
    config = config or TrainConfig()
    X, T = _prepare(model, V)
    Lt = _label_columns(L, X.shape[0], model.n_units)
    trace = LossTrace()
    model = model.copy()
    model = _run_stage(model, X, T, Lt, "dropout", config.stage1_iters, config,
                       trace.stage1, 1, callback)
    model = _run_stage(model, X, T, Lt, "activity", config.stage2_iters, config,
                       trace.stage2, 2, callback)
    return model, trace


def save_model(path, model, meta=None):
    enc, dec = model.topology
    info = {
        "encoder_activations": [s.activation for s in enc],
        "decoder_activations": [s.activation for s in dec],
        "context": model.context,
        "nonneg_decoder": model.nonneg_decoder,
        "eps_kl": model.eps_kl,
        "input_scale": model.input_scale,
        "extra": meta or {},
    }
    checkpoint.save(path, "autoencoder", model.params(), info)


def load_model(path):
    """Return ``(model, extra_meta)`` from a file written by :func:`save_model`."""
    _, meta, tensors = checkpoint.load(path, kind="autoencoder")
    enc = [Layer(tensors[f"encoder.{i}.W"], tensors[f"encoder.{i}.b"], act)
           for i, act in enumerate(meta["encoder_activations"])]
    dec = [Layer(tensors[f"decoder.{i}.W"], tensors[f"decoder.{i}.b"], act)
           for i, act in enumerate(meta["decoder_activations"])]
    model = AutoencoderModel(enc, dec, meta["context"], meta["nonneg_decoder"],
                             meta["eps_kl"], meta["input_scale"])
    return model, meta["extra"]


class StructuredDropoutAutoencoder(TransformerMixin, BaseEstimator):
    """Scikit-learn estimator around :func:`init_model` and :func:`train`.

    ``fit(X, L)`` takes magnitude frames as rows, ``X`` of shape
    ``(n_frames, n_bins)``, and the label matrix transposed to
    ``(n_frames, n_units)``. ``transform`` returns the representation.

    Parameters
    ----------
    hidden_dims : sequence of int
        Encoder hidden widths (sigmoid). The decoder uses
        ``decoder_hidden_dims``, by default the last encoder width.
    context : int
        Frames of context on each side of the centre frame.
    nonneg_decoder : bool
        Keep decoder weights in the non-negative orthant.
    lam : float
        Weight of the activity cost in the refinement stage.
    output_scale : float
        Initial gain on the decoder's last weight matrix (see :func:`init_model`).
    normalize : bool
        Scale inputs so the largest training magnitude equals ``input_peak``.
    input_peak : float
        Target peak of the normalised input; ignored without ``normalize``.
    """

    def __init__(self, hidden_dims=(1500, 1500), decoder_hidden_dims=None, context=0,
                 nonneg_decoder=False, lam=DEFAULT_LAMBDA, stage1_iters=3000,
                 stage2_iters=1000, step_size=DEFAULT_STEP_SIZE, eps_kl=DEFAULT_EPS_KL,
                 loss_tolerance=1e-7, output_scale=1.0, normalize=True, input_peak=1.0,
                 random_state=0):
        self.hidden_dims = hidden_dims
        self.decoder_hidden_dims = decoder_hidden_dims
        self.context = context
        self.nonneg_decoder = nonneg_decoder
        self.lam = lam
        self.stage1_iters = stage1_iters
        self.stage2_iters = stage2_iters
        self.step_size = step_size
        self.eps_kl = eps_kl
        self.loss_tolerance = loss_tolerance
        self.output_scale = output_scale
        self.normalize = normalize
        self.input_peak = input_peak
        self.random_state = random_state

    def _train_config(self):
        return TrainConfig(stage1_iters=self.stage1_iters, stage2_iters=self.stage2_iters,
                           lam=self.lam, step_size=self.step_size, seed=self.random_state,
                           loss_tolerance=self.loss_tolerance)

    def fit(self, X, L, callback=None):
        X = check_magnitudes(X)
        L = as_label_array(L)
        if L.ndim != 2 or L.shape[0] != X.shape[0]:
            raise ValueError(f"L must have one row per frame: X has {X.shape[0]} rows, "
                             f"L has shape {L.shape}")
        if self.input_peak <= 0:
            raise ValueError("input_peak must be positive")
        peak = float(X.max())
        scale = peak / self.input_peak if self.normalize and peak > 0 else 1.0
        model = init_model(X.shape[1], L.shape[1], self.context, self.hidden_dims,
                           self.decoder_hidden_dims, self.nonneg_decoder,
                           seed=self.random_state, eps_kl=self.eps_kl,
                           output_scale=self.output_scale)
        model.input_scale = scale
        self.model_, self.loss_trace_ = train(model, X.T / scale, L.T, self._train_config(),
                                              callback)
        self.n_features_in_ = X.shape[1]
        self.n_units_ = L.shape[1]
        return self

    @classmethod
    def from_model(cls, model):
        est = cls(hidden_dims=tuple(s.out_dim for s in model.topology[0][:-1]),
                  decoder_hidden_dims=tuple(s.out_dim for s in model.topology[1][:-1]),
                  context=model.context, nonneg_decoder=model.nonneg_decoder,
                  eps_kl=model.eps_kl)
        est.model_ = model
        est.loss_trace_ = LossTrace()
        est.n_features_in_ = model.n_bins
        est.n_units_ = model.n_units
        return est

    def _inputs(self, X):
        check_is_fitted(self, "model_")
        X = check_magnitudes(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, estimator was fitted with "
                             f"{self.n_features_in_}")
        return context_matrix(X.T / self.model_.input_scale, self.model_.context)

    def transform(self, X):
        X = self._inputs(X)
        return encode(self.model_, X)

    def inverse_transform(self, R):
        check_is_fitted(self, "model_")
        return decode(self.model_, R) * self.model_.input_scale

    def reconstruct(self, X, L=None):
        """Decoded frames, with the representation masked by ``L`` if given."""
        R = self.transform(X)
        if L is not None:
            R = R * as_label_array(L)
        return self.inverse_transform(R)

    def score(self, X, L=None):
        """Negative mean generalized KL reconstruction error (higher is better)."""
        X = check_magnitudes(X)
        Xs = X / self.model_.input_scale
        out = self.reconstruct(X, L) / self.model_.input_scale
        return -float(np.sum(_kl_terms(out, Xs, self.model_.eps_kl))) / X.shape[0]
