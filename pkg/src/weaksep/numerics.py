"""ADAM optimizer and a central finite-difference gradient oracle.

Parameter sets are ordered ``dict`` objects mapping a tensor name to a
float64 ``numpy`` array.
"""
from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    """Moment accumulators for :func:`adam_step`.

    ``m`` and ``v`` are created lazily on the first step with the shapes of
    the parameters, so a fresh state has ``t == 0`` and no moments.
    """

    step_size: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def _check_shapes(params, grads):
    if params.keys() != grads.keys():
        missing = set(params) ^ set(grads)
        raise ValueError(f"parameter/gradient names differ: {sorted(missing)}")
    for name, p in params.items():
        if np.shape(grads[name]) != np.shape(p):
            raise ValueError(
                f"gradient for parameter {name!r} has shape {np.shape(grads[name])}, "
                f"expected {np.shape(p)}"
            )


def adam_step(state, params, grads):
    """Return ADAM-updated parameters; ``state`` is advanced in place."""
    _check_shapes(params, grads)
    for name, p in params.items():
        if name in state.m and state.m[name].shape != np.shape(p):
            raise ValueError(f"optimizer state for parameter {name!r} has the wrong shape")

    state.t += 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** state.t
    corr2 = 1.0 - b2 ** state.t
    out = {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(g)
            v = np.zeros_like(g)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        out[name] = p - state.step_size * (m / corr1) / (np.sqrt(v / corr2) + state.eps)
    return out


def finite_diff_grad(f, x, h=1e-6):
    """Central-difference gradient of the scalar function ``f`` at ``x``.

    ``x`` is a parameter set (dict of arrays) or a single array; the result
    has the same structure. ``f`` receives perturbed copies, never ``x``.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    single = not isinstance(x, dict)
    params = {"x": np.asarray(x, dtype=np.float64)} if single else x
    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}

    def evaluate():
        val = f(work["x"] if single else work)
        if not np.isfinite(val):
            raise FloatingPointError(f"objective returned non-finite value {val!r}")
        return float(val)

    grads = {}
    for name, arr in work.items():
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = evaluate()
            flat[i] = orig - h
            fm = evaluate()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads[name] = g
    return grads["x"] if single else grads
