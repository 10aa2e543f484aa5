"""Backend selection for the per-iteration search kernels.

The compiled extension is used when it imports; otherwise (or with
``DEDUCE_BACKEND=python``) the numpy implementation runs. Both expose
``forward(net, x)`` and ``evaluate(net, x, target, ...)`` over a
:class:`CompiledNet`.
"""

import logging
import os
from dataclasses import dataclass

import numpy as np

from . import _fallback
from .nn_core import NetworkParams

log = logging.getLogger(__name__)

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None


@dataclass(frozen=True)
class CompiledNet:
    """Network parameters frozen into contiguous arrays for the kernels."""

    params: NetworkParams
    w_in: np.ndarray
    b_in: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w_head: np.ndarray
    b_head: np.ndarray
    slope: float

    @classmethod
    def from_params(cls, params: NetworkParams):
        f, h = params.feature_dim, params.hidden_dim
        nb = len(params.blocks)

        def stack(arrs, shape):
            if not arrs:
                return np.zeros(shape)
            return np.ascontiguousarray(np.stack(arrs), dtype=np.float64)

        c = np.ascontiguousarray
        return cls(
            params=params,
            w_in=c(params.input_proj.weight, dtype=np.float64),
            b_in=c(params.input_proj.bias, dtype=np.float64),
            w1=stack([b.fc1.weight for b in params.blocks], (nb, h, f)),
            b1=stack([b.fc1.bias for b in params.blocks], (nb, h)),
            w2=stack([b.fc2.weight for b in params.blocks], (nb, f, h)),
            b2=stack([b.fc2.bias for b in params.blocks], (nb, f)),
            w_head=c(params.head.weight, dtype=np.float64),
            b_head=c(params.head.bias, dtype=np.float64),
            slope=float(params.leaky_slope),
        )


BACKENDS = {"python": _fallback}
if _compiled is not None:
    BACKENDS["compiled"] = _compiled


def _select():
    want = os.environ.get("DEDUCE_BACKEND", "").strip().lower()
    if want:
        if want not in BACKENDS:
            log.warning("backend %r unavailable, using %s", want,
                        "compiled" if _compiled else "python")
        else:
            return want
    return "compiled" if _compiled is not None else "python"


_active = _select()


def active_backend():
    return _active


def set_backend(name):
    """Switch backend for the whole process; returns the previous name."""
    global _active
    if name not in BACKENDS:
        raise ValueError(f"unknown or unavailable backend {name!r}")
    prev, _active = _active, name
    return prev


def get(name=None):
    return BACKENDS[name or _active]


def forward(net: CompiledNet, x, backend=None):
    return get(backend).forward(net, x)


def evaluate(net: CompiledNet, x, target, gmm=None, *, ce_weight=1.0,
             density_weight=0.0, normalized=False, eps=1e-12, backend=None):
    """One forward pass plus the combined-objective input gradient.

    Returns (probs, ce, log p_t or None, grad); grad is the ascent
    direction of ce_weight*CE - density_weight*log p_t (or its normalized
    variant).
    """
    if density_weight != 0.0 and gmm is None:
        raise ValueError("density term requested without a fitted density")
    if gmm is None:
        mean_t = prec_t = None
        log_norm_t = 0.0
    else:
        mean_t = gmm.mean[target]
        prec_t = gmm.precision[target]
        log_norm_t = float(gmm.log_norm[target])
    return get(backend).evaluate(net, x, int(target), mean_t, prec_t, log_norm_t,
                                 float(ce_weight), float(density_weight),
                                 bool(normalized), float(eps))


def fnv1a64(data, backend=None):
    """64-bit FNV-1a hash of a bytes-like object."""
    buf = np.frombuffer(bytes(data), dtype=np.uint8)
    return int(get(backend).fnv1a64(buf))
