"""Saliency-guided pixel search for counterfactuals (DeDUCE).

Each iteration takes the input gradient of a two-term objective (target
cross-entropy and negative target-class feature log density), adds
momentum, picks the most salient pixels that still have update budget,
moves each by a fixed step against the objective, and clips to [0, 1].
The search stops as soon as the target softmax exceeds the confidence
threshold.

Sign convention: :func:`combined_gradient` returns a DESCENT direction of
the objective, so a pixel update is ``x[i] += sign(g[i]) * step_size``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import kernels
from .classifier import TrainedModel, predict
from .errors import InputError, SearchAborted

WEIGHTED = "weighted"
NORMALIZED = "normalized"


@dataclass(frozen=True)
class SearchConfig:
    target_confidence: float = 0.5
    step_size: float = 0.1
    pixels_per_step: int = 1
    per_pixel_cap: int = 10
    max_iter: int = 700
    mu: float = 1.0
    lam: float = 1.0
    momentum: float = 0.6
    gradient_mode: str = NORMALIZED
    density_weight: float = 1.0
    eps_div: float = 1e-12

    def __post_init__(self):
        if not 0.0 < self.target_confidence < 1.0:
            raise InputError("target_confidence must lie in (0, 1)")
        if self.step_size <= 0:
            raise InputError("step_size must be positive")
        if self.pixels_per_step < 1 or self.per_pixel_cap < 1:
            raise InputError("pixels_per_step and per_pixel_cap must be >= 1")
        if self.max_iter < 0:
            raise InputError("max_iter must be >= 0")
        if self.mu < 0 or self.lam < 0 or self.density_weight < 0:
            raise InputError("mu, lam and density_weight must be nonnegative")
        if not 0.0 <= self.momentum < 1.0:
            raise InputError("momentum must lie in [0, 1)")
        if self.gradient_mode not in (WEIGHTED, NORMALIZED):
            raise InputError(f"unknown gradient_mode {self.gradient_mode!r}")

    @property
    def ce_weight(self):
        return self.mu if self.gradient_mode == NORMALIZED else self.lam


@dataclass
class CounterfactualResult:
    x_final: np.ndarray
    success: bool
    iterations: int
    final_target_confidence: float
    P: np.ndarray
    pixels_changed: int
    target: int = -1


def _evaluate(model, gmm, x, t, cfg: SearchConfig):
    dw = cfg.density_weight
    probs, _, _, grad = kernels.evaluate(
        model.compiled, x, t, gmm if dw != 0.0 else None,
        ce_weight=cfg.ce_weight, density_weight=dw,
        normalized=cfg.gradient_mode == NORMALIZED, eps=cfg.eps_div)
    if not np.all(np.isfinite(grad)):
        raise SearchAborted(f"non-finite input gradient for target {t}")
    return probs, -grad


def combined_gradient(model: TrainedModel, gmm, x, t, cfg: SearchConfig):
    """Descent direction of the combined objective at ``x``.

    normalized: -(mu * grad CE / (CE + eps) - grad log p_t / (|log p_t| + eps))
    weighted:   -grad(lam * CE - log p_t)
    The density term is scaled by ``cfg.density_weight`` (1 by default).
    """
    return _evaluate(model, gmm, x, t, cfg)[1]


def momentum_gradient(g_raw, g_prev, coeff):
    if coeff == 0.0:
        return g_raw
    return g_raw + coeff * g_prev


def select_q_largest_masked(abs_g, mask, q):
    """Indices of the q largest ``abs_g`` entries where ``mask`` is True.

    Ties go to the lowest index. Returns fewer than q indices when fewer
    pixels are free, and an empty array when none are.
    """
    if q < 1:
        raise InputError("q must be >= 1")
    cand = np.flatnonzero(mask)
    if cand.size == 0:
        return cand
    order = np.argsort(-np.asarray(abs_g)[cand], kind="stable")
    return cand[order[:q]]


def l0_count(x, x_prime, tol=1e-9):
    return int(np.count_nonzero(np.abs(np.asarray(x_prime) - np.asarray(x)) > tol))


def generate(model: TrainedModel, gmm, x, t, cfg: SearchConfig = SearchConfig()):
    """Run the pixel search from ``x`` towards class ``t``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != model.input_dim:
        raise InputError(f"expected a flat image of {model.input_dim} pixels")
    if not 0 <= t < model.class_count:
        raise InputError(f"target class {t} out of range")
    if cfg.density_weight != 0.0 and gmm is None:
        raise InputError("density term needs a fitted feature density")

    xk = x.copy()
    P = np.zeros(x.shape[0], dtype=np.int64)
    g_prev = np.zeros_like(x)
    k = 0
    while True:
        probs, g_raw = _evaluate(model, gmm, xk, t, cfg)
        if probs[t] > cfg.target_confidence or k >= cfg.max_iter:
            break
        g = momentum_gradient(g_raw, g_prev, cfg.momentum)
        idx = select_q_largest_masked(np.abs(g), P < cfg.per_pixel_cap,
                                      cfg.pixels_per_step)
        if idx.size == 0:
            break
        xk[idx] += np.sign(g[idx]) * cfg.step_size
        np.clip(xk, 0.0, 1.0, out=xk)
        P[idx] += 1
        g_prev = g
        k += 1

    conf = float(predict(model, xk)[0][t])
    return CounterfactualResult(
        x_final=xk,
        success=conf > cfg.target_confidence,
        iterations=k,
        final_target_confidence=conf,
        P=P,
        pixels_changed=l0_count(x, xk),
        target=int(t),
    )


def jsma_config(cfg: SearchConfig = SearchConfig()):
    """The search reduced to plain cross-entropy saliency, one pixel per step."""
    return replace(cfg, gradient_mode=WEIGHTED, lam=1.0, density_weight=0.0,
                   momentum=0.0, pixels_per_step=1)
