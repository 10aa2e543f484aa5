"""Baseline counterfactual generators: JSMA-style saliency and Wachter et al."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn_core
from .classifier import TrainedModel, predict
from .engine import (CounterfactualResult, SearchConfig, generate, jsma_config,
                     l0_count)
from .errors import InputError


def jsma_generate(model: TrainedModel, x, t, cfg: SearchConfig = SearchConfig()):
    """Single-pixel saliency attack on the target cross-entropy.

    Shares the search loop with DeDUCE; only the gradient differs (no
    density term, no normalisation, no momentum).
    """
    return generate(model, None, x, t, jsma_config(cfg))


@dataclass(frozen=True)
class WachterConfig:
    lambdas: tuple = (0.1, 1.0, 10.0, 100.0, 1000.0)
    inner_steps: int = 200
    inner_lr: float = 0.05
    distance: str = "l1"
    target_confidence: float = 0.5
    max_rounds: int | None = None

    def __post_init__(self):
        lams = tuple(float(v) for v in self.lambdas)
        object.__setattr__(self, "lambdas", lams)
        if not lams or any(v <= 0 for v in lams):
            raise InputError("lambda schedule must be nonempty and positive")
        if any(b <= a for a, b in zip(lams, lams[1:])):
            raise InputError("lambda schedule must be strictly increasing")
        if self.inner_steps < 0 or self.inner_lr <= 0:
            raise InputError("inner_steps >= 0 and inner_lr > 0 required")
        if self.distance not in ("l1", "l2"):
            raise InputError(f"unknown distance {self.distance!r}")
        if not 0.0 < self.target_confidence < 1.0:
            raise InputError("target_confidence must lie in (0, 1)")


def _prediction_grad(params, x, y_target, lam):
    """Gradient of lam * ||softmax(f(x)) - y'||^2 with respect to x."""
    logits, _, tape = nn_core.forward(params, x)
    p = nn_core.softmax(logits)
    r = p - y_target
    # softmax Jacobian is symmetric: J r = p * r - p * (p . r)
    d_logits = 2.0 * lam * (p * r - p * float(p @ r))
    return nn_core.backward_input(params, tape, d_logits[None, :])[0]


def wachter_generate(model: TrainedModel, x, target_output, cfg: WachterConfig = WachterConfig()):
    """Minimise lam * ||f(x') - y'||^2 + d(x, x') for increasing lam.

    Each lambda runs ``inner_steps`` steps starting from the previous
    solution. The L1 distance is handled with a proximal (soft-threshold)
    step so untouched pixels stay exactly at their original value. The
    first lambda whose solution puts the target class above the confidence
    threshold is reported.
    """
    x = np.asarray(x, dtype=np.float64)
    if np.ndim(target_output) == 0:
        t = int(target_output)
        y_target = np.zeros(model.class_count)
        y_target[t] = 1.0
    else:
        y_target = np.asarray(target_output, dtype=np.float64)
        t = int(np.argmax(y_target))
    if y_target.shape != (model.class_count,):
        raise InputError("target_output must have one entry per class")

    xk = x.copy()
    iterations = 0
    conf = float(predict(model, xk)[0][t])
    lams = cfg.lambdas if cfg.max_rounds is None else cfg.lambdas[:cfg.max_rounds]
    lr = cfg.inner_lr
    if conf <= cfg.target_confidence:
        for lam in lams:
            for _ in range(cfg.inner_steps):
                step = xk - lr * _prediction_grad(model.params, xk, y_target, lam)
                if cfg.distance == "l1":
                    diff = step - x
                    xk = x + np.sign(diff) * np.maximum(np.abs(diff) - lr, 0.0)
                else:
                    xk = step - lr * 2.0 * (xk - x)
                np.clip(xk, 0.0, 1.0, out=xk)
                iterations += 1
            conf = float(predict(model, xk)[0][t])
            if conf > cfg.target_confidence:
                break
    return CounterfactualResult(
        x_final=xk,
        success=conf > cfg.target_confidence,
        iterations=iterations,
        final_target_confidence=conf,
        P=np.zeros(x.shape[0], dtype=np.int64),
        pixels_changed=l0_count(x, xk),
        target=t,
    )
