"""Residual MLP primitives with hand-written reverse-mode gradients.

The network is

    h_0 = W_in x + b_in
    h_{k+1} = h_k + W2_k leaky(W1_k h_k + b1_k) + b2_k      (residual blocks)
    z = h_B                                                 (features, f_Z)
    logits = W_head z + b_head

Every weight matrix may carry spectral normalisation state (a warm-started
left singular vector estimate used by power iteration).

All functions accept a batch ``X`` of shape (N, input_dim); single-sample
helpers wrap the batch path so that one code path defines the model.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError

LEAKY_SLOPE = 0.1


@dataclass
class LayerParams:
    weight: np.ndarray
    bias: np.ndarray
    sn_u: np.ndarray | None = None

    @property
    def sn_enabled(self):
        return self.sn_u is not None

    def copy(self):
        return LayerParams(
            self.weight.copy(),
            self.bias.copy(),
            None if self.sn_u is None else self.sn_u.copy(),
        )


@dataclass
class ResidualBlock:
    fc1: LayerParams  # feature_dim -> hidden
    fc2: LayerParams  # hidden -> feature_dim

    def copy(self):
        return ResidualBlock(self.fc1.copy(), self.fc2.copy())


@dataclass
class NetworkParams:
    input_proj: LayerParams
    blocks: list[ResidualBlock]
    head: LayerParams
    leaky_slope: float = LEAKY_SLOPE

    def __post_init__(self):
        f = self.input_proj.weight.shape[0]
        for k, block in enumerate(self.blocks):
            if block.fc1.weight.shape[1] != f or block.fc2.weight.shape[0] != f:
                raise InputError(f"block {k} does not map feature_dim {f} to itself")
            if block.fc1.weight.shape[0] != block.fc2.weight.shape[1]:
                raise InputError(f"block {k} hidden widths disagree")
        if self.head.weight.shape[1] != f:
            raise InputError("head input width differs from feature_dim")

    @property
    def input_dim(self):
        return self.input_proj.weight.shape[1]

    @property
    def feature_dim(self):
        return self.input_proj.weight.shape[0]

    @property
    def num_classes(self):
        return self.head.weight.shape[0]

    @property
    def hidden_dim(self):
        return self.blocks[0].fc1.weight.shape[0] if self.blocks else 0

    def layers(self):
        """(name, LayerParams) pairs in canonical order."""
        out = [("input", self.input_proj)]
        for k, block in enumerate(self.blocks):
            out.append((f"block{k}.fc1", block.fc1))
            out.append((f"block{k}.fc2", block.fc2))
        out.append(("head", self.head))
        return out

    def parameters(self):
        """(name, array) pairs for every trainable tensor, canonical order."""
        out = []
        for name, layer in self.layers():
            out.append((f"{name}.weight", layer.weight))
            out.append((f"{name}.bias", layer.bias))
        return out

    def copy(self):
        return NetworkParams(
            self.input_proj.copy(),
            [b.copy() for b in self.blocks],
            self.head.copy(),
            self.leaky_slope,
        )


@dataclass
class ForwardRecord:
    """Intermediate values kept by :func:`forward_batch` for backward passes."""

    x: np.ndarray
    block_inputs: list[np.ndarray] = field(default_factory=list)
    pre_acts: list[np.ndarray] = field(default_factory=list)
    acts: list[np.ndarray] = field(default_factory=list)
    features: np.ndarray | None = None
    logits: np.ndarray | None = None


def _unit(v):
    return v / np.linalg.norm(v)


def init_layer(rng, n_out, n_in, scale=1.0, sn=True):
    w = rng.normal(0.0, scale / np.sqrt(n_in), size=(n_out, n_in))
    u = _unit(rng.normal(size=n_out)) if sn else None
    return LayerParams(w, np.zeros(n_out), u)


def init_network(input_dim, num_classes, *, feature_dim=32, hidden_dim=64,
                 num_blocks=3, sn=True, sn_head=False, seed=0):
    rng = np.random.default_rng(seed)
    input_proj = init_layer(rng, feature_dim, input_dim, sn=sn)
    blocks = [
        ResidualBlock(
            init_layer(rng, hidden_dim, feature_dim, scale=np.sqrt(2.0), sn=sn),
            init_layer(rng, feature_dim, hidden_dim, scale=0.5, sn=sn),
        )
        for _ in range(num_blocks)
    ]
    head = init_layer(rng, num_classes, feature_dim, sn=sn and sn_head)
    return NetworkParams(input_proj, blocks, head)


def leaky_relu(u, slope=LEAKY_SLOPE):
    return np.where(u >= 0.0, u, slope * u)


def leaky_relu_grad(u, slope=LEAKY_SLOPE):
    return np.where(u >= 0.0, 1.0, slope)


def _check_input(params, X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != params.input_dim:
        raise InputError(
            f"expected input of width {params.input_dim}, got shape {X.shape}"
        )
    return X


def forward_batch(params: NetworkParams, X):
    """Run the network on a batch. Returns (logits, features, tape)."""
    X = _check_input(params, X)
    tape = ForwardRecord(x=X)
    h = X @ params.input_proj.weight.T + params.input_proj.bias
    for block in params.blocks:
        tape.block_inputs.append(h)
        u = h @ block.fc1.weight.T + block.fc1.bias
        v = leaky_relu(u, params.leaky_slope)
        tape.pre_acts.append(u)
        tape.acts.append(v)
        h = h + (v @ block.fc2.weight.T + block.fc2.bias)
    logits = h @ params.head.weight.T + params.head.bias
    tape.features = h
    tape.logits = logits
    return logits, h, tape


def forward(params: NetworkParams, x):
    """Single-sample forward. Returns (logits, features, tape)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise InputError(f"expected a flat image, got shape {x.shape}")
    logits, feats, tape = forward_batch(params, x[None, :])
    return logits[0], feats[0], tape


def log_softmax(logits):
    logits = np.asarray(logits, dtype=np.float64)
    m = np.max(logits, axis=-1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def softmax(logits):
    return np.exp(log_softmax(logits))


def cross_entropy(logits, t):
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= t < logits.shape[-1]:
        raise InputError(f"target class {t} out of range for {logits.shape[-1]} classes")
    return float(-log_softmax(logits)[..., t])


def backward_input(params: NetworkParams, tape: ForwardRecord, d_logits,
                   d_features=None):
    """Pull upstream gradients on logits (and optionally features) back to x.

    ``d_logits`` and ``d_features`` have the batch layout of the tape.
    """
    dh = np.asarray(d_logits) @ params.head.weight
    if d_features is not None:
        dh = dh + d_features
    slope = params.leaky_slope
    for k in range(len(params.blocks) - 1, -1, -1):
        block = params.blocks[k]
        dv = dh @ block.fc2.weight
        du = dv * leaky_relu_grad(tape.pre_acts[k], slope)
        dh = dh + du @ block.fc1.weight
    return dh @ params.input_proj.weight


def backward_params(params: NetworkParams, tape: ForwardRecord, d_logits):
    """Gradients of sum-over-batch loss w.r.t. every parameter tensor."""
    grads = {}
    feats = tape.features
    grads["head.weight"] = d_logits.T @ feats
    grads["head.bias"] = d_logits.sum(axis=0)
    dh = d_logits @ params.head.weight
    slope = params.leaky_slope
    for k in range(len(params.blocks) - 1, -1, -1):
        block = params.blocks[k]
        grads[f"block{k}.fc2.weight"] = dh.T @ tape.acts[k]
        grads[f"block{k}.fc2.bias"] = dh.sum(axis=0)
        dv = dh @ block.fc2.weight
        du = dv * leaky_relu_grad(tape.pre_acts[k], slope)
        grads[f"block{k}.fc1.weight"] = du.T @ tape.block_inputs[k]
        grads[f"block{k}.fc1.bias"] = du.sum(axis=0)
        dh = dh + du @ block.fc1.weight
    grads["input.weight"] = dh.T @ tape.x
    grads["input.bias"] = dh.sum(axis=0)
    return {name: grads[name] for name, _ in params.parameters()}


def mean_cross_entropy(params, batch, labels):
    logits, _, _ = forward_batch(params, batch)
    labels = np.asarray(labels)
    return float(-np.mean(log_softmax(logits)[np.arange(len(labels)), labels]))


def grad_params(params: NetworkParams, batch, labels):
    """Gradient of mean cross-entropy over ``batch``.

    Returns (loss, grads) where grads maps parameter names to arrays.
    """
    batch = np.asarray(batch, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if batch.ndim != 2 or batch.shape[0] == 0:
        raise InputError("grad_params needs a nonempty 2-D batch")
    if len(labels) != batch.shape[0]:
        raise InputError("labels and batch lengths differ")
    if labels.min() < 0 or labels.max() >= params.num_classes:
        raise InputError("label out of range")
    logits, _, tape = forward_batch(params, batch)
    logp = log_softmax(logits)
    n = batch.shape[0]
    rows = np.arange(n)
    loss = float(-np.mean(logp[rows, labels]))
    d_logits = np.exp(logp)
    d_logits[rows, labels] -= 1.0
    d_logits /= n
    return loss, backward_params(params, tape, d_logits)


@dataclass(frozen=True)
class LossSpec:
    """Scalar input-space objective built from cross-entropy and a class density.

    weighted:    ce_weight * CE(x, t) - density_weight * log p_t(f_Z(x))
    normalized:  ce_weight * grad CE / (CE + eps)
                 - density_weight * grad log p_t / (|log p_t| + eps)

    ``density`` is anything with ``mean``, ``precision`` and ``log_norm``
    indexable by class (see :class:`deduce.feature_density.FeatureGMM`).
    The normalized form is not the gradient of one scalar; its two terms
    are each exact gradients rescaled by values taken at the current x.
    """

    target: int
    ce_weight: float = 1.0
    density_weight: float = 0.0
    density: object = None
    normalized: bool = False
    eps: float = 1e-12


def _density_terms(spec, z):
    mean = spec.density.mean[spec.target]
    prec = spec.density.precision[spec.target]
    diff = z - mean
    pd = diff @ prec  # precision is symmetric
    logp = spec.density.log_norm[spec.target] - 0.5 * float(diff @ pd)
    return logp, -pd  # value, d log p / d z


def objective_terms(params, x, spec: LossSpec):
    """Forward once and return (probs, ce, log p_t or None, tape)."""
    logits, z, tape = forward(params, x)
    ce = cross_entropy(logits, spec.target)
    logp = None
    if spec.density is not None:
        logp, _ = _density_terms(spec, z)
    return softmax(logits), ce, logp, tape


def grad_input(params: NetworkParams, x, spec: LossSpec, return_terms=False):
    """Exact input gradient of the objective described by ``spec``.

    The result is the ascent direction of the loss (as in ``np.gradient``);
    counterfactual search negates it.
    """
    if not 0 <= spec.target < params.num_classes:
        raise InputError(f"target class {spec.target} out of range")
    logits, z, tape = forward(params, x)
    logp_all = log_softmax(logits)
    probs = np.exp(logp_all)
    ce = float(-logp_all[spec.target])
    d_ce = probs.copy()
    d_ce[spec.target] -= 1.0

    ce_coef = spec.ce_weight
    if spec.normalized:
        ce_coef = spec.ce_weight / (ce + spec.eps)
    d_logits = ce_coef * d_ce

    d_feat = None
    logp = None
    if spec.density_weight != 0.0:
        if spec.density is None:
            raise InputError("density_weight set but no density given")
        logp, dlogp_dz = _density_terms(spec, z)
        dens_coef = spec.density_weight
        if spec.normalized:
            dens_coef = spec.density_weight / (abs(logp) + spec.eps)
        d_feat = -dens_coef * dlogp_dz
    elif spec.density is not None:
        logp, _ = _density_terms(spec, z)

    g = backward_input(params, tape, d_logits[None, :],
                       None if d_feat is None else d_feat[None, :])[0]
    if return_terms:
        return g, probs, ce, logp
    return g


def loss_value(params, x, spec: LossSpec, ce_scale=None, density_scale=None):
    """Scalar value of the weighted objective.

    ``ce_scale`` / ``density_scale`` override the normalizers so that the
    normalized direction can be checked as the gradient of a frozen-weight
    scalar.
    """
    logits, z, _ = forward(params, x)
    ce = cross_entropy(logits, spec.target)
    total = spec.ce_weight * ce * (1.0 if ce_scale is None else ce_scale)
    if spec.density_weight != 0.0:
        logp, _ = _density_terms(spec, z)
        total -= spec.density_weight * logp * (
            1.0 if density_scale is None else density_scale)
    return total


def spectral_norm_estimate(weight, u, iters):
    """Power iteration on ``weight`` from left vector ``u``.

    Returns (sigma, u, v); u and v are unit vectors.
    """
    v = None
    for _ in range(iters):
        v = weight.T @ u
        nv = np.linalg.norm(v)
        if nv == 0.0:
            return 0.0, u, v
        v = v / nv
        u_new = weight @ v
        nu = np.linalg.norm(u_new)
        if nu == 0.0:
            return 0.0, u, v
        u = u_new / nu
    sigma = float(u @ weight @ v)
    return sigma, u, v


def normalize_spectral(layer: LayerParams, c, iters=1):
    """Cap the operator norm of ``layer.weight`` at ``c`` (in place).

    Runs ``iters`` warm-started power-iteration steps from ``layer.sn_u``
    and rescales the weight by c / sigma if the estimate exceeds c.
    A zero weight matrix is left alone, sn_u included.
    """
    if c <= 0:
        raise InputError("spectral coefficient must be positive")
    if iters < 1:
        raise InputError("need at least one power iteration")
    w = layer.weight
    if not np.any(w):
        return layer
    u = layer.sn_u
    if u is None:
        u = np.full(w.shape[0], 1.0 / np.sqrt(w.shape[0]))
    sigma, u_new, _ = spectral_norm_estimate(w, u, iters)
    if sigma == 0.0:
        return layer
    layer.sn_u = u_new
    if sigma > c:
        layer.weight = w * (c / sigma)
    return layer


def spectral_normalize_network(params: NetworkParams, c, iters=1):
    for _, layer in params.layers():
        if layer.sn_enabled:
            normalize_spectral(layer, c, iters)
    return params
