"""
Small dense-network engine with explicit reverse-mode gradients.

Layers operate on row batches: an input of shape (batch, in_features) maps to
(batch, out_features). ``MLPBlock.forward`` returns a tape that holds exactly
what ``MLPBlock.backward`` needs to replay the chain rule.

Weights are stored (out, in) so that a layer computes ``x @ W.T + b``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

ACTIVATIONS = ("relu", "sigmoid", "identity")


class ConfigurationError(ValueError):
    """Shapes or hyperparameters that cannot work together."""


class UsageError(RuntimeError):
    """An API was called out of order (e.g. a stale tape)."""


class TrainingError(RuntimeError):
    """Optimization hit a non-finite value."""


def sigmoid(z):
    return expit(z)


def _activate(z, kind):
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "sigmoid":
        return sigmoid(z)
    return z


def _activate_backward(grad, z, y, kind):
    if kind == "relu":
        return grad * (z > 0)
    if kind == "sigmoid":
        return grad * y * (1.0 - y)
    return grad


@dataclass
class DenseLayer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ConfigurationError(
                f"weight {self.weight.shape} and bias {self.bias.shape} disagree")
        if not (np.all(np.isfinite(self.weight)) and np.all(np.isfinite(self.bias))):
            raise ConfigurationError("layer parameters must be finite")

    @property
    def in_features(self):
        return self.weight.shape[1]

    @property
    def out_features(self):
        return self.weight.shape[0]

    @classmethod
    def init(cls, in_features, out_features, activation="relu", rng=None,
             zero=False, dtype=np.float64):
        """Uniform fan-in initialization in [-sqrt(1/fan_in), sqrt(1/fan_in)]."""
        if zero:
            return cls(np.zeros((out_features, in_features), dtype),
                       np.zeros(out_features, dtype), activation)
        rng = np.random.default_rng(rng)
        bound = math.sqrt(1.0 / in_features)
        w = rng.uniform(-bound, bound, size=(out_features, in_features)).astype(dtype)
        b = rng.uniform(-bound, bound, size=out_features).astype(dtype)
        return cls(w, b, activation)


@dataclass
class Tape:
    """Activation record of one forward pass."""
    version: int
    inputs: list
    preacts: list
    outputs: list
    input_add: dict
    preact_add: dict
    squeeze: bool = False


class MLPBlock:
    """Stack of dense layers with an optional residual connection.

    ``residual=(i, j)`` adds the input of layer ``i`` to the (activated)
    output of layer ``j``.
    """

    def __init__(self, layers, residual=None):
        self.layers = list(layers)
        self.residual = tuple(residual) if residual is not None else None
        self._version = 0
        for a, b in zip(self.layers[:-1], self.layers[1:]):
            if a.out_features != b.in_features:
                raise ConfigurationError(
                    f"layer widths do not chain: {a.out_features} -> {b.in_features}")
        if self.residual is not None:
            i, j = self.residual
            if not 0 <= i <= j < len(self.layers):
                raise ConfigurationError(f"bad residual span {self.residual}")
            if self.layers[i].in_features != self.layers[j].out_features:
                raise ConfigurationError("residual span endpoints differ in width")

    @classmethod
    def build(cls, sizes, activations, residual=None, rng=None, zero_last=False,
              dtype=np.float64):
        """Build from a list of widths, e.g. ``sizes=[60, 128, 128, 128, 129]``."""
        rng = np.random.default_rng(rng)
        if len(activations) != len(sizes) - 1:
            raise ConfigurationError("need one activation per layer")
        layers = []
        n = len(sizes) - 1
        for k in range(n):
            layers.append(DenseLayer.init(
                sizes[k], sizes[k + 1], activations[k], rng,
                zero=zero_last and k == n - 1, dtype=dtype))
        return cls(layers, residual)

    @property
    def in_features(self):
        return self.layers[0].in_features

    @property
    def out_features(self):
        return self.layers[-1].out_features

    def parameters(self):
        params = {}
        for k, layer in enumerate(self.layers):
            params[f"{k}.weight"] = layer.weight
            params[f"{k}.bias"] = layer.bias
        return params

    def bump(self):
        self._version += 1

    def forward(self, x, input_add=None, preact_add=None):
        """Run the block on a row batch.

        ``input_add[k]`` is added to the input of layer ``k`` and
        ``preact_add[k]`` to its pre-activation; both broadcast against the
        batch. Returns ``(output, tape)``.
        """
        x = np.asarray(x)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.shape[-1] != self.in_features:
            raise ConfigurationError(
                f"input has {x.shape[-1]} features, block expects {self.in_features}")
        input_add = input_add or {}
        preact_add = preact_add or {}
        inputs, preacts, outputs = [], [], []
        res_src = None
        h = x
        for k, layer in enumerate(self.layers):
            if k in input_add:
                h = h + input_add[k]
            if self.residual is not None and k == self.residual[0]:
                res_src = h
            inputs.append(h)
            z = h @ layer.weight.T + layer.bias
            if k in preact_add:
                z = z + preact_add[k]
            y = _activate(z, layer.activation)
            preacts.append(z)
            outputs.append(y)
            if self.residual is not None and k == self.residual[1]:
                y = y + res_src
            h = y
        tape = Tape(self._version, inputs, preacts, outputs,
                    dict(input_add), dict(preact_add), squeeze)
        return (h[0] if squeeze else h), tape

    def backward(self, tape, grad_out):
        """Reverse pass.

        Returns ``(param_grads, grad_input, grad_input_add, grad_preact_add)``
        where the injection gradients are reduced to the shape of the injected
        arrays.
        """
        if tape.version != self._version:
            raise UsageError("tape is stale: parameters changed after forward")
        g = np.asarray(grad_out)
        if tape.squeeze and g.ndim == 1:
            g = g[None, :]
        grads = {}
        g_input_add, g_preact_add = {}, {}
        g_res = None
        for k in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[k]
            if self.residual is not None and k == self.residual[1]:
                g_res = g
            gz = _activate_backward(g, tape.preacts[k], tape.outputs[k], layer.activation)
            if k in tape.preact_add:
                g_preact_add[k] = _reduce_to(gz, np.shape(tape.preact_add[k]))
            grads[f"{k}.weight"] = gz.T @ tape.inputs[k]
            grads[f"{k}.bias"] = gz.sum(axis=0)
            g = gz @ layer.weight
            if self.residual is not None and k == self.residual[0]:
                g = g + g_res
            if k in tape.input_add:
                g_input_add[k] = _reduce_to(g, np.shape(tape.input_add[k]))
        if tape.squeeze:
            g = g[0]
        return grads, g, g_input_add, g_preact_add


def _reduce_to(g, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def forward(block, x):
    return block.forward(x)


def backward(block, tape, grad_out):
    grads, gx, _, _ = block.backward(tape, grad_out)
    return grads, gx


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr_init: float = 5e-4
    lr_final: float = 5e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigurationError("betas must lie in (0, 1)")
        if self.eps <= 0 or self.lr_init <= 0 or self.lr_final <= 0:
            raise ConfigurationError("eps and learning rates must be positive")
        if self.step < 0:
            raise ConfigurationError("step must be non-negative")


def learning_rate(state, total_steps):
    """Exponential decay from lr_init to lr_final over total_steps."""
    frac = state.step / total_steps if total_steps > 0 else 0.0
    return state.lr_init * (state.lr_final / state.lr_init) ** frac


def adam_step(params, grads, state, total_steps):
    """One bias-corrected Adam update, applied to ``params`` in place.

    ``params`` and ``grads`` are dicts keyed by parameter name. Returns
    ``(params, state)``.
    """
    if state.step >= total_steps:
        raise UsageError(f"step {state.step} exceeds schedule of {total_steps}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
    lr = learning_rate(state, total_steps)
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ConfigurationError(f"gradient shape {g.shape} != parameter {p.shape} for {name!r}")
        m = state.first_moment.get(name)
        if m is None:
            m = state.first_moment[name] = np.zeros_like(p)
            state.second_moment[name] = np.zeros_like(p)
        v = state.second_moment[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# ---------------------------------------------------------------------------
# gradient checking


def relative_error(analytic, numeric, floor=1e-8):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numeric_gradient(loss_fn, array, h=1e-5):
    """Central differences of ``loss_fn()`` with respect to ``array`` (in place)."""
    grad = np.zeros_like(array, dtype=np.float64)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        lp = loss_fn()
        flat[i] = old - h
        lm = loss_fn()
        flat[i] = old
        gflat[i] = (lp - lm) / (2.0 * h)
    return grad


def gradient_check(loss_fn, params, analytic, h=1e-5):
    """Max relative error between ``analytic`` grads and central differences.

    ``loss_fn`` takes no arguments and reads the arrays in ``params``.
    Returns ``(max_error, per_param)``.
    """
    per = {}
    for name, p in params.items():
        num = numeric_gradient(loss_fn, p, h)
        per[name] = float(relative_error(analytic[name], num).max(initial=0.0))
    worst = max(per.values(), default=0.0)
    return worst, per


def finite_difference_check(block, x, h=1e-5, seed=0):
    """Check ``block.backward`` against central differences.

    The scalar loss is a fixed random projection of the output, so every
    output unit contributes. Returns the max relative error over all
    parameters and the input.
    """
    x = np.array(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    out, tape = block.forward(x)
    proj = rng.standard_normal(np.shape(out))
    grads, gx, _, _ = block.backward(tape, proj)

    def loss():
        y, _ = block.forward(x)
        return float(np.sum(y * proj))

    worst, _ = gradient_check(loss, block.parameters(), grads, h)
    num_x = numeric_gradient(loss, x, h)
    return max(worst, float(relative_error(gx, num_x).max(initial=0.0)))


def min_relu_margin(block, x):
    """Smallest |pre-activation| over ReLU units; gradient checks need it > 10h."""
    _, tape = block.forward(x)
    margins = [np.abs(z).min() for z, layer in zip(tape.preacts, block.layers)
               if layer.activation == "relu"]
    return float(min(margins)) if margins else math.inf
