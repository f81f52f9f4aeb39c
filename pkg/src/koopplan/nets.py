"""Minimal dense-network core: MLPs with explicit backprop and Adam.

Everything is float64 numpy; forward passes record a tape that the backward
pass consumes, so gradients are exact reverse-mode without a general
autodiff graph.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["Mlp", "AdamState", "OptimizerError", "mlp_forward", "mlp_backward",
           "adam_step", "init_params"]


class OptimizerError(RuntimeError):
    """Non-finite gradients fed to the optimizer."""


@dataclass
class Mlp:
    """Fully connected net; `activation` applies to hidden layers only."""

    layer_dims: list
    activation: str = "relu"  # 'relu' or 'linear'
    weights: list = field(default_factory=list)  # W_i: (d_out, d_in)
    biases: list = field(default_factory=list)   # b_i: (d_out,)

    @property
    def in_dim(self):
        return self.layer_dims[0]

    @property
    def out_dim(self):
        return self.layer_dims[-1]

    def params(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def set_params(self, params):
        k = 0
        for i in range(len(self.weights)):
            self.weights[i] = params[k]
            self.biases[i] = params[k + 1]
            k += 2

    def num_params(self):
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self):
        return Mlp(list(self.layer_dims), self.activation,
                   [w.copy() for w in self.weights],
                   [b.copy() for b in self.biases])


def init_params(layer_dims, activation="relu", rng=None, scheme=None):
    """Build an Mlp with He (relu) or Xavier (linear) initialization."""
    if rng is None:
        rng = np.random.default_rng(0)
    if any(d <= 0 for d in layer_dims) or len(layer_dims) < 2:
        raise ValueError(f"bad layer dims {layer_dims}")
    if scheme is None:
        scheme = "he" if activation == "relu" else "xavier"
    weights, biases = [], []
    for d_in, d_out in zip(layer_dims[:-1], layer_dims[1:]):
        if scheme == "he":
            std = np.sqrt(2.0 / d_in)
            w = rng.normal(0.0, std, size=(d_out, d_in))
        elif scheme == "xavier":
            lim = np.sqrt(6.0 / (d_in + d_out))
            w = rng.uniform(-lim, lim, size=(d_out, d_in))
        else:
            raise ValueError(f"unknown init scheme {scheme!r}")
        weights.append(w)
        biases.append(np.zeros(d_out))
    return Mlp(list(layer_dims), activation, weights, biases)


def mlp_forward(net, x):
    """Batched forward pass.

    Returns (output, tape); the tape holds the layer inputs and hidden
    pre-activations needed by `mlp_backward`. Accepts (B, d) or (d,).
    """
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    h = x[None, :] if squeeze else x
    if h.shape[1] != net.in_dim:
        raise ValueError(f"input dim {h.shape[1]} != {net.in_dim}")
    inputs = []
    n_layers = len(net.weights)
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        inputs.append(h)
        z = h @ w.T + b
        if i < n_layers - 1 and net.activation == "relu":
            h = np.maximum(z, 0.0)
        else:
            h = z
    tape = (inputs, squeeze)
    return (h[0] if squeeze else h), tape


def mlp_backward(net, tape, output_grad):
    """Reverse pass: returns (input_grad, param_grads).

    param_grads has the layout of `net.params()`: [gW0, gb0, gW1, gb1, ...].
    """
    inputs, squeeze = tape
    g = np.asarray(output_grad, dtype=float)
    if squeeze:
        g = g[None, :]
    n_layers = len(net.weights)
    gw = [None] * n_layers
    gb = [None] * n_layers
    for i in range(n_layers - 1, -1, -1):
        h_in = inputs[i]
        if i < n_layers - 1 and net.activation == "relu":
            # inputs[i+1] is the post-activation output of layer i
            g = g * (inputs[i + 1] > 0)
        gw[i] = g.T @ h_in
        gb[i] = g.sum(axis=0)
        g = g @ net.weights[i]
    grads = []
    for a, b in zip(gw, gb):
        grads.extend([a, b])
    return (g[0] if squeeze else g), grads


@dataclass
class AdamState:
    """Bias-corrected Adam over a list of parameter arrays."""

    m: list
    v: list
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(m=[np.zeros_like(p) for p in params],
                   v=[np.zeros_like(p) for p in params],
                   lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(state, params, grads):
    """One Adam update; returns the new parameter list (inputs untouched)."""
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise OptimizerError(
                f"non-finite gradient at step {state.step + 1}: "
                f"max |g| = {max(np.max(np.abs(gi)) for gi in grads)}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        mhat = state.m[i] / (1 - b1 ** t)
        vhat = state.v[i] / (1 - b2 ** t)
        out.append(p - state.lr * mhat / (np.sqrt(vhat) + state.eps))
    return out
