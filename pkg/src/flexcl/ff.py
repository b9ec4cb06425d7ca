"""Forward-Forward network trained layer by layer on goodness contrast.

Each hidden layer sees the unit-normalised activity of the layer below,
computes ``relu(W x + b)`` and scores it with goodness ``sum(a**2)``.
Positive samples (image with its true label written into the first ten
pixels) are pushed above a threshold, negative samples (a wrong label)
below it.  Layers are trained on their own loss only; nothing is
back-propagated across layers.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.special import expit

from .estimator import PhaseKind

__all__ = [
    "N_LABELS",
    "FfNetwork",
    "AdamState",
    "embed_label",
    "wrong_label",
    "normalize",
    "layer_forward",
    "goodness",
    "layer_losses",
    "ff_phase_gradient",
    "adam_step",
    "predict",
    "error_rate",
]

N_LABELS = 10


def _softplus(x):
    return np.logaddexp(0.0, x)


@dataclass
class FfNetwork:
    """Stack of dense ReLU layers whose parameters live in one flat vector."""

    sizes: tuple[int, ...]
    params: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.sizes = tuple(int(s) for s in self.sizes)
        if len(self.sizes) < 2:
            raise ValueError("need at least an input and one hidden layer size")
        n = sum(o * i + o for i, o in zip(self.sizes[:-1], self.sizes[1:]))
        self.params = np.ascontiguousarray(self.params, dtype=float)
        if self.params.shape != (n,):
            raise ValueError(f"expected {n} parameters for sizes {self.sizes}, got {self.params.shape}")

    @classmethod
    def init(cls, sizes, rng):
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases."""
        chunks = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            chunks.append(rng.uniform(-bound, bound, fan_out * fan_in))
            chunks.append(rng.uniform(-bound, bound, fan_out))
        return cls(tuple(sizes), np.concatenate(chunks))

    @property
    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """``(W, b)`` views into :attr:`params`; ``W`` has shape (out, in)."""
        out, pos = [], 0
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            w = self.params[pos:pos + fan_out * fan_in].reshape(fan_out, fan_in)
            pos += fan_out * fan_in
            b = self.params[pos:pos + fan_out]
            pos += fan_out
            out.append((w, b))
        return out

    def copy(self) -> "FfNetwork":
        return FfNetwork(self.sizes, self.params.copy())


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params, lr=1e-3, **kw):
        return cls(np.zeros_like(params), np.zeros_like(params), 0, lr, **kw)


@njit(cache=True)
def _adam_kernel(params, m, v, grad, out_p, out_m, out_v, lr, beta1, beta2, eps, t):
    step = lr / (1.0 - beta1**t)
    root_c2 = np.sqrt(1.0 - beta2**t)
    for i in range(params.shape[0]):
        g = grad[i]
        mi = beta1 * m[i] + (1.0 - beta1) * g
        vi = beta2 * v[i] + (1.0 - beta2) * g * g
        out_m[i] = mi
        out_v[i] = vi
        # lr * m_hat / (sqrt(v_hat) + eps), rearranged to one division
        out_p[i] = params[i] - step * mi * root_c2 / (np.sqrt(vi) + eps * root_c2)


def adam_step(state: AdamState, params, grad, inplace: bool = False):
    """One bias-corrected Adam step; returns ``(new_params, new_state)``.

    With ``inplace`` the parameter and moment arrays are overwritten and
    returned instead of copied (they must be contiguous float64 arrays).
    """
    params = np.ascontiguousarray(params, dtype=float)
    grad = np.ascontiguousarray(grad, dtype=float)
    if grad.shape != state.m.shape or params.shape != state.m.shape:
        raise ValueError("params, grad and Adam moments must have the same shape")
    t = state.t + 1
    if inplace:
        out_p, out_m, out_v = params, state.m, state.v
    else:
        out_p, out_m, out_v = np.empty_like(params), np.empty_like(params), np.empty_like(params)
    _adam_kernel(params.ravel(), state.m.ravel(), state.v.ravel(), grad.ravel(),
                 out_p.ravel(), out_m.ravel(), out_v.ravel(),
                 float(state.lr), float(state.beta1), float(state.beta2), float(state.eps), t)
    return out_p, AdamState(out_m, out_v, t, state.lr, state.beta1, state.beta2, state.eps)


def embed_label(image, label: int) -> np.ndarray:
    """Overwrite the first ten pixels with the one-hot code of ``label``."""
    if not 0 <= int(label) < N_LABELS:
        raise ValueError(f"label must be in 0..{N_LABELS - 1}, got {label}")
    x = np.array(image, dtype=float)
    x[..., :N_LABELS] = 0.0
    x[..., int(label)] = 1.0
    return x


def wrong_label(label: int, rng: np.random.Generator) -> int:
    """Uniform draw from the nine labels different from ``label``."""
    return (int(label) + int(rng.integers(1, N_LABELS))) % N_LABELS


def normalize(x) -> np.ndarray:
    """Scale rows to unit Euclidean length; zero rows stay zero."""
    x = np.asarray(x, dtype=float)
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.divide(x, norm, out=np.zeros_like(x), where=norm > 0)


def layer_forward(layer, x) -> np.ndarray:
    w, b = layer
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != w.shape[1]:
        raise ValueError(f"input length {x.shape[-1]} does not match layer fan-in {w.shape[1]}")
    return np.maximum(normalize(x) @ w.T + b, 0.0)


def goodness(activity) -> np.ndarray | float:
    out = np.sum(np.square(activity), axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def _margin(g, phase: PhaseKind, threshold):
    return threshold - g if phase is PhaseKind.POSITIVE else g - threshold


def layer_losses(net: FfNetwork, sample, phase: PhaseKind, threshold: float = 2.0) -> np.ndarray:
    """Per-layer softplus margin losses of one sample."""
    losses = []
    x = np.asarray(sample, dtype=float)
    for layer in net.layers:
        a = layer_forward(layer, x)
        losses.append(_softplus(_margin(goodness(a), phase, threshold)))
        x = a
    return np.array(losses)


def ff_phase_gradient(net: FfNetwork, sample, phase: PhaseKind, threshold: float = 2.0) -> np.ndarray:
    """Gradient of the summed layer losses w.r.t. the flat parameter vector.

    Each layer's input is treated as a constant, so the gradient of layer k
    only involves layer k's own loss.
    """
    grads = []
    x = np.asarray(sample, dtype=float)
    sign = -1.0 if phase is PhaseKind.POSITIVE else 1.0
    for w, b in net.layers:
        xn = normalize(x)
        a = np.maximum(w @ xn + b, 0.0)
        g = float(a @ a)
        dloss_dg = sign * expit(_margin(g, phase, threshold))
        delta = dloss_dg * 2.0 * a  # zero where the unit is inactive
        grads.append(np.outer(delta, xn).ravel())
        grads.append(delta)
        x = a
    return np.concatenate(grads)


def _label_goodness(net: FfNetwork, images) -> np.ndarray:
    images = np.atleast_2d(np.asarray(images, dtype=float))
    scores = np.zeros((images.shape[0], N_LABELS))
    for label in range(N_LABELS):
        x = embed_label(images, label)
        for layer in net.layers:
            x = layer_forward(layer, x)
            scores[:, label] += goodness(x)
    return scores


def predict(net: FfNetwork, image):
    """Label whose embedding yields the largest goodness summed over layers.

    Ties go to the smallest label.  Accepts one image or a batch.
    """
    labels = np.argmax(_label_goodness(net, image), axis=1)
    return int(labels[0]) if np.ndim(image) == 1 else labels


def error_rate(net: FfNetwork, images, labels, batch: int = 1000) -> float:
    wrong = 0
    for start in range(0, len(labels), batch):
        pred = predict(net, images[start:start + batch])
        wrong += int(np.sum(pred != labels[start:start + batch]))
    return wrong / len(labels)
