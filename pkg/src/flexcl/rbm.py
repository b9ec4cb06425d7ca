"""Binary Restricted Boltzmann Machine.

Block Gibbs dynamics run in a compiled kernel that consumes uniforms drawn
up front from a numpy ``Generator``: every sampling routine in this module
draws ``n_hidden + n_visible`` uniforms per time step (visible ones are
drawn but ignored while clamped), so a run is fully determined by its seed
no matter how the steps are batched.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy.special import expit, logsumexp


__all__ = [
    "RbmParams",
    "RbmState",
    "CapabilityError",
    "MAX_EXACT_VISIBLE",
    "hidden_conditional",
    "visible_conditional",
    "gibbs_chain",
    "sample_chain",
    "run_phase",
    "phase_gradient",
    "free_energy",
    "exact_nll",
    "exact_nll_gradient",
    "model_distribution",
    "all_binary_states",
]

MAX_EXACT_VISIBLE = 24
_ENUM_BLOCK = 1 << 16


class CapabilityError(RuntimeError):
    """Requested computation exceeds what exact enumeration can handle."""


@dataclass
class RbmParams:
    weights: np.ndarray  # (n_visible, n_hidden)
    vis_bias: np.ndarray
    hid_bias: np.ndarray

    def __post_init__(self):
        self.weights = np.ascontiguousarray(self.weights, dtype=float)
        self.vis_bias = np.ascontiguousarray(self.vis_bias, dtype=float)
        self.hid_bias = np.ascontiguousarray(self.hid_bias, dtype=float)
        n_v, n_h = self.weights.shape
        if self.vis_bias.shape != (n_v,) or self.hid_bias.shape != (n_h,):
            raise ValueError(
                f"bias shapes {self.vis_bias.shape}, {self.hid_bias.shape} "
                f"inconsistent with weights {self.weights.shape}"
            )

    @property
    def n_visible(self) -> int:
        return self.weights.shape[0]

    @property
    def n_hidden(self) -> int:
        return self.weights.shape[1]

    @property
    def size(self) -> int:
        return self.weights.size + self.n_visible + self.n_hidden

    @classmethod
    def zeros(cls, n_visible, n_hidden):
        return cls(np.zeros((n_visible, n_hidden)), np.zeros(n_visible), np.zeros(n_hidden))

    @classmethod
    def random(cls, n_visible, n_hidden, rng, std=0.01):
        """White-noise initialisation of every parameter, biases included."""
        return cls(
            rng.normal(0.0, std, (n_visible, n_hidden)),
            rng.normal(0.0, std, n_visible),
            rng.normal(0.0, std, n_hidden),
        )

    def flat(self) -> np.ndarray:
        return np.concatenate([self.weights.ravel(), self.vis_bias, self.hid_bias])

    @classmethod
    def from_flat(cls, vec, n_visible, n_hidden):
        vec = np.asarray(vec, dtype=float)
        nw = n_visible * n_hidden
        return cls(
            vec[:nw].reshape(n_visible, n_hidden),
            vec[nw:nw + n_visible],
            vec[nw + n_visible:],
        )

    def copy(self) -> "RbmParams":
        return RbmParams(self.weights.copy(), self.vis_bias.copy(), self.hid_bias.copy())

    def permute_hidden(self, perm) -> "RbmParams":
        return RbmParams(self.weights[:, perm], self.vis_bias, self.hid_bias[perm])

    def is_finite(self) -> bool:
        return bool(
            np.all(np.isfinite(self.weights))
            and np.all(np.isfinite(self.vis_bias))
            and np.all(np.isfinite(self.hid_bias))
        )


@dataclass
class RbmState:
    visible: np.ndarray
    hidden: np.ndarray

    def __post_init__(self):
        self.visible = np.ascontiguousarray(self.visible, dtype=float)
        self.hidden = np.ascontiguousarray(self.hidden, dtype=float)

    def copy(self) -> "RbmState":
        return RbmState(self.visible.copy(), self.hidden.copy())


def _check_len(name, vec, n):
    if vec.shape[-1] != n:
        raise ValueError(f"{name} has length {vec.shape[-1]}, expected {n}")


def hidden_conditional(p: RbmParams, v) -> np.ndarray:
    """P(h_j = 1 | v) for every hidden unit; ``v`` may be a batch of rows."""
    v = np.asarray(v, dtype=float)
    _check_len("visible vector", v, p.n_visible)
    return expit(v @ p.weights + p.hid_bias)


def visible_conditional(p: RbmParams, h) -> np.ndarray:
    h = np.asarray(h, dtype=float)
    _check_len("hidden vector", h, p.n_hidden)
    return expit(h @ p.weights.T + p.vis_bias)


# --- compiled dynamics -------------------------------------------------------


@njit(cache=True)
def _sigmoid(s):
    return 1.0 / (1.0 + np.exp(-s))


@njit(cache=True)
def _gibbs_step(W, a, c, v, h, x, clamped, u_row):
    n_v, n_h = W.shape
    for j in range(n_h):
        s = c[j]
        for i in range(n_v):
            s += v[i] * W[i, j]
        h[j] = 1.0 if u_row[j] < _sigmoid(s) else 0.0
    if clamped:
        for i in range(n_v):
            v[i] = x[i]
    else:
        for i in range(n_v):
            s = a[i]
            for j in range(n_h):
                s += W[i, j] * h[j]
            v[i] = 1.0 if u_row[n_h + i] < _sigmoid(s) else 0.0


@njit(cache=True)
def _hebbian_update(W, a, c, v, h, k, prob_hidden, hbuf):
    # theta += k * (v h^T, v, h) with h optionally replaced by P(h | v)
    n_v, n_h = W.shape
    if prob_hidden:
        for j in range(n_h):
            s = c[j]
            for i in range(n_v):
                s += v[i] * W[i, j]
            hbuf[j] = _sigmoid(s)
    else:
        for j in range(n_h):
            hbuf[j] = h[j]
    for i in range(n_v):
        if v[i] != 0.0:
            kv = k * v[i]
            for j in range(n_h):
                W[i, j] += kv * hbuf[j]
            a[i] += kv
    for j in range(n_h):
        c[j] += k * hbuf[j]


@njit(cache=True)
def _phase_kernel(W, a, c, v, h, x, clamped, u, step_k, end_k, prob_hidden):
    hbuf = np.empty(W.shape[1])
    for t in range(u.shape[0]):
        _gibbs_step(W, a, c, v, h, x, clamped, u[t])
        if step_k != 0.0:
            _hebbian_update(W, a, c, v, h, step_k, prob_hidden, hbuf)
    if end_k != 0.0:
        _hebbian_update(W, a, c, v, h, end_k, prob_hidden, hbuf)


@njit(cache=True)
def _record_kernel(W, a, c, v, h, x, clamped, u, thin, out_v, out_h):
    k = 0
    for t in range(u.shape[0]):
        _gibbs_step(W, a, c, v, h, x, clamped, u[t])
        if (t + 1) % thin == 0:
            out_v[k] = v
            out_h[k] = h
            k += 1


def _prepare(p: RbmParams, init: RbmState, clamp):
    v = init.visible.astype(float).copy()
    h = init.hidden.astype(float).copy()
    _check_len("initial visible", v, p.n_visible)
    _check_len("initial hidden", h, p.n_hidden)
    if clamp is None:
        x = np.zeros(p.n_visible)
        clamped = False
    else:
        x = np.ascontiguousarray(clamp, dtype=float)
        _check_len("clamp", x, p.n_visible)
        clamped = True
    return v, h, x, clamped


def gibbs_chain(p: RbmParams, init: RbmState, steps: int, clamp=None, rng=None) -> RbmState:
    """Run ``steps`` block Gibbs sweeps (hidden | visible, then visible | hidden).

    With ``clamp`` the visible layer is reset to it after every sweep.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    rng = np.random.default_rng() if rng is None else rng
    v, h, x, clamped = _prepare(p, init, clamp)
    u = rng.random((steps, p.n_hidden + p.n_visible))
    _phase_kernel(p.weights.copy(), p.vis_bias.copy(), p.hid_bias.copy(),
                  v, h, x, clamped, u, 0.0, 0.0, False)
    return RbmState(v, h)


def sample_chain(p: RbmParams, init: RbmState, n_samples: int, thin: int = 1,
                 clamp=None, rng=None, chunk: int = 1 << 16):
    """Visible and hidden states recorded every ``thin`` sweeps.

    Returns ``(visible, hidden, final_state)`` with arrays of shape
    ``(n_samples, n)``.
    """
    rng = np.random.default_rng() if rng is None else rng
    v, h, x, clamped = _prepare(p, init, clamp)
    out_v = np.empty((n_samples, p.n_visible))
    out_h = np.empty((n_samples, p.n_hidden))
    done = 0
    while done < n_samples:
        m = min(chunk, n_samples - done)
        u = rng.random((m * thin, p.n_hidden + p.n_visible))
        _record_kernel(p.weights, p.vis_bias, p.hid_bias, v, h, x, clamped, u, thin,
                       out_v[done:done + m], out_h[done:done + m])
        done += m
    return out_v, out_h, RbmState(v, h)


def run_phase(p: RbmParams, state: RbmState, steps: int, clamp, rng,
              step_lr=0.0, end_lr=0.0, prob_hidden=False) -> None:
    """Advance ``state`` and ``p`` in place through one phase of dynamics.

    After every sweep the Hebbian term of the current state is added with
    factor ``step_lr``; after the last sweep it is added once more with factor
    ``end_lr``.  Signs and importance weights are folded into the factors by
    the caller.
    """
    clamped = clamp is not None
    x = np.ascontiguousarray(clamp, dtype=float) if clamped else np.zeros(p.n_visible)
    u = rng.random((steps, p.n_hidden + p.n_visible))
    _phase_kernel(p.weights, p.vis_bias, p.hid_bias, state.visible, state.hidden,
                  x, clamped, u, float(step_lr), float(end_lr), bool(prob_hidden))


# --- gradients and likelihood ------------------------------------------------


def phase_gradient(p: RbmParams, s: RbmState, use_prob_hidden: bool = False) -> np.ndarray:
    """Hebbian statistics (v h^T, v, h) of one state, flattened."""
    v = np.asarray(s.visible, dtype=float)
    h = hidden_conditional(p, v) if use_prob_hidden else np.asarray(s.hidden, dtype=float)
    return np.concatenate([np.outer(v, h).ravel(), v, h])


def free_energy(p: RbmParams, v) -> np.ndarray | float:
    """F(v) = -a.v - sum_j softplus(c_j + (W^T v)_j); accepts a batch of rows."""
    v = np.asarray(v, dtype=float)
    _check_len("visible vector", v, p.n_visible)
    out = -(v @ p.vis_bias) - np.logaddexp(0.0, v @ p.weights + p.hid_bias).sum(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def all_binary_states(n: int) -> np.ndarray:
    """Every binary vector of length ``n``, first coordinate most significant."""
    codes = np.arange(1 << n, dtype=np.int64)
    shifts = np.arange(n - 1, -1, -1, dtype=np.int64)
    return ((codes[:, None] >> shifts) & 1).astype(float)


def _check_enumerable(p: RbmParams):
    if p.n_visible > MAX_EXACT_VISIBLE:
        raise CapabilityError(
            f"exact enumeration supports at most {MAX_EXACT_VISIBLE} visible units, got {p.n_visible}"
        )


@njit(cache=True)
def _neg_free_energy_kernel(states, W, a, c, out):
    # -F(v) with one log per state: softplus sums become a log of a product
    n, nv = states.shape
    nh = W.shape[1]
    x = np.empty(nh)
    for i in range(n):
        s = 0.0
        for j in range(nh):
            x[j] = c[j]
        for k in range(nv):
            if states[i, k] != 0.0:
                s += a[k]
                for j in range(nh):
                    x[j] += W[k, j]
        prod = 1.0
        for j in range(nh):
            v = x[j]
            if v > 0:
                s += v
                prod *= 1.0 + np.exp(-v)
            else:
                prod *= 1.0 + np.exp(v)
            if prod > 1e300:
                s += np.log(prod)
                prod = 1.0
        out[i] = s + np.log(prod)


@functools.lru_cache(maxsize=4)
def _state_block(n, start, stop):
    codes = np.arange(start, stop, dtype=np.int64)
    shifts = np.arange(n - 1, -1, -1, dtype=np.int64)
    block = ((codes[:, None] >> shifts) & 1).astype(float)
    block.flags.writeable = False
    return block


def log_partition(p: RbmParams) -> float:
    """ln Z by enumerating visible states in fixed-order blocks."""
    _check_enumerable(p)
    n = p.n_visible
    total = 1 << n
    if not p.is_finite():
        return float("nan")
    parts = []
    for start in range(0, total, _ENUM_BLOCK):
        block = _state_block(n, start, min(start + _ENUM_BLOCK, total))
        out = np.empty(len(block))
        _neg_free_energy_kernel(block, p.weights, p.vis_bias, p.hid_bias, out)
        parts.append(logsumexp(out))
    return float(logsumexp(parts))


def exact_nll(p: RbmParams, dataset) -> float:
    """Mean negative log-likelihood in nats, with ln Z by full enumeration."""
    x = np.atleast_2d(np.asarray(dataset, dtype=float))
    _check_len("data vector", x, p.n_visible)
    return log_partition(p) + float(np.mean(free_energy(p, x)))


def model_distribution(p: RbmParams) -> tuple[np.ndarray, np.ndarray]:
    """All visible states and their exact model probabilities."""
    _check_enumerable(p)
    states = all_binary_states(p.n_visible)
    logp = -free_energy(p, states)
    logp -= logsumexp(logp)
    return states, np.exp(logp)


def exact_nll_gradient(p: RbmParams, dataset) -> np.ndarray:
    """Gradient of :func:`exact_nll`: E_model[stats] - E_data[stats]."""
    x = np.atleast_2d(np.asarray(dataset, dtype=float))
    states, probs = model_distribution(p)

    def expected(vs, w):
        ph = hidden_conditional(p, vs)
        return np.concatenate([(vs * w[:, None]).T @ ph, w @ vs, w @ ph], axis=None)

    data_term = expected(x, np.full(len(x), 1.0 / len(x)))
    model_term = expected(states, probs)
    return model_term - data_term
