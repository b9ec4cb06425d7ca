"""Model adapters for the phase engine and the standard training drivers."""
from __future__ import annotations

from collections import Counter

import numpy as np

from . import ff, rbm
from .data import Dataset, generate_bas
from .estimator import PhaseKind
from .phases import RunResult, ScheduleConfig, run_training

__all__ = ["RbmHooks", "FfHooks", "train_rbm", "train_ff"]


class RbmHooks:
    """RBM on a binary dataset; the network state persists across phases.

    A positive phase clamps the visible layer to one data vector, a negative
    phase lets the whole network run freely from wherever the previous phase
    left it.  The NLL gradient terms are the negated Hebbian statistics.
    """

    def __init__(self, params: rbm.RbmParams, data, prob_hidden_pos=True, prob_hidden_neg=False):
        self.params = params
        self.data = np.asarray(data, dtype=float)
        self.state = rbm.RbmState(np.zeros(params.n_visible), np.zeros(params.n_hidden))
        self.prob_hidden = {PhaseKind.POSITIVE: prob_hidden_pos, PhaseKind.NEGATIVE: prob_hidden_neg}

    def draw_positive_input(self, rng):
        return self.data[rng.integers(len(self.data))]

    def draw_negative_context(self, rng):
        return None

    def _clamp(self, kind, x):
        return x if kind is PhaseKind.POSITIVE else None

    def dynamics_step(self, kind, x, rng):
        rbm.run_phase(self.params, self.state, 1, self._clamp(kind, x), rng)

    def phase_gradient(self, kind):
        return -rbm.phase_gradient(self.params, self.state, self.prob_hidden[kind])

    def apply_update(self, direction, lr):
        p = self.params
        d = lr * np.asarray(direction)
        nw = p.weights.size
        p.weights -= d[:nw].reshape(p.weights.shape)
        p.vis_bias -= d[nw:nw + p.n_visible]
        p.hid_bias -= d[nw + p.n_visible:]

    def run_phase(self, kind, x, length, step_lr, end_lr, weight, rng):
        # descent on -stats with factor lr * weight is ascent on stats
        rbm.run_phase(self.params, self.state, length, self._clamp(kind, x), rng,
                      step_lr=step_lr * weight, end_lr=end_lr * weight,
                      prob_hidden=self.prob_hidden[kind])

    def metric(self):
        if not self.params.is_finite():
            return float("nan")
        with np.errstate(over="ignore", invalid="ignore"):
            return rbm.exact_nll(self.params, self.data)


class FfHooks:
    """Forward-Forward network; one "dynamics step" is one forward pass.

    ``update_log`` counts, for every parameter update, which phase kinds fed
    it and how many samples were touched since the previous update.
    """

    def __init__(self, net: ff.FfNetwork, train: Dataset, evaluate: Dataset | None = None,
                 threshold: float = 2.0):
        if train.labels is None:
            raise ValueError("Forward-Forward training needs labelled data")
        self.net = net
        self.train = train
        self.evaluate = evaluate if evaluate is not None else train
        self.threshold = threshold
        self.adam = ff.AdamState.zeros_like(net.params)
        self.current: dict[PhaseKind, np.ndarray] = {}
        self.update_log: Counter = Counter()
        self._pending: list[str] = []

    def draw_positive_input(self, rng):
        i = rng.integers(len(self.train))
        return ff.embed_label(self.train.samples[i], self.train.labels[i])

    def draw_negative_context(self, rng):
        i = rng.integers(len(self.train))
        return ff.embed_label(self.train.samples[i], ff.wrong_label(self.train.labels[i], rng))

    def dynamics_step(self, kind, x, rng):
        self.current[kind] = x

    def phase_gradient(self, kind):
        self._pending.append(str(kind))
        g = ff.ff_phase_gradient(self.net, self.current[kind], kind, self.threshold)
        return g if kind is PhaseKind.POSITIVE else -g

    def apply_update(self, direction, lr):
        self.update_log["".join(self._pending)] += 1
        self._pending.clear()
        self.adam.lr = lr
        self.net.params, self.adam = ff.adam_step(self.adam, self.net.params, direction, inplace=True)

    def metric(self):
        if not np.all(np.isfinite(self.net.params)):
            return float("nan")
        return ff.error_rate(self.net, self.evaluate.samples, self.evaluate.labels)


def _streams(seed):
    init_rng, run_rng = np.random.default_rng(seed).spawn(2)
    return init_rng, run_rng


def train_rbm(sched: ScheduleConfig, seed: int, *, n_hidden: int = 16, data=None,
              bas_n: int = 4, init_std: float = 0.01, prob_hidden_pos: bool = True,
              prob_hidden_neg: bool = False, fast: bool = True) -> tuple[RunResult, RbmHooks]:
    """Train an RBM (default 16 hidden units on 4x4 Bars-And-Stripes)."""
    data = generate_bas(bas_n).samples if data is None else np.asarray(data, dtype=float)
    init_rng, run_rng = _streams(seed)
    params = rbm.RbmParams.random(data.shape[1], n_hidden, init_rng, std=init_std)
    hooks = RbmHooks(params, data, prob_hidden_pos, prob_hidden_neg)
    result = run_training(hooks, sched, run_rng, seed=seed, metric_name="nll", fast=fast)
    return result, hooks


def train_ff(sched: ScheduleConfig, seed: int, train: Dataset, evaluate: Dataset | None = None,
             *, hidden=(500, 500), threshold: float = 2.0) -> tuple[RunResult, FfHooks]:
    """Train a Forward-Forward network; the metric is classification error."""
    init_rng, run_rng = _streams(seed)
    net = ff.FfNetwork.init((train.samples.shape[1], *hidden), init_rng)
    hooks = FfHooks(net, train, evaluate, threshold)
    result = run_training(hooks, sched, run_rng, seed=seed, metric_name="error")
    return result, hooks
